#pragma once

// Experiment orchestration: JSON configs, (threshold, fold, seed) sweeps,
// long-format run records, and the CSV / text / SVG reports built from them.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "confseg/downstream.hpp"
#include "confseg/segmodel.hpp"

namespace confseg {

enum class Task { Seg, SfChange, SfRegress, Readmission };
std::string_view task_name(Task t) noexcept;
Task parse_task(std::string_view name);

struct ExperimentConfig {
    /// Cohort directory; empty means $CONFSEG_DATA_DIR.
    std::string cohort;
    /// Fold file; empty means split the cohort with the settings below.
    std::string folds_file;
    std::size_t fold_count = 5;
    /// 0 means one fifth of the cohort.
    std::size_t test_patients = 0;
    std::uint64_t split_seed = 0;

    Task task = Task::Seg;
    std::vector<int> thresholds = {0, 20, 40, 50, 60, 80, 100};
    /// Cross-validation folds used as validation; the rest train.
    std::vector<std::size_t> folds = {0};
    std::vector<std::uint64_t> seeds = {0};

    SegTrainConfig seg;
    TaskTrainConfig task_train;
    SegSourceKind seg_source = SegSourceKind::Model;
    /// Where segmentation checkpoints are written (seg) or read (downstream);
    /// empty means <out>/checkpoints.
    std::string seg_checkpoints;
    /// Readmission encoder starts from an S/F-change model of the same run.
    bool warm_start = true;

    std::string out = "confseg-out";
    unsigned threads = 1;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Throws std::invalid_argument on thresholds outside the grid, empty
/// sweeps, or unknown enum names.
void validate(const ExperimentConfig& cfg);
/// 16 hex digits of FNV-1a over the canonical JSON dump.
std::string config_hash(const ExperimentConfig& cfg);

/// Resolves the cohort directory, falling back to $CONFSEG_DATA_DIR.
std::filesystem::path resolve_cohort_dir(const ExperimentConfig& cfg);
FoldSplit resolve_folds(const ExperimentConfig& cfg, const CohortManifest& manifest);

struct RunRecord {
    std::size_t fold = 0;
    std::uint64_t seed = 0;
    /// Threshold level, or the segmentation source name when no model is used.
    std::string threshold;
    std::string metric;
    std::optional<double> value;
};

void write_runs_csv(const std::filesystem::path& path, const std::vector<RunRecord>& records);
std::vector<RunRecord> read_runs_csv(const std::filesystem::path& path);

/// Metric columns of the per-task summary table, in report order.
std::vector<std::string> report_metrics(Task task);

struct ReportInfo {
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
};

/// Writes <task>_report.csv (means), <task>_report.txt (mean +/- 1-sigma) and
/// one SVG per metric into `dir`.  Returns the written paths.
std::vector<std::filesystem::path> write_reports(const std::filesystem::path& dir, Task task,
                                                 const std::vector<RunRecord>& records, const ReportInfo& info);

/// Declared deviations from the reference setup, printed in every report.
const std::vector<std::string>& declared_deviations();

/// Runs the whole sweep.  Sub-run failures are logged under <out>/logs and
/// make the return value nonzero; the remaining runs still execute.
int run_experiment(const ExperimentConfig& cfg, std::ostream& log);

std::filesystem::path seg_checkpoint_path(const std::filesystem::path& dir, int threshold, std::size_t fold,
                                          std::uint64_t seed);

/// One PGM per channel (255 = foreground) named <stem>_t<t>_<channel>.pgm.
std::vector<std::filesystem::path> write_threshold_masks(const ConfidenceMap& cmap, ConfidenceThreshold t,
                                                         const std::filesystem::path& out_dir, const std::string& stem);

/// Minimal line plot: one series with optional 1-sigma error bars.
std::string render_svg_plot(const std::string& title, const std::string& y_label,
                            const std::vector<std::string>& x_labels, const std::vector<double>& means,
                            const std::vector<double>& stdevs);

}  // namespace confseg
