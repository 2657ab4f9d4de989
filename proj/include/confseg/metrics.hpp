#pragma once

// Segmentation and downstream-task metrics, plus threshold-sweep reports.

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "confseg/label.hpp"

namespace confseg {

/// Probabilities are clamped to [eps, 1 - eps] before any logarithm.
inline constexpr double kProbEpsilon = 1e-7;

/// Six-plane per-pixel sigmoid outputs, same layout as ConfidenceMap.
struct ProbMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> values;

    ProbMap() = default;
    ProbMap(std::size_t w, std::size_t h, double fill = 0.5) : width(w), height(h), values(kChannels * w * h, fill) {}

    double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
};

struct IouResult {
    /// Empty where the channel's union is empty.
    std::array<std::optional<double>, kChannels> per_channel;
    /// Mean over channels with a non-empty union; 1.0 if every union is empty.
    double macro = 1.0;
};

IouResult iou(const BinaryMaskStack& pred, const BinaryMaskStack& gt);

double weighted_ce(const ProbMap& pred, const BinaryMaskStack& gt, const WeightMap& w);
double soft_ce(const ProbMap& pred, const ConfidenceMap& cmap);
/// Empty when the confidence map has no pixel at exactly 0 or 100.
std::optional<double> trimap_loss(const ProbMap& pred, const ConfidenceMap& cmap);

/// Binary mask of pred >= 0.5.
BinaryMaskStack binarize(const ProbMap& pred, double cut = 0.5);

double rmse(std::span<const double> preds, std::span<const double> targets);

struct ClassificationScores {
    double accuracy = 0.0;
    /// Empty when no target is positive.
    std::optional<double> recall;
    /// Empty when nothing is predicted positive.
    std::optional<double> precision;
};

ClassificationScores classification_scores(std::span<const int> preds, std::span<const int> targets,
                                           int positive_class);

// ---------------------------------------------------------------------------
// Reports

/// Running mean / sample standard deviation across folds.
struct SummaryStat {
    double mean = 0.0;
    double stdev = 0.0;
    std::size_t count = 0;
};

/// Sample (n-1) standard deviation; zero for a single value.  Empty input yields count 0.
SummaryStat summarize(std::span<const double> values);

struct SegMetricRow {
    ConfidenceThreshold threshold{0};
    double iou = 0.0;
    double weighted_ce = 0.0;
    double soft_ce = 0.0;
    std::optional<double> trimap_loss;
    std::array<std::optional<double>, kChannels> channel_iou;
};

/// Averages per-image metrics of one model over an evaluation set.  Images
/// whose trimap is empty do not contribute to trimap_loss; a channel's IoU
/// averages only over images where its union is non-empty.
class SegMetricAccumulator {
public:
    explicit SegMetricAccumulator(ConfidenceThreshold t) : threshold_(t) {}

    /// Evaluates `pred` against `cmap` at this accumulator's threshold.
    void add(const ProbMap& pred, const ConfidenceMap& cmap);
    SegMetricRow row() const;
    std::size_t count() const noexcept { return count_; }

private:
    ConfidenceThreshold threshold_;
    std::size_t count_ = 0;
    double iou_sum_ = 0.0;
    double wce_sum_ = 0.0;
    double sce_sum_ = 0.0;
    double trimap_sum_ = 0.0;
    std::size_t trimap_count_ = 0;
    std::array<double, kChannels> channel_sum_{};
    std::array<std::size_t, kChannels> channel_count_{};
};

/// Formats a double with fixed precision, or "NA" when empty.
std::string format_metric(std::optional<double> v, int precision = 6);

/// Plain-text table with right-aligned columns.
std::string render_text_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

}  // namespace confseg
