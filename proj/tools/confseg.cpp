// confseg command-line driver.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "confseg/checkpoint.hpp"
#include "confseg/experiment.hpp"
#include "confseg/gradsuite.hpp"
#include "confseg/metrics.hpp"
#include "confseg/phantom.hpp"
#include "confseg/service.hpp"

namespace fs = std::filesystem;
using namespace confseg;

namespace {

constexpr int kUsageError = 2;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<unsigned> threads;
    std::optional<std::string> task;
    std::optional<std::string> cohort;
    std::vector<int> thresholds;
    std::vector<std::size_t> folds;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;
};

const std::vector<int> kGrid(kThresholdLevels.begin(), kThresholdLevels.end());

void add_common(CLI::App* app, Common& c, bool with_task) {
    app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "run seed (replaces the config's seed list)");
    app->add_option("--out", c.out, "output directory");
    app->add_option("--threads", c.threads, "parallel sub-runs")->check(CLI::PositiveNumber);
    if (with_task) {
        app->add_option("--task", c.task, "seg | sf_change | sf_regress | readmission")
            ->check(CLI::IsMember({"seg", "sf_change", "sf_regress", "readmission"}));
    }
    app->add_option("--cohort", c.cohort, "cohort directory (default: $CONFSEG_DATA_DIR)");
    app->add_option("--threshold", c.thresholds, "confidence threshold(s)")->check(CLI::IsMember(kGrid));
    app->add_option("--fold", c.folds, "validation fold(s)");
    app->add_option("--epochs", c.epochs, "training epochs")->check(CLI::PositiveNumber);
    app->add_option("--lr", c.lr, "learning rate")->check(CLI::PositiveNumber);
}

ExperimentConfig build_config(const Common& c, std::optional<Task> forced = std::nullopt) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed) cfg.seeds = {*c.seed};
    if (c.out) cfg.out = *c.out;
    if (c.threads) cfg.threads = *c.threads;
    if (c.task) cfg.task = parse_task(*c.task);
    if (forced) cfg.task = *forced;
    if (c.cohort) cfg.cohort = *c.cohort;
    if (!c.thresholds.empty()) cfg.thresholds = c.thresholds;
    if (!c.folds.empty()) cfg.folds = c.folds;
    if (c.epochs) {
        cfg.seg.epochs = *c.epochs;
        cfg.task_train.epochs = *c.epochs;
    }
    if (c.lr) {
        cfg.seg.lr = *c.lr;
        cfg.task_train.lr = *c.lr;
    }
    validate(cfg);
    return cfg;
}

std::span<const std::string> pick_patients(const FoldSplit& split, const std::string& which, std::size_t fold,
                                           std::vector<std::string>& storage) {
    if (which == "test") return split.held_out_test;
    if (which == "val") return split.val_patients(fold);
    storage = split.train_patients(fold);
    return storage;
}

void print_rows(const std::vector<std::pair<std::string, std::optional<double>>>& rows) {
    std::vector<std::vector<std::string>> table;
    for (const auto& [name, v] : rows) table.push_back({name, format_metric(v)});
    std::cout << render_text_table({"metric", "value"}, table);
}

AnnotationServer* g_server = nullptr;

extern "C" void on_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Confidence-aware segmentation laboratory"};
    app.require_subcommand(1);

    // phantom-gen
    auto* gen = app.add_subcommand("phantom-gen", "write a synthetic ultrasound cohort");
    std::size_t gen_patients = 60;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    unsigned gen_threads = 1;
    PhantomSpec spec;
    PlantedLinkParams link;
    gen->add_option("--patients", gen_patients, "number of patients (>= 6)")->capture_default_str();
    gen->add_option("--seed", gen_seed, "cohort seed")->capture_default_str();
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--threads", gen_threads, "render threads")->check(CLI::PositiveNumber)->capture_default_str();
    gen->add_option("--frames", spec.frames, "frames per video")->capture_default_str();
    gen->add_option("--width", spec.width, "frame width")->capture_default_str();
    gen->add_option("--height", spec.height, "frame height")->capture_default_str();
    gen->add_option("--eta-std", link.eta_std, "S/F noise around the planted link")->capture_default_str();

    // split
    auto* split_cmd = app.add_subcommand("split", "patient-wise fold split of a cohort");
    std::string split_cohort;
    std::size_t split_folds_n = 5;
    std::size_t split_test = 0;
    std::uint64_t split_seed = 0;
    std::string split_out;
    split_cmd->add_option("--cohort", split_cohort, "cohort directory (default: $CONFSEG_DATA_DIR)");
    split_cmd->add_option("--folds", split_folds_n, "cross-validation folds")->capture_default_str();
    split_cmd->add_option("--test", split_test, "held-out test patients (0: one fifth)");
    split_cmd->add_option("--seed", split_seed, "split seed")->capture_default_str();
    split_cmd->add_option("--out", split_out, "folds.json to write")->required();

    // train-seg / train-task / run
    Common seg_common, task_common, run_common, cfg_common;
    auto* train_seg_cmd = app.add_subcommand("train-seg", "train and evaluate segmentation models over the sweep");
    add_common(train_seg_cmd, seg_common, false);
    auto* train_task_cmd = app.add_subcommand("train-task", "train and evaluate a downstream task over the sweep");
    add_common(train_task_cmd, task_common, true);
    std::optional<std::string> task_seg_source, task_seg_ckpts;
    train_task_cmd->add_option("--seg-source", task_seg_source, "model | oracle | none")
        ->check(CLI::IsMember({"model", "oracle", "none"}));
    train_task_cmd->add_option("--seg-checkpoints", task_seg_ckpts, "directory of segmentation checkpoints");
    auto* run_cmd = app.add_subcommand("run", "run the experiment described by a config");
    add_common(run_cmd, run_common, true);

    // eval-seg
    auto* eval_seg_cmd = app.add_subcommand("eval-seg", "evaluate a segmentation checkpoint");
    std::string es_ckpt, es_config, es_split = "test", es_cohort;
    int es_threshold = 60;
    std::size_t es_fold = 0;
    eval_seg_cmd->add_option("--checkpoint", es_ckpt, "segmentation checkpoint")->required()->check(CLI::ExistingFile);
    eval_seg_cmd->add_option("--threshold", es_threshold, "confidence threshold")->check(CLI::IsMember(kGrid))->capture_default_str();
    eval_seg_cmd->add_option("--config", es_config, "config giving the cohort and split")->check(CLI::ExistingFile);
    eval_seg_cmd->add_option("--cohort", es_cohort, "cohort directory");
    eval_seg_cmd->add_option("--split", es_split, "test | val | train")->check(CLI::IsMember({"test", "val", "train"}))->capture_default_str();
    eval_seg_cmd->add_option("--fold", es_fold, "fold for val/train")->capture_default_str();

    // eval-task
    auto* eval_task_cmd = app.add_subcommand("eval-task", "evaluate a downstream checkpoint on the test split");
    std::string et_ckpt, et_config, et_task, et_cohort, et_seg_source = "model", et_seg_ckpt;
    eval_task_cmd->add_option("--checkpoint", et_ckpt, "task checkpoint")->required()->check(CLI::ExistingFile);
    eval_task_cmd->add_option("--task", et_task, "sf_change | sf_regress | readmission")
        ->required()
        ->check(CLI::IsMember({"sf_change", "sf_regress", "readmission"}));
    eval_task_cmd->add_option("--config", et_config, "config giving the cohort and split")->check(CLI::ExistingFile);
    eval_task_cmd->add_option("--cohort", et_cohort, "cohort directory");
    eval_task_cmd->add_option("--seg-source", et_seg_source, "model | oracle | none")
        ->check(CLI::IsMember({"model", "oracle", "none"}))
        ->capture_default_str();
    eval_task_cmd->add_option("--seg-checkpoint", et_seg_ckpt, "segmentation checkpoint (seg-source model)");

    // report
    auto* report_cmd = app.add_subcommand("report", "rebuild reports from a runs CSV");
    std::string rp_runs, rp_task, rp_out = ".", rp_config;
    report_cmd->add_option("--runs", rp_runs, "<task>_runs.csv")->required()->check(CLI::ExistingFile);
    report_cmd->add_option("--task", rp_task, "task of the runs")
        ->required()
        ->check(CLI::IsMember({"seg", "sf_change", "sf_regress", "readmission"}));
    report_cmd->add_option("--out", rp_out, "output directory")->capture_default_str();
    report_cmd->add_option("--config", rp_config, "config whose hash goes in the header")->check(CLI::ExistingFile);

    // threshold
    auto* thr_cmd = app.add_subcommand("threshold", "binarise a .cmap into per-channel PGM masks");
    std::string th_cmap, th_out = ".";
    std::optional<int> th_t;
    bool th_all = false;
    thr_cmd->add_option("cmap", th_cmap, ".cmap file")->required()->check(CLI::ExistingFile);
    auto* th_opt = thr_cmd->add_option("--t", th_t, "threshold in {0,20,40,50,60,80,100}")->check(CLI::IsMember(kGrid));
    thr_cmd->add_flag("--all", th_all, "every threshold")->excludes(th_opt);
    thr_cmd->add_option("--out", th_out, "output directory")->capture_default_str();

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every op and model");
    double gc_tol = 1e-3;
    std::uint64_t gc_seed = 0;
    grad_cmd->add_option("--tolerance", gc_tol, "max relative error")->capture_default_str();
    grad_cmd->add_option("--seed", gc_seed, "shape seed")->capture_default_str();

    // serve
    auto* serve_cmd = app.add_subcommand("serve", "run the annotation service");
    ServiceConfig svc;
    std::string svc_data, svc_static;
    serve_cmd->add_option("--data", svc_data, "directory with images/ and labels/")->required()->check(CLI::ExistingDirectory);
    serve_cmd->add_option("--static", svc_static, "built UI assets to serve at /")->check(CLI::ExistingDirectory);
    serve_cmd->add_option("--bind", svc.bind, "listen address")->capture_default_str();
    serve_cmd->add_option("--port", svc.port, "listen port (0: any free port)")->capture_default_str();

    // print-config
    auto* print_cmd = app.add_subcommand("print-config", "print the effective config (defaults merged with --config)");
    add_common(print_cmd, cfg_common, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsageError;
    }

    try {
        if (*gen) {
            const auto m = gen_cohort(gen_seed, gen_patients, spec, gen_out, link, gen_threads);
            std::cout << "wrote " << m.patients.size() << " patients to " << gen_out << '\n';
            return 0;
        }
        if (*split_cmd) {
            ExperimentConfig cfg;
            cfg.cohort = split_cohort;
            const auto manifest = load_manifest(resolve_cohort_dir(cfg) / "cohort.json");
            const std::size_t test = split_test > 0 ? split_test : std::max<std::size_t>(1, manifest.patients.size() / 5);
            const auto folds = split_folds(manifest, split_folds_n, test, split_seed);
            save_folds(split_out, folds);
            std::cout << "test " << folds.held_out_test.size() << ", " << folds.fold_count << " folds -> " << split_out << '\n';
            return 0;
        }
        if (*train_seg_cmd) return run_experiment(build_config(seg_common, Task::Seg), std::cerr);
        if (*train_task_cmd) {
            auto cfg = build_config(task_common);
            if (cfg.task == Task::Seg) throw std::invalid_argument("train-task needs a downstream --task");
            if (task_seg_source) cfg.seg_source = parse_seg_source(*task_seg_source);
            if (task_seg_ckpts) cfg.seg_checkpoints = *task_seg_ckpts;
            return run_experiment(cfg, std::cerr);
        }
        if (*run_cmd) return run_experiment(build_config(run_common), std::cerr);
        if (*print_cmd) {
            std::cout << to_json(build_config(cfg_common)).dump(2) << '\n';
            return 0;
        }
        if (*eval_seg_cmd) {
            ExperimentConfig cfg = es_config.empty() ? ExperimentConfig{} : load_config(es_config);
            if (!es_cohort.empty()) cfg.cohort = es_cohort;
            const auto data = load_cohort(resolve_cohort_dir(cfg));
            const auto split = resolve_folds(cfg, data.manifest);
            std::vector<std::string> storage;
            const auto samples = data.seg_samples(pick_patients(split, es_split, es_fold, storage));
            const auto model = SegNet<float>::from_checkpoint(nn::load_checkpoint(es_ckpt));
            const auto row = evaluate_seg(model, samples, ConfidenceThreshold(es_threshold));
            std::vector<std::pair<std::string, std::optional<double>>> rows = {
                {"iou", row.iou}, {"weighted_ce", row.weighted_ce}, {"soft_ce", row.soft_ce}, {"trimap_loss", row.trimap_loss}};
            for (std::size_t c = 0; c < kChannels; ++c) rows.push_back({"iou_" + std::string(kChannelNames[c]), row.channel_iou[c]});
            print_rows(rows);
            return 0;
        }
        if (*eval_task_cmd) {
            ExperimentConfig cfg = et_config.empty() ? ExperimentConfig{} : load_config(et_config);
            if (!et_cohort.empty()) cfg.cohort = et_cohort;
            const auto data = load_cohort(resolve_cohort_dir(cfg));
            const auto split = resolve_folds(cfg, data.manifest);
            const auto kind = parse_seg_source(et_seg_source);
            std::optional<SegNet<float>> model;
            if (kind == SegSourceKind::Model) {
                if (et_seg_ckpt.empty()) throw std::invalid_argument("--seg-checkpoint is required with --seg-source model");
                model = SegNet<float>::from_checkpoint(nn::load_checkpoint(et_seg_ckpt));
            }
            const FusedStore store(data, kind, model ? &*model : nullptr);
            const auto ckpt = nn::load_checkpoint(et_ckpt);
            const auto& test = split.held_out_test;
            switch (parse_task(et_task)) {
                case Task::SfChange: {
                    const auto pairs = build_pairs(data.manifest, test, PairRole::Test, 0, cfg.task_train.test_pair_cap);
                    const auto m = eval_sf_change(ckpt, store, pairs);
                    print_rows({{"accuracy3", m.accuracy3}, {"accuracy2", m.accuracy2}, {"recall2", m.recall2},
                                {"precision2", m.precision2}});
                    break;
                }
                case Task::SfRegress: {
                    std::vector<std::pair<std::string, std::optional<double>>> rows;
                    for (auto mode : {AggregateMode::Avg, AggregateMode::Median, AggregateMode::Max}) {
                        rows.push_back({"rmse_" + std::string(aggregate_name(mode)), eval_sf_regress(ckpt, store, test, mode).rmse});
                    }
                    print_rows(rows);
                    break;
                }
                case Task::Readmission: {
                    const auto m = eval_readmission(ckpt, store, test);
                    print_rows({{"accuracy", m.accuracy}, {"recall", m.recall}, {"precision", m.precision}});
                    break;
                }
                case Task::Seg: break;
            }
            return 0;
        }
        if (*report_cmd) {
            const auto records = read_runs_csv(rp_runs);
            ReportInfo info;
            if (!rp_config.empty()) {
                const auto cfg = load_config(rp_config);
                info.config_hash = config_hash(cfg);
                info.seeds = cfg.seeds;
            } else {
                info.config_hash = "unknown";
                for (const auto& r : records) {
                    if (std::find(info.seeds.begin(), info.seeds.end(), r.seed) == info.seeds.end()) info.seeds.push_back(r.seed);
                }
            }
            for (const auto& p : write_reports(rp_out, parse_task(rp_task), records, info)) std::cout << p.string() << '\n';
            return 0;
        }
        if (*thr_cmd) {
            if (!th_t && !th_all) {
                std::cerr << "threshold: give --t or --all\n";
                return kUsageError;
            }
            const auto cmap = load_cmap(th_cmap);
            const auto stem = fs::path(th_cmap).stem().string();
            const std::vector<int> levels = th_all ? kGrid : std::vector<int>{*th_t};
            for (int t : levels) {
                for (const auto& p : write_threshold_masks(cmap, ConfidenceThreshold(t), th_out, stem)) std::cout << p.string() << '\n';
            }
            return 0;
        }
        if (*grad_cmd) {
            bool ok = true;
            for (const auto& e : run_gradcheck_suite(gc_tol, gc_seed)) {
                std::cout << (e.result.passed ? "ok   " : "FAIL ") << e.name << "  max rel err " << e.result.worst_relative_error << "  kinks skipped " << e.result.kinks_skipped << "/" << e.result.checked << '\n';
                ok = ok && e.result.passed;
            }
            return ok ? 0 : 1;
        }
        if (*serve_cmd) {
            svc.data_dir = svc_data;
            svc.static_dir = svc_static;
            AnnotationServer server(svc);
            const int port = server.bind();
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cerr << "serving " << svc_data << " on http://" << svc.bind << ':' << port << '\n';
            server.listen();
            g_server = nullptr;
            return 0;
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
