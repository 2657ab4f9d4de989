#include "confseg/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "confseg/metrics.hpp"

namespace confseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view task_name(Task t) noexcept {
    switch (t) {
        case Task::Seg: return "seg";
        case Task::SfChange: return "sf_change";
        case Task::SfRegress: return "sf_regress";
        case Task::Readmission: return "readmission";
    }
    return "?";
}

Task parse_task(std::string_view name) {
    if (name == "seg") return Task::Seg;
    if (name == "sf_change") return Task::SfChange;
    if (name == "sf_regress") return Task::SfRegress;
    if (name == "readmission") return Task::Readmission;
    throw std::invalid_argument("unknown task: " + std::string(name));
}

// ---------------------------------------------------------------------------
// Config JSON

namespace {

std::string_view weighting_name(LossWeighting w) {
    switch (w) {
        case LossWeighting::Confidence: return "confidence";
        case LossWeighting::Uniform: return "uniform";
        case LossWeighting::Unweighted: return "unweighted";
    }
    return "?";
}

LossWeighting parse_weighting(std::string_view s) {
    if (s == "confidence") return LossWeighting::Confidence;
    if (s == "uniform") return LossWeighting::Uniform;
    if (s == "unweighted") return LossWeighting::Unweighted;
    throw std::invalid_argument("unknown loss weighting: " + std::string(s));
}

void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!obj.is_object()) throw std::invalid_argument(where + " must be a JSON object");
    for (const auto& [key, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw std::invalid_argument("unknown config key " + where + "." + key);
        }
    }
}

template <typename T>
void read(const json& obj, const char* key, T& dst) {
    if (obj.contains(key)) dst = obj.at(key).get<T>();
}

}  // namespace

json to_json(const ExperimentConfig& c) {
    return json{
        {"cohort", c.cohort},
        {"folds_file", c.folds_file},
        {"fold_count", c.fold_count},
        {"test_patients", c.test_patients},
        {"split_seed", c.split_seed},
        {"task", task_name(c.task)},
        {"thresholds", c.thresholds},
        {"folds", c.folds},
        {"seeds", c.seeds},
        {"seg",
         {{"epochs", c.seg.epochs},
          {"lr", c.seg.lr},
          {"lr_min", c.seg.lr_min},
          {"batch_size", c.seg.batch_size},
          {"weighting", weighting_name(c.seg.weighting)},
          {"augment", {{"flip", c.seg.augment.flip}, {"rotate", c.seg.augment.rotate}, {"intensity", c.seg.augment.intensity}}}}},
        {"task_train",
         {{"epochs", c.task_train.epochs},
          {"lr", c.task_train.lr},
          {"batch_size", c.task_train.batch_size},
          {"train_pair_cap", c.task_train.train_pair_cap},
          {"val_pair_cap", c.task_train.val_pair_cap},
          {"test_pair_cap", c.task_train.test_pair_cap},
          {"aggregate", aggregate_name(c.task_train.aggregate)}}},
        {"seg_source", seg_source_name(c.seg_source)},
        {"seg_checkpoints", c.seg_checkpoints},
        {"warm_start", c.warm_start},
        {"out", c.out},
        {"threads", c.threads},
    };
}

ExperimentConfig config_from_json(const json& doc) {
    reject_unknown(doc,
                   {"cohort", "folds_file", "fold_count", "test_patients", "split_seed", "task", "thresholds", "folds",
                    "seeds", "seg", "task_train", "seg_source", "seg_checkpoints", "warm_start", "out", "threads"},
                   "config");
    ExperimentConfig c;
    read(doc, "cohort", c.cohort);
    read(doc, "folds_file", c.folds_file);
    read(doc, "fold_count", c.fold_count);
    read(doc, "test_patients", c.test_patients);
    read(doc, "split_seed", c.split_seed);
    if (doc.contains("task")) c.task = parse_task(doc.at("task").get<std::string>());
    read(doc, "thresholds", c.thresholds);
    read(doc, "folds", c.folds);
    read(doc, "seeds", c.seeds);
    if (doc.contains("seg")) {
        const auto& s = doc.at("seg");
        reject_unknown(s, {"epochs", "lr", "lr_min", "batch_size", "weighting", "augment"}, "seg");
        read(s, "epochs", c.seg.epochs);
        read(s, "lr", c.seg.lr);
        read(s, "lr_min", c.seg.lr_min);
        read(s, "batch_size", c.seg.batch_size);
        if (s.contains("weighting")) c.seg.weighting = parse_weighting(s.at("weighting").get<std::string>());
        if (s.contains("augment")) {
            const auto& a = s.at("augment");
            reject_unknown(a, {"flip", "rotate", "intensity"}, "seg.augment");
            read(a, "flip", c.seg.augment.flip);
            read(a, "rotate", c.seg.augment.rotate);
            read(a, "intensity", c.seg.augment.intensity);
        }
    }
    if (doc.contains("task_train")) {
        const auto& t = doc.at("task_train");
        reject_unknown(t, {"epochs", "lr", "batch_size", "train_pair_cap", "val_pair_cap", "test_pair_cap", "aggregate"},
                       "task_train");
        read(t, "epochs", c.task_train.epochs);
        read(t, "lr", c.task_train.lr);
        read(t, "batch_size", c.task_train.batch_size);
        read(t, "train_pair_cap", c.task_train.train_pair_cap);
        read(t, "val_pair_cap", c.task_train.val_pair_cap);
        read(t, "test_pair_cap", c.task_train.test_pair_cap);
        if (t.contains("aggregate")) c.task_train.aggregate = parse_aggregate(t.at("aggregate").get<std::string>());
    }
    if (doc.contains("seg_source")) c.seg_source = parse_seg_source(doc.at("seg_source").get<std::string>());
    read(doc, "seg_checkpoints", c.seg_checkpoints);
    read(doc, "warm_start", c.warm_start);
    read(doc, "out", c.out);
    read(doc, "threads", c.threads);
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    return config_from_json(json::parse(in));
}

void validate(const ExperimentConfig& c) {
    if (c.thresholds.empty()) throw std::invalid_argument("config: thresholds must be nonempty");
    for (int t : c.thresholds) {
        if (!ConfidenceThreshold::is_valid(t)) throw std::invalid_argument("config: threshold " + std::to_string(t) + " is not in the grid");
    }
    if (std::set<int>(c.thresholds.begin(), c.thresholds.end()).size() != c.thresholds.size()) {
        throw std::invalid_argument("config: duplicate thresholds");
    }
    if (c.folds.empty() || c.seeds.empty()) throw std::invalid_argument("config: folds and seeds must be nonempty");
    if (c.fold_count < 2) throw std::invalid_argument("config: fold_count must be >= 2");
    for (auto f : c.folds) {
        if (f + 1 >= c.fold_count) throw std::invalid_argument("config: fold index " + std::to_string(f) + " out of range");
    }
    if (c.seg.epochs == 0 || c.task_train.epochs == 0) throw std::invalid_argument("config: epochs must be >= 1");
    if (c.seg.batch_size == 0 || c.task_train.batch_size == 0) throw std::invalid_argument("config: batch_size must be >= 1");
    if (!(c.seg.lr > 0.0) || !(c.task_train.lr > 0.0)) throw std::invalid_argument("config: lr must be > 0");
    if (c.threads == 0) throw std::invalid_argument("config: threads must be >= 1");
}

std::string config_hash(const ExperimentConfig& cfg) {
    const std::string text = to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

fs::path resolve_cohort_dir(const ExperimentConfig& cfg) {
    if (!cfg.cohort.empty()) return cfg.cohort;
    if (const char* env = std::getenv("CONFSEG_DATA_DIR"); env != nullptr && *env != '\0') return env;
    throw std::invalid_argument("no cohort directory: set \"cohort\" in the config or CONFSEG_DATA_DIR");
}

FoldSplit resolve_folds(const ExperimentConfig& cfg, const CohortManifest& manifest) {
    if (!cfg.folds_file.empty()) return load_folds(cfg.folds_file);
    const std::size_t test = cfg.test_patients > 0 ? cfg.test_patients : std::max<std::size_t>(1, manifest.patients.size() / 5);
    return split_folds(manifest, cfg.fold_count, test, cfg.split_seed);
}

// ---------------------------------------------------------------------------
// Run records

void write_runs_csv(const fs::path& path, const std::vector<RunRecord>& records) {
    std::ostringstream out;
    out << "fold,seed,threshold,metric,value\n";
    for (const auto& r : records) {
        out << r.fold << ',' << r.seed << ',' << r.threshold << ',' << r.metric << ',' << format_metric(r.value) << '\n';
    }
    write_text_file(path, out.str());
}

std::vector<RunRecord> read_runs_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "fold,seed,threshold,metric,value") {
        throw std::runtime_error(path.string() + ": unexpected header");
    }
    std::vector<RunRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string col; std::getline(ss, col, ',');) cols.push_back(col);
        if (cols.size() != 5) throw std::runtime_error(path.string() + ": malformed row: " + line);
        RunRecord r;
        r.fold = std::stoul(cols[0]);
        r.seed = std::stoull(cols[1]);
        r.threshold = cols[2];
        r.metric = cols[3];
        if (cols[4] != "NA") r.value = std::stod(cols[4]);
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<std::string> report_metrics(Task task) {
    switch (task) {
        case Task::Seg: return {"iou", "weighted_ce", "soft_ce", "trimap_loss"};
        case Task::SfChange: return {"accuracy3", "accuracy2", "recall2", "precision2"};
        case Task::SfRegress: return {"rmse_avg", "rmse_median", "rmse_max"};
        case Task::Readmission: return {"accuracy", "recall", "precision"};
    }
    return {};
}

const std::vector<std::string>& declared_deviations() {
    static const std::vector<std::string> d = {
        "resolution 64x64 synthetic phantom cohort (not clinical video)",
        "tiny FPN segmenter (encoder widths 8/16/32, lateral width 16) instead of a pretrained backbone",
        "regression head hidden widths 32/16 instead of 256/64",
        "video encoder: 2 conv stages with residual temporal shift, feature width 32",
    };
    return d;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

struct Cell {
    std::optional<double> mean;
    double stdev = 0.0;
};

std::string fmt(double v, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    return buf;
}

}  // namespace

std::string render_svg_plot(const std::string& title, const std::string& y_label,
                            const std::vector<std::string>& x_labels, const std::vector<double>& means,
                            const std::vector<double>& stdevs) {
    const double W = 480, H = 320, left = 60, right = 20, top = 40, bottom = 50;
    double lo = 0.0, hi = 1.0;
    if (!means.empty()) {
        lo = hi = means.front();
        for (std::size_t i = 0; i < means.size(); ++i) {
            const double s = i < stdevs.size() ? stdevs[i] : 0.0;
            lo = std::min(lo, means[i] - s);
            hi = std::max(hi, means[i] + s);
        }
    }
    if (hi - lo < 1e-9) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    const std::size_t n = x_labels.size();
    auto px = [&](std::size_t i) { return left + (n <= 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(n - 1)) * (W - left - right); };
    auto py = [&](double v) { return top + (hi - v) / (hi - lo) * (H - top - bottom); };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        s << "<text x=\"" << left - 6 << "\" y=\"" << fmt(py(v) + 4, 1) << "\" text-anchor=\"end\">" << fmt(v, 3) << "</text>\n";
    }
    for (std::size_t i = 0; i < n; ++i) {
        s << "<text x=\"" << fmt(px(i), 1) << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"middle\">" << x_labels[i] << "</text>\n";
    }
    s << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">confidence threshold</text>\n";
    s << "<text x=\"16\" y=\"" << (top + H - bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (top + H - bottom) / 2 << ")\">" << y_label << "</text>\n";
    if (!means.empty()) {
        s << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < means.size(); ++i) s << (i ? " " : "") << fmt(px(i), 1) << ',' << fmt(py(means[i]), 1);
        s << "\"/>\n";
        for (std::size_t i = 0; i < means.size(); ++i) {
            const double sd = i < stdevs.size() ? stdevs[i] : 0.0;
            if (sd > 0.0) {
                s << "<line x1=\"" << fmt(px(i), 1) << "\" y1=\"" << fmt(py(means[i] - sd), 1) << "\" x2=\"" << fmt(px(i), 1)
                  << "\" y2=\"" << fmt(py(means[i] + sd), 1) << "\" stroke=\"#1f77b4\"/>\n";
            }
            s << "<circle cx=\"" << fmt(px(i), 1) << "\" cy=\"" << fmt(py(means[i]), 1) << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
        }
    }
    s << "</svg>\n";
    return s.str();
}

std::vector<fs::path> write_reports(const fs::path& dir, Task task, const std::vector<RunRecord>& records,
                                    const ReportInfo& info) {
    fs::create_directories(dir);
    const auto metrics = report_metrics(task);

    std::vector<std::string> thresholds;
    std::map<std::pair<std::string, std::string>, std::vector<double>> values;
    for (const auto& r : records) {
        if (std::find(thresholds.begin(), thresholds.end(), r.threshold) == thresholds.end()) thresholds.push_back(r.threshold);
        if (r.value) values[{r.threshold, r.metric}].push_back(*r.value);
    }
    auto cell = [&](const std::string& t, const std::string& m) {
        Cell c;
        const auto it = values.find({t, m});
        if (it != values.end() && !it->second.empty()) {
            const auto s = summarize(it->second);
            c.mean = s.mean;
            c.stdev = s.stdev;
        }
        return c;
    };

    const std::string stem = std::string(task_name(task)) + "_report";
    std::vector<fs::path> written;

    std::ostringstream csv;
    csv << "threshold";
    for (const auto& m : metrics) csv << ',' << m;
    csv << '\n';
    for (const auto& t : thresholds) {
        csv << t;
        for (const auto& m : metrics) csv << ',' << format_metric(cell(t, m).mean);
        csv << '\n';
    }
    write_text_file(dir / (stem + ".csv"), csv.str());
    written.push_back(dir / (stem + ".csv"));

    std::ostringstream txt;
    txt << "# task: " << task_name(task) << '\n';
    txt << "# config hash: " << info.config_hash << '\n';
    txt << "# seeds:";
    for (auto s : info.seeds) txt << ' ' << s;
    txt << '\n';
    for (const auto& d : declared_deviations()) txt << "# deviation: " << d << '\n';
    txt << "# values: mean +/- 1-sigma over folds and seeds\n\n";
    std::vector<std::string> header = {"threshold"};
    header.insert(header.end(), metrics.begin(), metrics.end());
    std::vector<std::vector<std::string>> rows;
    for (const auto& t : thresholds) {
        std::vector<std::string> row = {t};
        for (const auto& m : metrics) {
            const auto c = cell(t, m);
            row.push_back(c.mean ? fmt(*c.mean, 4) + " +/- " + fmt(c.stdev, 4) : "NA");
        }
        rows.push_back(std::move(row));
    }
    txt << render_text_table(header, rows);
    write_text_file(dir / (stem + ".txt"), txt.str());
    written.push_back(dir / (stem + ".txt"));

    for (const auto& m : metrics) {
        std::vector<std::string> xs;
        std::vector<double> means;
        std::vector<double> sds;
        for (const auto& t : thresholds) {
            const auto c = cell(t, m);
            if (!c.mean) continue;
            xs.push_back(t);
            means.push_back(*c.mean);
            sds.push_back(c.stdev);
        }
        const auto path = dir / (std::string(task_name(task)) + "_" + m + ".svg");
        write_text_file(path, render_svg_plot(std::string(task_name(task)) + ": " + m, m, xs, means, sds));
        written.push_back(path);
    }
    return written;
}

// ---------------------------------------------------------------------------
// Threshold tool

std::vector<fs::path> write_threshold_masks(const ConfidenceMap& cmap, ConfidenceThreshold t, const fs::path& out_dir,
                                            const std::string& stem) {
    fs::create_directories(out_dir);
    const auto mask = threshold_map(cmap, t);
    std::vector<fs::path> out;
    for (std::size_t c = 0; c < kChannels; ++c) {
        GrayImage img(cmap.width(), cmap.height());
        const auto plane = mask.plane(c);
        for (std::size_t i = 0; i < plane.size(); ++i) img.pixels[i] = plane[i] ? 255 : 0;
        const auto path = out_dir / (stem + "_t" + std::to_string(t.level()) + "_" + std::string(kChannelNames[c]) + ".pgm");
        save_pgm(path, img);
        out.push_back(path);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sweep

fs::path seg_checkpoint_path(const fs::path& dir, int threshold, std::size_t fold, std::uint64_t seed) {
    return dir / ("seg_t" + std::to_string(threshold) + "_f" + std::to_string(fold) + "_s" + std::to_string(seed) + ".ckpt");
}

namespace {

struct Job {
    std::optional<int> threshold;  // empty: downstream without a segmentation model
    std::size_t fold = 0;
    std::uint64_t seed = 0;

    std::string threshold_label(SegSourceKind kind) const {
        return threshold ? std::to_string(*threshold) : std::string(seg_source_name(kind));
    }
    std::string name(Task task, SegSourceKind kind) const {
        return std::string(task_name(task)) + "_t" + threshold_label(kind) + "_f" + std::to_string(fold) + "_s" +
               std::to_string(seed);
    }
};

struct JobContext {
    const ExperimentConfig& cfg;
    const CohortData& data;
    const FoldSplit& split;
    fs::path checkpoints;
};

std::vector<RunRecord> run_seg_job(const JobContext& ctx, const Job& job, std::ostream& log) {
    const auto t = ConfidenceThreshold(*job.threshold);
    SegTrainConfig c = ctx.cfg.seg;
    c.threshold = t;
    c.seed = derive_seed(job.seed, job.fold);
    const auto train = ctx.data.seg_samples(ctx.split.train_patients(job.fold));
    const auto val = ctx.data.seg_samples(ctx.split.val_patients(job.fold));
    const auto test = ctx.data.seg_samples(ctx.split.held_out_test);
    const auto result = train_seg(c, train, val, [&](const SegEpochLog& e) {
        log << "epoch " << e.epoch << " loss " << fmt(e.train_loss, 6) << " val_iou " << fmt(e.val_iou, 6) << " lr "
            << e.lr << '\n';
    });
    log << "best epoch " << result.best_epoch << '\n';
    nn::save_checkpoint(seg_checkpoint_path(ctx.checkpoints, t.level(), job.fold, job.seed), result.checkpoint);

    const auto row = evaluate_seg(SegNet<float>::from_checkpoint(result.checkpoint), test, t);
    const std::string tl = std::to_string(t.level());
    std::vector<RunRecord> out = {
        {job.fold, job.seed, tl, "iou", row.iou},
        {job.fold, job.seed, tl, "weighted_ce", row.weighted_ce},
        {job.fold, job.seed, tl, "soft_ce", row.soft_ce},
        {job.fold, job.seed, tl, "trimap_loss", row.trimap_loss},
    };
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
        out.push_back({job.fold, job.seed, tl, "iou_" + std::string(kChannelNames[ch]), row.channel_iou[ch]});
    }
    out.push_back({job.fold, job.seed, tl, "best_epoch", static_cast<double>(result.best_epoch)});
    return out;
}

std::vector<RunRecord> run_task_job(const JobContext& ctx, const Job& job, std::ostream& log) {
    std::optional<SegNet<float>> model;
    if (job.threshold) {
        const auto path = seg_checkpoint_path(ctx.checkpoints, *job.threshold, job.fold, job.seed);
        if (!fs::exists(path)) throw std::runtime_error("missing segmentation checkpoint " + path.string());
        model = SegNet<float>::from_checkpoint(nn::load_checkpoint(path));
    }
    const FusedStore store(ctx.data, ctx.cfg.seg_source, model ? &*model : nullptr);
    TaskTrainConfig c = ctx.cfg.task_train;
    c.seed = derive_seed(job.seed, job.fold);
    const auto train = ctx.split.train_patients(job.fold);
    const auto& val = ctx.split.val_patients(job.fold);
    const auto& test = ctx.split.held_out_test;
    const std::string tl = job.threshold_label(ctx.cfg.seg_source);
    auto epoch_log = [&](const TaskEpochLog& e) {
        log << "epoch " << e.epoch << " loss " << fmt(e.train_loss, 6) << " val " << fmt(e.val_score, 6) << '\n';
    };

    std::vector<RunRecord> out;
    auto add = [&](const std::string& metric, std::optional<double> v) { out.push_back({job.fold, job.seed, tl, metric, v}); };
    auto keep = [&](const nn::Checkpoint& ckpt) {
        nn::save_checkpoint(ctx.checkpoints / (job.name(ctx.cfg.task, ctx.cfg.seg_source) + ".ckpt"), ckpt);
    };
    switch (ctx.cfg.task) {
        case Task::SfChange: {
            const auto r = train_sf_change(c, store, train, val, epoch_log);
            keep(r.checkpoint);
            const auto pairs = build_pairs(ctx.data.manifest, test, PairRole::Test, c.seed, c.test_pair_cap);
            const auto m = eval_sf_change(r.checkpoint, store, pairs);
            add("accuracy3", m.accuracy3);
            add("accuracy2", m.accuracy2);
            add("recall2", m.recall2);
            add("precision2", m.precision2);
            add("best_epoch", static_cast<double>(r.best_epoch));
            break;
        }
        case Task::SfRegress: {
            const auto r = train_sf_regress(c, store, train, val, epoch_log);
            keep(r.checkpoint);
            for (auto mode : {AggregateMode::Avg, AggregateMode::Median, AggregateMode::Max}) {
                add("rmse_" + std::string(aggregate_name(mode)), eval_sf_regress(r.checkpoint, store, test, mode).rmse);
            }
            add("best_epoch", static_cast<double>(r.best_epoch));
            break;
        }
        case Task::Readmission: {
            std::optional<nn::Checkpoint> warm;
            if (ctx.cfg.warm_start) {
                log << "warm start: training S/F change encoder\n";
                warm = train_sf_change(c, store, train, val, epoch_log).checkpoint;
            }
            const auto r = train_readmission(c, store, train, val, warm ? &*warm : nullptr, epoch_log);
            keep(r.checkpoint);
            const auto m = eval_readmission(r.checkpoint, store, test);
            add("accuracy", m.accuracy);
            add("recall", m.recall);
            add("precision", m.precision);
            add("best_epoch", static_cast<double>(r.best_epoch));
            break;
        }
        case Task::Seg: break;
    }
    return out;
}

}  // namespace

int run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
    validate(cfg);
    const fs::path out_dir = cfg.out;
    const fs::path logs = out_dir / "logs";
    fs::create_directories(logs);
    const fs::path checkpoints = cfg.seg_checkpoints.empty() ? out_dir / "checkpoints" : fs::path(cfg.seg_checkpoints);
    fs::create_directories(checkpoints);

    const auto cohort_dir = resolve_cohort_dir(cfg);
    log << "loading cohort " << cohort_dir.string() << '\n';
    const CohortData data = load_cohort(cohort_dir);
    const FoldSplit split = resolve_folds(cfg, data.manifest);
    save_folds(out_dir / "folds.json", split);

    const std::string hash = config_hash(cfg);
    json info = {{"config", to_json(cfg)}, {"config_hash", hash}, {"deviations", declared_deviations()}};
    write_text_file(out_dir / "run_info.json", info.dump(2) + "\n");

    std::vector<Job> jobs;
    const bool uses_thresholds = cfg.task == Task::Seg || cfg.seg_source == SegSourceKind::Model;
    const std::vector<std::optional<int>> levels = [&] {
        std::vector<std::optional<int>> v;
        if (uses_thresholds) {
            for (int t : cfg.thresholds) v.emplace_back(t);
        } else {
            v.emplace_back(std::nullopt);
        }
        return v;
    }();
    for (const auto& t : levels) {
        for (auto f : cfg.folds) {
            for (auto s : cfg.seeds) jobs.push_back({t, f, s});
        }
    }

    const JobContext ctx{cfg, data, split, checkpoints};
    std::vector<std::vector<RunRecord>> results(jobs.size());
    std::vector<std::string> failures(jobs.size());
    std::mutex log_mutex;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            const auto name = jobs[i].name(cfg.task, cfg.seg_source);
            {
                std::lock_guard lock(log_mutex);
                log << "start " << name << '\n';
            }
            std::ostringstream job_log;
            try {
                results[i] = cfg.task == Task::Seg ? run_seg_job(ctx, jobs[i], job_log) : run_task_job(ctx, jobs[i], job_log);
            } catch (const std::exception& e) {
                failures[i] = e.what();
                job_log << "FAILED: " << e.what() << '\n';
            }
            write_text_file(logs / (name + ".log"), job_log.str());
            std::lock_guard lock(log_mutex);
            log << (failures[i].empty() ? "done  " : "FAIL  ") << name << (failures[i].empty() ? "" : ": " + failures[i]) << '\n';
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < std::min<std::size_t>(cfg.threads, jobs.size()); ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::vector<RunRecord> records;
    for (const auto& r : results) records.insert(records.end(), r.begin(), r.end());
    const auto runs_path = out_dir / (std::string(task_name(cfg.task)) + "_runs.csv");
    write_runs_csv(runs_path, records);
    write_reports(out_dir, cfg.task, records, {hash, cfg.seeds});

    int failed = static_cast<int>(std::count_if(failures.begin(), failures.end(), [](const auto& f) { return !f.empty(); }));
    // Re-read what was written; a report that does not round-trip is a failure.
    if (read_runs_csv(runs_path).size() != records.size()) {
        log << "runs CSV failed validation\n";
        ++failed;
    }
    log << jobs.size() - static_cast<std::size_t>(std::count_if(failures.begin(), failures.end(), [](const auto& f) { return !f.empty(); }))
        << "/" << jobs.size() << " runs completed\n";
    return failed == 0 ? 0 : 1;
}

}  // namespace confseg
