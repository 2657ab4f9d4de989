#include "confseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace confseg {

namespace {

double clamp_prob(double p) {
    return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon);
}

double bce(double p, double target) {
    const double q = clamp_prob(p);
    return -(target * std::log(q) + (1.0 - target) * std::log(1.0 - q));
}

void require_dims(std::size_t w1, std::size_t h1, std::size_t n1, std::size_t w2, std::size_t h2, std::size_t n2) {
    if (w1 != w2 || h1 != h2 || n1 != n2) throw std::invalid_argument("dimension mismatch");
}

}  // namespace

IouResult iou(const BinaryMaskStack& pred, const BinaryMaskStack& gt) {
    require_dims(pred.width, pred.height, pred.bits.size(), gt.width, gt.height, gt.bits.size());
    IouResult out;
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < kChannels; ++c) {
        const auto p = pred.plane(c);
        const auto g = gt.plane(c);
        std::size_t inter = 0;
        std::size_t uni = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            inter += static_cast<std::size_t>(p[i] & g[i]);
            uni += static_cast<std::size_t>(p[i] | g[i]);
        }
        if (uni > 0) {
            const double v = static_cast<double>(inter) / static_cast<double>(uni);
            out.per_channel[c] = v;
            sum += v;
            ++defined;
        }
    }
    out.macro = defined > 0 ? sum / static_cast<double>(defined) : 1.0;
    return out;
}

double weighted_ce(const ProbMap& pred, const BinaryMaskStack& gt, const WeightMap& w) {
    require_dims(pred.width, pred.height, pred.values.size(), gt.width, gt.height, gt.bits.size());
    require_dims(pred.width, pred.height, pred.values.size(), w.width, w.height, w.weights.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        sum += w.weights[i] * bce(pred.values[i], gt.bits[i]);
    }
    return sum / static_cast<double>(pred.values.size());
}

double soft_ce(const ProbMap& pred, const ConfidenceMap& cmap) {
    const auto conf = cmap.values();
    require_dims(pred.width, pred.height, pred.values.size(), cmap.width(), cmap.height(), conf.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < conf.size(); ++i) sum += bce(pred.values[i], conf[i] / 100.0);
    return sum / static_cast<double>(conf.size());
}

std::optional<double> trimap_loss(const ProbMap& pred, const ConfidenceMap& cmap) {
    require_dims(pred.width, pred.height, pred.values.size(), cmap.width(), cmap.height(), cmap.values().size());
    const auto tri = trimap_select(cmap);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < tri.certain.size(); ++i) {
        if (tri.certain[i] == 0) continue;
        sum += bce(pred.values[i], tri.targets[i]);
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

BinaryMaskStack binarize(const ProbMap& pred, double cut) {
    BinaryMaskStack out(pred.width, pred.height);
    for (std::size_t i = 0; i < pred.values.size(); ++i) out.bits[i] = static_cast<std::uint8_t>(pred.values[i] >= cut);
    return out;
}

double rmse(std::span<const double> preds, std::span<const double> targets) {
    if (preds.empty() || targets.empty()) throw std::invalid_argument("rmse of empty lists");
    if (preds.size() != targets.size()) throw std::invalid_argument("rmse length mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double d = preds[i] - targets[i];
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(preds.size()));
}

ClassificationScores classification_scores(std::span<const int> preds, std::span<const int> targets,
                                           int positive_class) {
    if (preds.empty() || targets.empty()) throw std::invalid_argument("classification scores of empty lists");
    if (preds.size() != targets.size()) throw std::invalid_argument("classification length mismatch");
    std::size_t correct = 0;
    std::size_t tp = 0;
    std::size_t pred_pos = 0;
    std::size_t actual_pos = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        correct += static_cast<std::size_t>(preds[i] == targets[i]);
        const bool p = preds[i] == positive_class;
        const bool t = targets[i] == positive_class;
        tp += static_cast<std::size_t>(p && t);
        pred_pos += static_cast<std::size_t>(p);
        actual_pos += static_cast<std::size_t>(t);
    }
    ClassificationScores s;
    s.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
    if (actual_pos > 0) s.recall = static_cast<double>(tp) / static_cast<double>(actual_pos);
    if (pred_pos > 0) s.precision = static_cast<double>(tp) / static_cast<double>(pred_pos);
    return s;
}

SummaryStat summarize(std::span<const double> values) {
    SummaryStat s;
    s.count = values.size();
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.stdev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

void SegMetricAccumulator::add(const ProbMap& pred, const ConfidenceMap& cmap) {
    const auto gt = threshold_map(cmap, threshold_);
    const auto weights = compute_weights(cmap, threshold_, gt);
    const auto result = iou(binarize(pred), gt);
    iou_sum_ += result.macro;
    for (std::size_t c = 0; c < kChannels; ++c) {
        if (result.per_channel[c]) {
            channel_sum_[c] += *result.per_channel[c];
            ++channel_count_[c];
        }
    }
    wce_sum_ += weighted_ce(pred, gt, weights);
    sce_sum_ += soft_ce(pred, cmap);
    if (const auto tl = trimap_loss(pred, cmap)) {
        trimap_sum_ += *tl;
        ++trimap_count_;
    }
    ++count_;
}

SegMetricRow SegMetricAccumulator::row() const {
    if (count_ == 0) throw std::logic_error("no images evaluated");
    const auto n = static_cast<double>(count_);
    SegMetricRow r;
    r.threshold = threshold_;
    r.iou = iou_sum_ / n;
    r.weighted_ce = wce_sum_ / n;
    r.soft_ce = sce_sum_ / n;
    if (trimap_count_ > 0) r.trimap_loss = trimap_sum_ / static_cast<double>(trimap_count_);
    for (std::size_t c = 0; c < kChannels; ++c) {
        if (channel_count_[c] > 0) r.channel_iou[c] = channel_sum_[c] / static_cast<double>(channel_count_[c]);
    }
    return r;
}

std::string format_metric(std::optional<double> v, int precision) {
    if (!v) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, *v);
    return buf;
}

std::string render_text_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> widths(header.size());
    for (std::size_t i = 0; i < header.size(); ++i) widths[i] = header[i].size();
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size() && i < widths.size(); ++i) widths[i] = std::max(widths[i], r[i].size());
    }
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < widths.size(); ++i) {
            const std::string cell = i < cells.size() ? cells[i] : "";
            if (i > 0) out << "  ";
            out << std::string(widths[i] - cell.size(), ' ') << cell;
        }
        out << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (auto w : widths) total += w;
    out << std::string(total + 2 * (widths.size() - 1), '-') << '\n';
    for (const auto& r : rows) line(r);
    return out.str();
}

}  // namespace confseg
