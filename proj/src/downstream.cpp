#include "confseg/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "confseg/metrics.hpp"
#include "confseg/random.hpp"

namespace confseg {

using nn::Tensor;

ChangeClass label_pair(double sf_a, double sf_b) noexcept {
    if (std::abs(sf_a - sf_b) <= kSameTolerance) return ChangeClass::Same;
    return sf_a > sf_b ? ChangeClass::Decrease : ChangeClass::Increase;
}

BinaryChange collapse_2class(ChangeClass c) noexcept {
    return c == ChangeClass::Increase ? BinaryChange::Increase : BinaryChange::NotIncrease;
}

std::string_view change_name(ChangeClass c) noexcept {
    switch (c) {
        case ChangeClass::Decrease: return "Decrease";
        case ChangeClass::Same: return "Same";
        case ChangeClass::Increase: return "Increase";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Pairs

namespace {

std::vector<std::size_t> resolve_patients(const CohortManifest& m, std::span<const std::string> ids) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < m.patients.size(); ++i) index.emplace(m.patients[i].patient_id, i);
    std::set<std::size_t> out;
    for (const auto& id : ids) {
        const auto it = index.find(id);
        if (it == index.end()) throw std::invalid_argument("unknown patient id: " + id);
        out.insert(it->second);
    }
    return {out.begin(), out.end()};
}

int zone_at(const CohortManifest& m, const VideoKey& k) {
    return m.patients[k.patient].days[k.day].videos[k.view].zone;
}

double sf_at(const CohortManifest& m, const VideoKey& k) {
    return m.patients[k.patient].days[k.day].sf_ratio_normalized;
}

}  // namespace

std::vector<PairExample> build_pairs(const CohortManifest& manifest, std::span<const std::string> patients,
                                     PairRole role, std::uint64_t seed, std::size_t cap) {
    const auto members = resolve_patients(manifest, patients);
    Rng rng(derive_seed(seed, 0x9a1 + static_cast<std::uint64_t>(role)));

    // Videos grouped by zone (train) or by (patient, zone) (val/test), each
    // group in (patient, day, view) order.
    std::map<std::pair<std::size_t, int>, std::vector<VideoKey>> groups;
    for (std::size_t p : members) {
        const auto& days = manifest.patients[p].days;
        for (std::size_t d = 0; d < days.size(); ++d) {
            for (std::size_t v = 0; v < days[d].videos.size(); ++v) {
                const VideoKey k{p, d, v};
                const std::size_t owner = role == PairRole::Train ? 0 : p;
                groups[{owner, zone_at(manifest, k)}].push_back(k);
            }
        }
    }

    std::vector<PairExample> pairs;
    for (const auto& [group, keys] : groups) {
        for (std::size_t i = 0; i < keys.size(); ++i) {
            for (std::size_t j = i + 1; j < keys.size(); ++j) {
                VideoKey a = keys[i];
                VideoKey b = keys[j];
                if (role == PairRole::Train && bernoulli(rng, 0.5)) std::swap(a, b);
                pairs.push_back({a, b, label_pair(sf_at(manifest, a), sf_at(manifest, b))});
            }
        }
    }
    if (pairs.empty()) throw std::invalid_argument("build_pairs: no eligible pairs");
    if (cap > 0 && pairs.size() > cap) {
        shuffle(pairs, rng);
        pairs.resize(cap);
        if (role != PairRole::Train) {
            std::sort(pairs.begin(), pairs.end(),
                      [](const PairExample& x, const PairExample& y) { return std::tie(x.a, x.b) < std::tie(y.a, y.b); });
        }
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Aggregation and votes

std::string_view aggregate_name(AggregateMode m) noexcept {
    switch (m) {
        case AggregateMode::Avg: return "avg";
        case AggregateMode::Median: return "median";
        case AggregateMode::Max: return "max";
    }
    return "?";
}

AggregateMode parse_aggregate(std::string_view name) {
    if (name == "avg") return AggregateMode::Avg;
    if (name == "median") return AggregateMode::Median;
    if (name == "max") return AggregateMode::Max;
    throw std::invalid_argument("unknown aggregate mode: " + std::string(name));
}

double aggregate_views(std::span<const double> preds, AggregateMode mode) {
    if (preds.empty()) throw std::invalid_argument("aggregate_views: no predictions");
    switch (mode) {
        case AggregateMode::Avg:
            return std::accumulate(preds.begin(), preds.end(), 0.0) / static_cast<double>(preds.size());
        case AggregateMode::Max:
            return *std::max_element(preds.begin(), preds.end());
        case AggregateMode::Median: {
            std::vector<double> v(preds.begin(), preds.end());
            std::sort(v.begin(), v.end());
            const std::size_t n = v.size();
            return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
        }
    }
    throw std::invalid_argument("aggregate_views: bad mode");
}

int majority_vote(std::span<const std::array<double, 2>> logits) {
    if (logits.empty()) throw std::invalid_argument("majority_vote: no views");
    int ones = 0;
    double sum0 = 0.0;
    double sum1 = 0.0;
    for (const auto& l : logits) {
        if (l[1] > l[0]) ++ones;
        sum0 += l[0];
        sum1 += l[1];
    }
    const int zeros = static_cast<int>(logits.size()) - ones;
    if (ones != zeros) return ones > zeros ? 1 : 0;
    return sum1 > sum0 ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Cohort data

std::size_t CohortData::patient_index(const std::string& id) const {
    for (std::size_t i = 0; i < manifest.patients.size(); ++i) {
        if (manifest.patients[i].patient_id == id) return i;
    }
    throw std::invalid_argument("unknown patient id: " + id);
}

std::vector<SegSample> CohortData::seg_samples(std::span<const std::string> patients) const {
    std::vector<SegSample> out;
    for (std::size_t p : resolve_patients(manifest, patients)) {
        for (const auto& day : videos[p]) {
            for (const auto& clip : day) out.push_back({clip.frames.front(), clip.label});
        }
    }
    return out;
}

CohortData load_cohort(const std::filesystem::path& dir) {
    CohortData data;
    data.manifest = load_manifest(dir / "cohort.json");
    for (const auto& p : data.manifest.patients) {
        auto& pv = data.videos.emplace_back();
        for (const auto& d : p.days) {
            auto& dv = pv.emplace_back();
            for (const auto& rec : d.videos) {
                VideoClip clip{{}, load_cmap(dir / rec.label_ref)};
                for (const auto& ref : rec.image_refs) {
                    clip.frames.push_back(load_pgm(dir / ref));
                    const auto& f = clip.frames.back();
                    if (f.width != data.manifest.width || f.height != data.manifest.height) {
                        throw FormatError(FormatErrorCode::DimensionMismatch, "frame dimensions differ from manifest: " + ref);
                    }
                }
                if (clip.label.width() != data.manifest.width || clip.label.height() != data.manifest.height) {
                    throw FormatError(FormatErrorCode::DimensionMismatch,
                                      "label dimensions differ from manifest: " + rec.label_ref);
                }
                dv.push_back(std::move(clip));
            }
        }
    }
    return data;
}

CohortData render_cohort(std::uint64_t seed, std::size_t n_patients, const PhantomSpec& spec,
                         const PlantedLinkParams& link) {
    CohortData data;
    data.manifest = plan_cohort(seed, n_patients, spec, link);
    for (std::size_t i = 0; i < data.manifest.patients.size(); ++i) {
        auto& pv = data.videos.emplace_back();
        const auto& days = data.manifest.patients[i].days;
        for (std::size_t d = 0; d < days.size(); ++d) {
            auto& dv = pv.emplace_back();
            for (std::size_t v = 0; v < days[d].videos.size(); ++v) {
                auto video = gen_video(video_seed(seed, i, d, v), spec, days[d].videos[v].b_lines);
                dv.push_back({std::move(video.frames), std::move(video.label)});
            }
        }
    }
    return data;
}

std::string_view seg_source_name(SegSourceKind k) noexcept {
    switch (k) {
        case SegSourceKind::Model: return "model";
        case SegSourceKind::Oracle: return "oracle";
        case SegSourceKind::None: return "none";
    }
    return "?";
}

SegSourceKind parse_seg_source(std::string_view name) {
    if (name == "model") return SegSourceKind::Model;
    if (name == "oracle") return SegSourceKind::Oracle;
    if (name == "none") return SegSourceKind::None;
    throw std::invalid_argument("unknown segmentation source: " + std::string(name));
}

FusedStore::FusedStore(const CohortData& data, SegSourceKind kind, const SegNet<float>* model)
    : data_(&data), kind_(kind) {
    if (kind == SegSourceKind::Model && model == nullptr) {
        throw std::invalid_argument("FusedStore: model segmentation source needs a model");
    }
    if (kind == SegSourceKind::None) return;
    seg_.resize(data.videos.size());
    for (std::size_t p = 0; p < data.videos.size(); ++p) {
        seg_[p].resize(data.videos[p].size());
        for (std::size_t d = 0; d < data.videos[p].size(); ++d) {
            for (const auto& clip : data.videos[p][d]) {
                const std::size_t plane = kChannels * clip.label.plane_size();
                std::vector<std::uint8_t> q;
                q.reserve(clip.frames.size() * plane);
                if (kind == SegSourceKind::Oracle) {
                    std::vector<std::uint8_t> frame(plane);
                    std::transform(clip.label.values().begin(), clip.label.values().end(), frame.begin(),
                                   [](std::uint8_t c) { return static_cast<std::uint8_t>(std::lround(c * 2.55)); });
                    for (std::size_t t = 0; t < clip.frames.size(); ++t) q.insert(q.end(), frame.begin(), frame.end());
                } else {
                    for (const auto& probs : predict(*model, clip.frames)) {
                        for (double v : probs.values) q.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
                    }
                }
                seg_[p][d].push_back(std::move(q));
            }
        }
    }
}

template <typename Real>
Tensor<Real> FusedStore::fused(const VideoKey& k) const {
    const auto& clip = data_->video(k);
    const std::size_t T = clip.frames.size();
    const std::size_t W = clip.frames.front().width;
    const std::size_t H = clip.frames.front().height;
    const std::size_t area = W * H;
    std::vector<Real> v(T * kFusedChannels * area, Real(0));
    const std::vector<std::uint8_t>* seg = kind_ == SegSourceKind::None ? nullptr : &seg_[k.patient][k.day][k.view];
    for (std::size_t t = 0; t < T; ++t) {
        Real* dst = v.data() + t * kFusedChannels * area;
        for (std::size_t i = 0; i < area; ++i) dst[i] = static_cast<Real>(clip.frames[t].pixels[i]) / Real(255);
        if (seg != nullptr) {
            const std::uint8_t* src = seg->data() + t * kChannels * area;
            for (std::size_t i = 0; i < kChannels * area; ++i) dst[area + i] = static_cast<Real>(src[i]) / Real(255);
        }
    }
    return Tensor<Real>::from({T, kFusedChannels, H, W}, std::move(v));
}

template Tensor<float> FusedStore::fused<float>(const VideoKey&) const;
template Tensor<double> FusedStore::fused<double>(const VideoKey&) const;

// ---------------------------------------------------------------------------
// Models

namespace {

template <typename Real>
Tensor<Real> he_normal(nn::Shape shape, std::size_t fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<Real> v(nn::numel(shape));
    for (auto& x : v) x = static_cast<Real>(normal(rng, 0.0, std));
    return Tensor<Real>::from(std::move(shape), std::move(v), true);
}

}  // namespace

template <typename Real>
VideoEncoder<Real>::VideoEncoder(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xe4c));
    s1w_ = he_normal<Real>({8, kFusedChannels, 3, 3}, kFusedChannels * 9, rng);
    s1b_ = Tensor<Real>::zeros({8}, true);
    b1w_ = he_normal<Real>({8, 8, 1, 1}, 8, rng);
    b1b_ = Tensor<Real>::zeros({8}, true);
    s2w_ = he_normal<Real>({kFeatureWidth, 8, 3, 3}, 8 * 9, rng);
    s2b_ = Tensor<Real>::zeros({kFeatureWidth}, true);
    b2w_ = he_normal<Real>({kFeatureWidth, kFeatureWidth, 1, 1}, kFeatureWidth, rng);
    b2b_ = Tensor<Real>::zeros({kFeatureWidth}, true);
}

template <typename Real>
Tensor<Real> VideoEncoder<Real>::forward(const Tensor<Real>& video) const {
    if (video.rank() != 4 || video.dim(1) != kFusedChannels || video.dim(0) == 0) {
        throw nn::ShapeError("VideoEncoder expects T x 7 x H x W, got " + nn::shape_string(video.shape()));
    }
    auto h = nn::relu(nn::conv2d(video, s1w_, s1b_, 2));
    h = nn::add(h, nn::relu(nn::conv2d(nn::temporal_shift(h), b1w_, b1b_, 1, 0)));
    h = nn::relu(nn::conv2d(h, s2w_, s2b_, 2));
    h = nn::add(h, nn::relu(nn::conv2d(nn::temporal_shift(h), b2w_, b2b_, 1, 0)));
    return nn::mean_rows(nn::global_avg_pool(h));
}

template <typename Real>
nn::ParamList<Real> VideoEncoder<Real>::parameters(const std::string& prefix) const {
    return {{prefix + "stage1.w", s1w_}, {prefix + "stage1.b", s1b_}, {prefix + "shift1.w", b1w_},
            {prefix + "shift1.b", b1b_}, {prefix + "stage2.w", s2w_}, {prefix + "stage2.b", s2b_},
            {prefix + "shift2.w", b2w_}, {prefix + "shift2.b", b2b_}};
}

template <typename Real>
Mlp<Real>::Mlp(std::vector<std::size_t> widths, std::uint64_t seed) {
    if (widths.size() < 2) throw std::invalid_argument("Mlp needs at least input and output widths");
    Rng rng(derive_seed(seed, 0x31f));
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        weights_.push_back(he_normal<Real>({widths[i + 1], widths[i]}, widths[i], rng));
        biases_.push_back(Tensor<Real>::zeros({widths[i + 1]}, true));
    }
}

template <typename Real>
Tensor<Real> Mlp<Real>::forward(const Tensor<Real>& x) const {
    Tensor<Real> h = x;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        h = nn::linear(h, weights_[i], biases_[i]);
        if (i + 1 < weights_.size()) h = nn::relu(h);
    }
    return h;
}

template <typename Real>
nn::ParamList<Real> Mlp<Real>::parameters(const std::string& prefix) const {
    nn::ParamList<Real> out;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        out.push_back({prefix + "fc" + std::to_string(i) + ".w", weights_[i]});
        out.push_back({prefix + "fc" + std::to_string(i) + ".b", biases_[i]});
    }
    return out;
}

template <typename Real>
void Mlp<Real>::zero_weights() {
    for (auto w : weights_) std::fill(w.data().begin(), w.data().end(), Real(0));
}

template <typename Real>
void Mlp<Real>::set_output_bias(std::span<const Real> bias) {
    auto b = biases_.back();
    if (bias.size() != b.numel()) throw nn::ShapeError("set_output_bias: size mismatch");
    std::copy(bias.begin(), bias.end(), b.data().begin());
}

template <typename Real>
Tensor<Real> sf_change_forward(const VideoEncoder<Real>& encoder, const Mlp<Real>& head, const Tensor<Real>& video_a,
                               const Tensor<Real>& video_b) {
    if (video_a.shape() != video_b.shape()) {
        throw nn::ShapeError("sf_change_forward: video shapes differ: " + nn::shape_string(video_a.shape()) + " vs " +
                             nn::shape_string(video_b.shape()));
    }
    return head.forward(nn::sub(encoder.forward(video_b), encoder.forward(video_a)));
}

template <typename Real>
Tensor<Real> sf_regress_forward(const VideoEncoder<Real>& encoder, const Mlp<Real>& head, const Tensor<Real>& video) {
    return head.forward(encoder.forward(video));
}

template class VideoEncoder<float>;
template class VideoEncoder<double>;
template class Mlp<float>;
template class Mlp<double>;
template Tensor<float> sf_change_forward(const VideoEncoder<float>&, const Mlp<float>&, const Tensor<float>&,
                                         const Tensor<float>&);
template Tensor<double> sf_change_forward(const VideoEncoder<double>&, const Mlp<double>&, const Tensor<double>&,
                                          const Tensor<double>&);
template Tensor<float> sf_regress_forward(const VideoEncoder<float>&, const Mlp<float>&, const Tensor<float>&);
template Tensor<double> sf_regress_forward(const VideoEncoder<double>&, const Mlp<double>&, const Tensor<double>&);

// ---------------------------------------------------------------------------
// Training helpers

namespace {

nn::ParamList<float> join(nn::ParamList<float> a, const nn::ParamList<float>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

struct Trainer {
    const TaskTrainConfig& cfg;
    nn::Adam<float> opt;
    nn::LrSchedule schedule;

    Trainer(const TaskTrainConfig& c, const nn::ParamList<float>& params) : cfg(c), opt(params, adam_config(c)) {
        if (c.epochs == 0) throw std::invalid_argument("task training: epochs must be >= 1");
        if (c.batch_size == 0) throw std::invalid_argument("task training: batch size must be >= 1");
        schedule.lr_max = c.lr;
        schedule.lr_min = 0.0;
        schedule.period = c.epochs;
    }

    static nn::AdamConfig adam_config(const TaskTrainConfig& c) {
        nn::AdamConfig a;
        a.lr = c.lr;
        return a;
    }

    /// Runs one optimisation step on `loss`, returning its value.
    double step(Tensor<float> loss, std::size_t epoch) {
        const double v = loss.item();
        if (!std::isfinite(v)) throw TrainingError("task training: non-finite loss at epoch " + std::to_string(epoch));
        loss.backward();
        opt.step();
        return v;
    }
};

/// Keeps the checkpoint of the best epoch; `higher_is_better` picks the
/// direction and ties keep the earlier epoch.
struct Selector {
    bool higher_is_better;
    double best = 0.0;
    bool any = false;

    bool offer(double score) {
        const bool better = !any || (higher_is_better ? score > best : score < best);
        if (better) {
            best = score;
            any = true;
        }
        return better;
    }
};

std::map<VideoKey, Tensor<float>> encode_keys(const VideoEncoder<float>& encoder, const FusedStore& store,
                                              const std::vector<VideoKey>& keys) {
    nn::NoGradGuard guard;
    std::map<VideoKey, Tensor<float>> out;
    for (const auto& k : keys) {
        if (!out.contains(k)) out.emplace(k, encoder.forward(store.fused<float>(k)));
    }
    return out;
}

std::vector<int> change_predictions(const VideoEncoder<float>& encoder, const Mlp<float>& head,
                                    const FusedStore& store, std::span<const PairExample> pairs) {
    std::vector<VideoKey> keys;
    for (const auto& p : pairs) {
        keys.push_back(p.a);
        keys.push_back(p.b);
    }
    const auto feats = encode_keys(encoder, store, keys);
    nn::NoGradGuard guard;
    std::vector<int> preds;
    for (const auto& p : pairs) {
        const auto logits = head.forward(nn::sub(feats.at(p.b), feats.at(p.a)));
        const auto d = logits.data();
        preds.push_back(static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin()));
    }
    return preds;
}

double accuracy(std::span<const int> preds, std::span<const int> targets) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == targets[i];
    return preds.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(preds.size());
}

std::vector<int> change_targets(std::span<const PairExample> pairs) {
    std::vector<int> t;
    for (const auto& p : pairs) t.push_back(static_cast<int>(p.label));
    return t;
}

std::vector<VideoKey> patient_videos(const CohortManifest& m, std::size_t p) {
    std::vector<VideoKey> keys;
    for (std::size_t d = 0; d < m.patients[p].days.size(); ++d) {
        for (std::size_t v = 0; v < m.patients[p].days[d].videos.size(); ++v) keys.push_back({p, d, v});
    }
    return keys;
}

}  // namespace

// ---------------------------------------------------------------------------
// S/F change

TaskTrainResult train_sf_change(const TaskTrainConfig& cfg, const FusedStore& store,
                                std::span<const std::string> train_patients, std::span<const std::string> val_patients,
                                const TaskEpochCallback& on_epoch) {
    const auto& m = store.data().manifest;
    auto train = build_pairs(m, train_patients, PairRole::Train, cfg.seed, cfg.train_pair_cap);
    const auto val = build_pairs(m, val_patients, PairRole::Val, cfg.seed, cfg.val_pair_cap);
    const auto val_targets = change_targets(val);

    VideoEncoder<float> encoder(derive_seed(cfg.seed, 1));
    Mlp<float> head(kChangeHeadWidths, derive_seed(cfg.seed, 2));
    const auto params = join(encoder.parameters(), head.parameters("head."));
    Trainer trainer(cfg, params);
    Rng rng(derive_seed(cfg.seed, 3));
    Selector sel{true};
    TaskTrainResult result;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        trainer.opt.set_lr(trainer.schedule.at(epoch));
        shuffle(train, rng);
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, train.size() - start);
            std::vector<Tensor<float>> rows;
            std::vector<int> labels;
            for (std::size_t i = 0; i < n; ++i) {
                const auto& p = train[start + i];
                rows.push_back(sf_change_forward(encoder, head, store.fused<float>(p.a), store.fused<float>(p.b)));
                labels.push_back(static_cast<int>(p.label));
            }
            trainer.opt.zero_grad();
            loss_sum += trainer.step(nn::softmax_cross_entropy(nn::concat_rows(rows), std::span<const int>(labels)), epoch);
            ++steps;
        }
        const auto preds = change_predictions(encoder, head, store, val);
        const double acc = accuracy(preds, val_targets);
        result.train_loss.push_back(loss_sum / static_cast<double>(steps));
        result.val_score.push_back(acc);
        if (sel.offer(acc)) {
            result.best_epoch = epoch;
            result.checkpoint = nn::snapshot(params);
        }
        if (on_epoch) on_epoch({epoch, result.train_loss.back(), acc});
    }
    result.final_checkpoint = nn::snapshot(params);
    return result;
}

ChangeMetrics eval_sf_change(const nn::Checkpoint& ckpt, const FusedStore& store, std::span<const PairExample> pairs) {
    VideoEncoder<float> encoder;
    Mlp<float> head(kChangeHeadWidths, 0);
    nn::restore(ckpt, join(encoder.parameters(), head.parameters("head.")));
    const auto preds = change_predictions(encoder, head, store, pairs);
    const auto targets = change_targets(pairs);

    ChangeMetrics out;
    out.pairs = pairs.size();
    out.accuracy3 = accuracy(preds, targets);
    std::vector<int> p2;
    std::vector<int> t2;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        p2.push_back(static_cast<int>(collapse_2class(static_cast<ChangeClass>(preds[i]))));
        t2.push_back(static_cast<int>(collapse_2class(static_cast<ChangeClass>(targets[i]))));
    }
    const auto s = classification_scores(p2, t2, static_cast<int>(BinaryChange::Increase));
    out.accuracy2 = s.accuracy;
    out.recall2 = s.recall;
    out.precision2 = s.precision;
    return out;
}

// ---------------------------------------------------------------------------
// S/F regression

namespace {

RegressionMetrics regress_eval(const VideoEncoder<float>& encoder, const Mlp<float>& head, const FusedStore& store,
                               std::span<const std::string> patients, AggregateMode mode) {
    const auto& m = store.data().manifest;
    nn::NoGradGuard guard;
    RegressionMetrics out;
    for (std::size_t p : resolve_patients(m, patients)) {
        for (std::size_t d = 0; d < m.patients[p].days.size(); ++d) {
            std::vector<double> views;
            for (std::size_t v = 0; v < m.patients[p].days[d].videos.size(); ++v) {
                views.push_back(sf_regress_forward(encoder, head, store.fused<float>({p, d, v})).item());
            }
            out.predictions.push_back(aggregate_views(views, mode));
            out.targets.push_back(m.patients[p].days[d].sf_ratio_normalized);
        }
    }
    out.patient_days = out.targets.size();
    out.rmse = rmse(out.predictions, out.targets);
    return out;
}

}  // namespace

TaskTrainResult train_sf_regress(const TaskTrainConfig& cfg, const FusedStore& store,
                                 std::span<const std::string> train_patients,
                                 std::span<const std::string> val_patients, const TaskEpochCallback& on_epoch) {
    const auto& m = store.data().manifest;
    std::vector<VideoKey> train;
    for (std::size_t p : resolve_patients(m, train_patients)) {
        const auto keys = patient_videos(m, p);
        train.insert(train.end(), keys.begin(), keys.end());
    }
    if (train.empty()) throw std::invalid_argument("train_sf_regress: no training videos");

    VideoEncoder<float> encoder(derive_seed(cfg.seed, 1));
    Mlp<float> head(kRegressionHeadWidths, derive_seed(cfg.seed, 2));
    // Start from the training-set mean so the first epochs learn the slope.
    double target_mean = 0.0;
    for (const auto& k : train) target_mean += sf_at(m, k);
    const float bias = static_cast<float>(target_mean / static_cast<double>(train.size()));
    head.set_output_bias(std::span<const float>(&bias, 1));
    const auto params = join(encoder.parameters(), head.parameters("head."));
    Trainer trainer(cfg, params);
    Rng rng(derive_seed(cfg.seed, 3));
    Selector sel{false};
    TaskTrainResult result;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        trainer.opt.set_lr(trainer.schedule.at(epoch));
        shuffle(train, rng);
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, train.size() - start);
            std::vector<Tensor<float>> rows;
            std::vector<float> targets;
            for (std::size_t i = 0; i < n; ++i) {
                const auto& k = train[start + i];
                rows.push_back(sf_regress_forward(encoder, head, store.fused<float>(k)));
                targets.push_back(static_cast<float>(sf_at(m, k)));
            }
            trainer.opt.zero_grad();
            loss_sum += trainer.step(nn::mse_loss(nn::concat_rows(rows), std::span<const float>(targets)), epoch);
            ++steps;
        }
        const double val_rmse = regress_eval(encoder, head, store, val_patients, cfg.aggregate).rmse;
        result.train_loss.push_back(loss_sum / static_cast<double>(steps));
        result.val_score.push_back(val_rmse);
        if (sel.offer(val_rmse)) {
            result.best_epoch = epoch;
            result.checkpoint = nn::snapshot(params);
        }
        if (on_epoch) on_epoch({epoch, result.train_loss.back(), val_rmse});
    }
    result.final_checkpoint = nn::snapshot(params);
    return result;
}

RegressionMetrics eval_sf_regress(const nn::Checkpoint& ckpt, const FusedStore& store,
                                  std::span<const std::string> patients, AggregateMode mode) {
    VideoEncoder<float> encoder;
    Mlp<float> head(kRegressionHeadWidths, 0);
    nn::restore(ckpt, join(encoder.parameters(), head.parameters("head.")));
    return regress_eval(encoder, head, store, patients, mode);
}

// ---------------------------------------------------------------------------
// Readmission

namespace {

std::vector<Mlp<float>> make_heads(std::uint64_t seed) {
    std::vector<Mlp<float>> heads;
    for (std::size_t v = 0; v < kViews.size(); ++v) heads.emplace_back(kReadmissionHeadWidths, derive_seed(seed, 10 + v));
    return heads;
}

nn::ParamList<float> readmission_params(const VideoEncoder<float>& encoder, std::span<const Mlp<float>> heads) {
    auto params = encoder.parameters();
    for (std::size_t v = 0; v < heads.size(); ++v) {
        const auto hp = heads[v].parameters("head" + std::to_string(v) + ".");
        params.insert(params.end(), hp.begin(), hp.end());
    }
    return params;
}

/// Per-view (day-1 key, day-2 key) ordered by canonical view index.
std::array<std::pair<VideoKey, VideoKey>, 6> view_pairs(const CohortManifest& m, std::size_t p) {
    const auto& days = m.patients.at(p).days;
    if (days.size() < 2) throw std::invalid_argument("readmission: patient " + m.patients[p].patient_id + " lacks a second day");
    std::array<std::pair<VideoKey, VideoKey>, 6> out;
    std::array<int, 6> seen{};
    for (std::size_t d = 0; d < 2; ++d) {
        for (std::size_t v = 0; v < days[d].videos.size(); ++v) {
            const std::size_t idx = view_index(days[d].videos[v].view);
            (d == 0 ? out[idx].first : out[idx].second) = {p, d, v};
            seen[idx] |= 1 << d;
        }
    }
    for (std::size_t i = 0; i < 6; ++i) {
        if (seen[i] != 3) {
            throw std::invalid_argument("readmission: patient " + m.patients[p].patient_id + " is missing view " +
                                        std::string(view_name(kViews[i])));
        }
    }
    return out;
}

std::vector<Tensor<float>> readmission_rows(const VideoEncoder<float>& encoder, std::span<const Mlp<float>> heads,
                                            const FusedStore& store, std::size_t p) {
    std::vector<Tensor<float>> rows;
    const auto vp = view_pairs(store.data().manifest, p);
    for (std::size_t v = 0; v < vp.size(); ++v) {
        const auto diff = nn::sub(encoder.forward(store.fused<float>(vp[v].second)),
                                  encoder.forward(store.fused<float>(vp[v].first)));
        rows.push_back(heads[v].forward(diff));
    }
    return rows;
}

std::pair<std::vector<int>, std::vector<int>> readmission_eval(const VideoEncoder<float>& encoder,
                                                               std::span<const Mlp<float>> heads,
                                                               const FusedStore& store,
                                                               std::span<const std::string> patients) {
    const auto& m = store.data().manifest;
    std::vector<int> preds;
    std::vector<int> targets;
    for (std::size_t p : resolve_patients(m, patients)) {
        preds.push_back(readmission_predict(encoder, heads, store, p).flag);
        targets.push_back(m.patients[p].readmission_flag ? 1 : 0);
    }
    return {preds, targets};
}

}  // namespace

ReadmissionPrediction readmission_predict(const VideoEncoder<float>& encoder, std::span<const Mlp<float>> heads,
                                          const FusedStore& store, std::size_t patient) {
    if (heads.size() != kViews.size()) throw std::invalid_argument("readmission: need one head per view");
    nn::NoGradGuard guard;
    ReadmissionPrediction out;
    const auto rows = readmission_rows(encoder, heads, store, patient);
    for (std::size_t v = 0; v < rows.size(); ++v) {
        out.view_logits[v] = {rows[v].data()[0], rows[v].data()[1]};
    }
    out.flag = majority_vote(out.view_logits);
    return out;
}

TaskTrainResult train_readmission(const TaskTrainConfig& cfg, const FusedStore& store,
                                  std::span<const std::string> train_patients,
                                  std::span<const std::string> val_patients, const nn::Checkpoint* warm_start,
                                  const TaskEpochCallback& on_epoch) {
    const auto& m = store.data().manifest;
    auto train = resolve_patients(m, train_patients);
    if (train.empty()) throw std::invalid_argument("train_readmission: no training patients");

    VideoEncoder<float> encoder(derive_seed(cfg.seed, 1));
    if (warm_start != nullptr) nn::restore(*warm_start, encoder.parameters());
    const auto heads = make_heads(cfg.seed);
    const auto params = readmission_params(encoder, heads);
    Trainer trainer(cfg, params);
    Rng rng(derive_seed(cfg.seed, 3));
    Selector sel{true};
    TaskTrainResult result;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        trainer.opt.set_lr(trainer.schedule.at(epoch));
        shuffle(train, rng);
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, train.size() - start);
            std::vector<Tensor<float>> rows;
            std::vector<int> labels;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t p = train[start + i];
                const auto r = readmission_rows(encoder, heads, store, p);
                rows.insert(rows.end(), r.begin(), r.end());
                labels.insert(labels.end(), r.size(), m.patients[p].readmission_flag ? 1 : 0);
            }
            trainer.opt.zero_grad();
            loss_sum += trainer.step(nn::softmax_cross_entropy(nn::concat_rows(rows), std::span<const int>(labels)), epoch);
            ++steps;
        }
        const auto [preds, targets] = readmission_eval(encoder, heads, store, val_patients);
        const double acc = accuracy(preds, targets);
        result.train_loss.push_back(loss_sum / static_cast<double>(steps));
        result.val_score.push_back(acc);
        if (sel.offer(acc)) {
            result.best_epoch = epoch;
            result.checkpoint = nn::snapshot(params);
        }
        if (on_epoch) on_epoch({epoch, result.train_loss.back(), acc});
    }
    result.final_checkpoint = nn::snapshot(params);
    return result;
}

ReadmissionMetrics eval_readmission(const nn::Checkpoint& ckpt, const FusedStore& store,
                                    std::span<const std::string> patients) {
    VideoEncoder<float> encoder;
    const auto heads = make_heads(0);
    nn::restore(ckpt, readmission_params(encoder, heads));
    const auto [preds, targets] = readmission_eval(encoder, heads, store, patients);
    const auto s = classification_scores(preds, targets, 1);
    return {s.accuracy, s.recall, s.precision, preds.size()};
}

}  // namespace confseg
