#include "confseg/segmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace confseg {

using nn::Shape;
using nn::Tensor;

namespace {

template <typename Real>
Tensor<Real> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<Real> v(nn::numel(shape));
    for (auto& x : v) x = static_cast<Real>(normal(rng, 0.0, std));
    return Tensor<Real>::from(std::move(shape), std::move(v), true);
}

}  // namespace

template <typename Real>
SegNet<Real>::SegNet(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x5e6));
    auto conv = [&](std::size_t out, std::size_t in, std::size_t k) {
        return Conv{he_normal<Real>({out, in, k, k}, in * k * k, rng), Tensor<Real>::zeros({out}, true)};
    };
    const std::size_t L = kLateralWidth;
    enc1_ = conv(8, 1, 3);
    enc2_ = conv(16, 8, 3);
    enc3_ = conv(32, 16, 3);
    lat0_ = conv(L, 1, 3);
    lat1_ = conv(L, 8, 1);
    lat2_ = conv(L, 16, 1);
    lat3_ = conv(L, 32, 1);
    head_ = conv(kChannels, L, 3);
}

template <typename Real>
Tensor<Real> SegNet<Real>::forward(const Tensor<Real>& x) const {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0 || x.dim(2) == 0 || x.dim(3) == 0) {
        throw nn::ShapeError("SegNet expects N x 1 x H x W with H, W divisible by 8, got " + nn::shape_string(x.shape()));
    }
    const auto c1 = nn::relu(nn::conv2d(x, enc1_.w, enc1_.b, 2));
    const auto c2 = nn::relu(nn::conv2d(c1, enc2_.w, enc2_.b, 2));
    const auto c3 = nn::relu(nn::conv2d(c2, enc3_.w, enc3_.b, 2));
    const auto p3 = nn::conv2d(c3, lat3_.w, lat3_.b, 1, 0);
    const auto p2 = nn::add(nn::conv2d(c2, lat2_.w, lat2_.b, 1, 0), nn::upsample_nearest2x(p3));
    const auto p1 = nn::add(nn::conv2d(c1, lat1_.w, lat1_.b, 1, 0), nn::upsample_nearest2x(p2));
    const auto p0 = nn::relu(nn::add(nn::conv2d(x, lat0_.w, lat0_.b), nn::upsample_nearest2x(p1)));
    return nn::conv2d(p0, head_.w, head_.b);
}

template <typename Real>
nn::ParamList<Real> SegNet<Real>::parameters() const {
    nn::ParamList<Real> out;
    auto push = [&](const char* name, const Conv& c) {
        out.push_back({std::string(name) + ".w", c.w});
        out.push_back({std::string(name) + ".b", c.b});
    };
    push("enc1", enc1_);
    push("enc2", enc2_);
    push("enc3", enc3_);
    push("lat0", lat0_);
    push("lat1", lat1_);
    push("lat2", lat2_);
    push("lat3", lat3_);
    push("head", head_);
    return out;
}

template <typename Real>
void SegNet<Real>::zero_head() {
    for (auto t : {head_.w, head_.b}) std::fill(t.data().begin(), t.data().end(), Real(0));
}

template <typename Real>
SegNet<Real> SegNet<Real>::from_checkpoint(const nn::Checkpoint& ckpt) {
    SegNet net;
    nn::restore(ckpt, net.parameters());
    return net;
}

template class SegNet<float>;
template class SegNet<double>;

// ---------------------------------------------------------------------------
// Augmentation

AugmentParams draw_augment(Rng& rng, const AugmentToggles& toggles) {
    const bool flip = bernoulli(rng, 0.5);
    const bool rotate = bernoulli(rng, 0.5);
    const bool intensity = bernoulli(rng, 0.5);
    const double angle = uniform(rng, -15.0, 15.0);
    const double gain = uniform(rng, 0.8, 1.2);
    const double gamma = uniform(rng, 0.8, 1.25);
    AugmentParams p;
    p.flip = toggles.flip && flip;
    if (toggles.rotate && rotate) p.angle_deg = angle;
    if (toggles.intensity && intensity) {
        p.gain = gain;
        p.gamma = gamma;
    }
    return p;
}

SegSample apply_augment(const GrayImage& image, const ConfidenceMap& label, const AugmentParams& params) {
    if (image.width != label.width() || image.height != label.height()) {
        throw std::invalid_argument("augment: image and label dimensions differ");
    }
    const std::size_t W = image.width;
    const std::size_t H = image.height;
    GrayImage img = image;
    ConfidenceMap lab = label;

    if (params.flip) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                img.at(y, x) = image.at(y, W - 1 - x);
                for (std::size_t c = 0; c < kChannels; ++c) lab.set(c, y, x, label.at(c, y, W - 1 - x));
            }
        }
    }

    if (params.angle_deg != 0.0) {
        const GrayImage src_img = img;
        const ConfidenceMap src_lab = lab;
        const double rad = params.angle_deg * std::numbers::pi / 180.0;
        const double cs = std::cos(rad);
        const double sn = std::sin(rad);
        const double cx = (static_cast<double>(W) - 1.0) / 2.0;
        const double cy = (static_cast<double>(H) - 1.0) / 2.0;
        const double maxx = static_cast<double>(W) - 1.0;
        const double maxy = static_cast<double>(H) - 1.0;
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                // Inverse map: output pixel p comes from R(-angle)(p - c) + c.
                const double dx = static_cast<double>(x) - cx;
                const double dy = static_cast<double>(y) - cy;
                const double sx = cs * dx + sn * dy + cx;
                const double sy = -sn * dx + cs * dy + cy;

                double v = 0.0;
                if (sx >= 0.0 && sy >= 0.0 && sx <= maxx && sy <= maxy) {
                    const auto x0 = static_cast<std::size_t>(std::floor(sx));
                    const auto y0 = static_cast<std::size_t>(std::floor(sy));
                    const std::size_t x1 = std::min(x0 + 1, W - 1);
                    const std::size_t y1 = std::min(y0 + 1, H - 1);
                    const double fx = sx - static_cast<double>(x0);
                    const double fy = sy - static_cast<double>(y0);
                    v = (1 - fy) * ((1 - fx) * src_img.at(y0, x0) + fx * src_img.at(y0, x1)) +
                        fy * ((1 - fx) * src_img.at(y1, x0) + fx * src_img.at(y1, x1));
                }
                img.at(y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));

                const long nx = std::lround(sx);
                const long ny = std::lround(sy);
                const bool inside = nx >= 0 && ny >= 0 && nx < static_cast<long>(W) && ny < static_cast<long>(H);
                for (std::size_t c = 0; c < kChannels; ++c) {
                    lab.set(c, y, x,
                            inside ? src_lab.at(c, static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)) : 0);
                }
            }
        }
    }

    if (params.gain != 1.0 || params.gamma != 1.0) {
        for (auto& p : img.pixels) {
            const double u = std::clamp(p * params.gain / 255.0, 0.0, 1.0);
            p = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * std::pow(u, params.gamma)), 0L, 255L));
        }
    }
    return {std::move(img), std::move(lab)};
}

SegSample augment(const GrayImage& image, const ConfidenceMap& label, Rng& rng, const AugmentToggles& toggles) {
    return apply_augment(image, label, draw_augment(rng, toggles));
}

// ---------------------------------------------------------------------------
// Inference

template <typename Real>
Tensor<Real> image_batch(std::span<const GrayImage* const> images) {
    if (images.empty()) throw nn::ShapeError("image_batch: empty batch");
    const std::size_t W = images.front()->width;
    const std::size_t H = images.front()->height;
    std::vector<Real> v;
    v.reserve(images.size() * W * H);
    for (const auto* img : images) {
        if (img->width != W || img->height != H) throw nn::ShapeError("image_batch: mixed image dimensions");
        for (auto p : img->pixels) v.push_back(static_cast<Real>(p) / Real(255));
    }
    return Tensor<Real>::from({images.size(), 1, H, W}, std::move(v));
}

template Tensor<float> image_batch<float>(std::span<const GrayImage* const>);
template Tensor<double> image_batch<double>(std::span<const GrayImage* const>);

namespace {

constexpr std::size_t kInferBatch = 16;

ProbMap to_probmap(std::span<const float> logits, std::size_t W, std::size_t H) {
    ProbMap m(W, H);
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        m.values[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
    }
    return m;
}

}  // namespace

std::vector<ProbMap> predict(const SegNet<float>& model, std::span<const GrayImage> images) {
    nn::NoGradGuard guard;
    std::vector<ProbMap> out;
    out.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += kInferBatch) {
        const std::size_t n = std::min(kInferBatch, images.size() - start);
        std::vector<const GrayImage*> ptrs;
        for (std::size_t i = 0; i < n; ++i) ptrs.push_back(&images[start + i]);
        const auto logits = model.forward(image_batch<float>(ptrs));
        const std::size_t W = images[start].width;
        const std::size_t H = images[start].height;
        const std::size_t per = kChannels * W * H;
        for (std::size_t i = 0; i < n; ++i) out.push_back(to_probmap(logits.data().subspan(i * per, per), W, H));
    }
    return out;
}

ProbMap predict(const SegNet<float>& model, const GrayImage& image) {
    return std::move(predict(model, std::span<const GrayImage>(&image, 1)).front());
}

SegPrediction infer_seg(const nn::Checkpoint& ckpt, const GrayImage& image) {
    const auto model = SegNet<float>::from_checkpoint(ckpt);
    SegPrediction p;
    p.probs = predict(model, image);
    p.mask = binarize(p.probs);
    return p;
}

double mean_macro_iou(std::span<const ProbMap> preds, std::span<const SegSample> samples, ConfidenceThreshold t) {
    if (preds.size() != samples.size() || preds.empty()) throw std::invalid_argument("mean_macro_iou: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        total += iou(binarize(preds[i]), threshold_map(samples[i].label, t)).macro;
    }
    return total / static_cast<double>(preds.size());
}

SegMetricRow evaluate_seg(const SegNet<float>& model, std::span<const SegSample> samples, ConfidenceThreshold t) {
    std::vector<GrayImage> images;
    images.reserve(samples.size());
    for (const auto& s : samples) images.push_back(s.image);
    const auto preds = predict(model, images);
    SegMetricAccumulator acc(t);
    for (std::size_t i = 0; i < samples.size(); ++i) acc.add(preds[i], samples[i].label);
    return acc.row();
}

// ---------------------------------------------------------------------------
// Training

namespace {

void check_samples(std::span<const SegSample> set, std::size_t W, std::size_t H, const char* what) {
    for (const auto& s : set) {
        if (s.image.width != W || s.image.height != H || s.label.width() != W || s.label.height() != H) {
            throw std::invalid_argument(std::string("train_seg: ") + what + " sample dimensions differ");
        }
    }
}

}  // namespace

SegTrainResult train_seg(const SegTrainConfig& config, std::span<const SegSample> train, std::span<const SegSample> val,
                         const std::function<void(const SegEpochLog&)>& on_epoch) {
    if (train.empty() || val.empty()) throw std::invalid_argument("train_seg: train and val sets must be nonempty");
    if (config.epochs == 0) throw std::invalid_argument("train_seg: epochs must be >= 1");
    if (config.batch_size == 0) throw std::invalid_argument("train_seg: batch size must be >= 1");
    const std::size_t W = train.front().image.width;
    const std::size_t H = train.front().image.height;
    check_samples(train, W, H, "train");
    check_samples(val, W, H, "val");

    SegNet<float> model(config.seed);
    const auto params = model.parameters();
    nn::AdamConfig acfg;
    acfg.lr = config.lr;
    nn::Adam<float> opt(params, acfg);
    nn::LrSchedule schedule;
    schedule.lr_max = config.lr;
    schedule.lr_min = config.lr_min;
    schedule.period = config.epochs;

    Rng rng(derive_seed(config.seed, 0xda7a));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<GrayImage> val_images;
    for (const auto& s : val) val_images.push_back(s.image);

    SegTrainResult result;
    double best_iou = -1.0;
    const std::size_t plane = W * H;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        opt.set_lr(schedule.at(epoch));
        shuffle(order, rng);
        double loss_sum = 0.0;
        std::size_t steps = 0;

        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t n = std::min(config.batch_size, order.size() - start);
            std::vector<SegSample> batch;
            batch.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& s = train[order[start + i]];
                batch.push_back(augment(s.image, s.label, rng, config.augment));
            }
            std::vector<const GrayImage*> ptrs;
            std::vector<float> targets(n * kChannels * plane);
            std::vector<float> weights(targets.size(), 1.0f);
            for (std::size_t i = 0; i < n; ++i) {
                ptrs.push_back(&batch[i].image);
                const auto mask = threshold_map(batch[i].label, config.threshold);
                std::copy(mask.bits.begin(), mask.bits.end(), targets.begin() + static_cast<std::ptrdiff_t>(i * kChannels * plane));
                if (config.weighting == LossWeighting::Confidence) {
                    const auto w = compute_weights(batch[i].label, config.threshold, mask);
                    std::transform(w.weights.begin(), w.weights.end(),
                                   weights.begin() + static_cast<std::ptrdiff_t>(i * kChannels * plane),
                                   [](double x) { return static_cast<float>(x); });
                }
            }

            opt.zero_grad();
            const auto logits = model.forward(image_batch<float>(ptrs));
            auto loss = config.weighting == LossWeighting::Unweighted
                                  ? nn::bce_loss<float>(logits, targets)
                                  : nn::weighted_bce_loss<float>(logits, targets, weights);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw TrainingError("train_seg: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(steps));
            }
            loss.backward();
            opt.step();
            result.step_loss.push_back(value);
            loss_sum += value;
            ++steps;
        }

        const auto preds = predict(model, val_images);
        const double val_iou = mean_macro_iou(preds, val, config.threshold);
        result.train_loss.push_back(loss_sum / static_cast<double>(steps));
        result.val_iou.push_back(val_iou);
        if (val_iou > best_iou) {
            best_iou = val_iou;
            result.best_epoch = epoch;
            result.checkpoint = nn::snapshot(params);
        }
        if (on_epoch) on_epoch({epoch, result.train_loss.back(), val_iou, opt.lr()});
    }
    return result;
}

}  // namespace confseg
