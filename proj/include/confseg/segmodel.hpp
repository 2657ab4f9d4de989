#pragma once

// Tiny FPN-style six-channel segmenter, augmentation, and the thresholded /
// confidence-weighted training loop.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "confseg/checkpoint.hpp"
#include "confseg/dataio.hpp"
#include "confseg/label.hpp"
#include "confseg/metrics.hpp"
#include "confseg/optim.hpp"
#include "confseg/random.hpp"

namespace confseg {

/// Encoder: three stride-2 3x3 convs (widths 8/16/32).  1x1 laterals to
/// width 16 plus a 3x3 lateral on the input, merged top-down by nearest
/// upsampling and addition; a 3x3 head emits 6 logits per pixel.
template <typename Real>
class SegNet {
public:
    static constexpr std::size_t kLateralWidth = 16;

    explicit SegNet(std::uint64_t seed = 0);

    /// images: N x 1 x H x W with H, W divisible by 8.  Returns N x 6 x H x W logits.
    nn::Tensor<Real> forward(const nn::Tensor<Real>& images) const;

    nn::ParamList<Real> parameters() const;
    /// Zeroes the head so every output probability is exactly 0.5.
    void zero_head();

    static SegNet from_checkpoint(const nn::Checkpoint& ckpt);

private:
    struct Conv {
        nn::Tensor<Real> w;
        nn::Tensor<Real> b;
    };
    Conv enc1_, enc2_, enc3_, lat0_, lat1_, lat2_, lat3_, head_;
};

struct SegSample {
    GrayImage image;
    ConfidenceMap label;
};

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentToggles {
    bool flip = true;
    bool rotate = true;
    bool intensity = true;
};

struct AugmentParams {
    bool flip = false;
    double angle_deg = 0.0;
    double gain = 1.0;
    double gamma = 1.0;
};

/// Each transform is switched on with probability 1/2 (and only if toggled).
/// Always consumes the same number of draws regardless of toggles.
AugmentParams draw_augment(Rng& rng, const AugmentToggles& toggles = {});

/// Flip, then rotation about the centre (bilinear for the image, nearest for
/// labels, zero outside), then gain and gamma on the image only.
SegSample apply_augment(const GrayImage& image, const ConfidenceMap& label, const AugmentParams& params);

SegSample augment(const GrayImage& image, const ConfidenceMap& label, Rng& rng, const AugmentToggles& toggles = {});

// ---------------------------------------------------------------------------
// Training and inference

enum class LossWeighting {
    Confidence,  ///< weights from compute_weights at the training threshold
    Uniform,     ///< weighted loss with every weight 1
    Unweighted,  ///< plain binary cross-entropy
};

struct SegTrainConfig {
    ConfidenceThreshold threshold{60};
    std::size_t epochs = 100;
    double lr = 1e-4;
    double lr_min = 0.0;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    AugmentToggles augment;
    LossWeighting weighting = LossWeighting::Confidence;
};

struct SegTrainResult {
    nn::Checkpoint checkpoint;
    std::size_t best_epoch = 0;  ///< 0-based
    std::vector<double> train_loss;  ///< mean step loss per epoch
    std::vector<double> val_iou;     ///< mean per-image macro IoU per epoch
    std::vector<double> step_loss;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SegEpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_iou = 0.0;
    double lr = 0.0;
};

/// Throws std::invalid_argument on empty sets, mismatched dimensions or
/// epochs == 0, and TrainingError on a non-finite loss.
SegTrainResult train_seg(const SegTrainConfig& config, std::span<const SegSample> train, std::span<const SegSample> val,
                         const std::function<void(const SegEpochLog&)>& on_epoch = {});

/// Images scaled to [0, 1] as an N x 1 x H x W tensor.
template <typename Real>
nn::Tensor<Real> image_batch(std::span<const GrayImage* const> images);

/// Per-pixel sigmoid probabilities.  Throws nn::ShapeError on bad dimensions.
std::vector<ProbMap> predict(const SegNet<float>& model, std::span<const GrayImage> images);
ProbMap predict(const SegNet<float>& model, const GrayImage& image);

struct SegPrediction {
    ProbMap probs;
    BinaryMaskStack mask;
};

SegPrediction infer_seg(const nn::Checkpoint& ckpt, const GrayImage& image);

/// Mean per-image macro IoU at threshold t.
double mean_macro_iou(std::span<const ProbMap> preds, std::span<const SegSample> samples, ConfidenceThreshold t);

SegMetricRow evaluate_seg(const SegNet<float>& model, std::span<const SegSample> samples, ConfidenceThreshold t);

}  // namespace confseg
