#pragma once

// Clinical task harnesses on top of frozen segmentations: S/F change
// classification from video pairs, per-view S/F regression with view
// aggregation, and readmission by per-view majority vote.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "confseg/checkpoint.hpp"
#include "confseg/dataio.hpp"
#include "confseg/label.hpp"
#include "confseg/optim.hpp"
#include "confseg/phantom.hpp"
#include "confseg/segmodel.hpp"

namespace confseg {

// ---------------------------------------------------------------------------
// Labels, pairs, votes

enum class ChangeClass : int { Decrease = 0, Same = 1, Increase = 2 };
enum class BinaryChange : int { NotIncrease = 0, Increase = 1 };

inline constexpr double kSameTolerance = 1e-9;

ChangeClass label_pair(double sf_a, double sf_b) noexcept;
BinaryChange collapse_2class(ChangeClass c) noexcept;
std::string_view change_name(ChangeClass c) noexcept;

/// Position of a video inside a cohort manifest.
struct VideoKey {
    std::size_t patient = 0;
    std::size_t day = 0;
    std::size_t view = 0;

    friend bool operator==(const VideoKey&, const VideoKey&) = default;
    friend auto operator<=>(const VideoKey&, const VideoKey&) = default;
};

struct PairExample {
    VideoKey a;
    VideoKey b;
    ChangeClass label = ChangeClass::Same;
};

enum class PairRole { Train, Val, Test };

/// Train: every unordered same-zone pair of distinct videos among `patients`
/// (any patient or day), oriented by a seeded coin.  Val/Test: same-zone pairs
/// within one patient, earlier day (then lower view index) first.  A seeded
/// subsample keeps at most `cap` pairs (0 = no cap).  Throws
/// std::invalid_argument when no pair is eligible or a patient id is unknown.
std::vector<PairExample> build_pairs(const CohortManifest& manifest, std::span<const std::string> patients,
                                     PairRole role, std::uint64_t seed, std::size_t cap);

enum class AggregateMode { Avg, Median, Max };
std::string_view aggregate_name(AggregateMode m) noexcept;
AggregateMode parse_aggregate(std::string_view name);

/// Throws std::invalid_argument on empty input.
double aggregate_views(std::span<const double> preds, AggregateMode mode);

/// Majority of per-view argmax votes (argmax ties go to class 0).  A split
/// vote goes to the class with the larger logit sum over views; if those sums
/// are equal too, class 0.  Throws std::invalid_argument on empty input.
int majority_vote(std::span<const std::array<double, 2>> logits);

// ---------------------------------------------------------------------------
// Cohort video data and fused inputs

struct VideoClip {
    std::vector<GrayImage> frames;
    ConfidenceMap label;
};

/// Every video of a cohort held in memory, indexed [patient][day][view].
struct CohortData {
    CohortManifest manifest;
    std::vector<std::vector<std::vector<VideoClip>>> videos;

    const VideoClip& video(const VideoKey& k) const { return videos.at(k.patient).at(k.day).at(k.view); }
    std::size_t patient_index(const std::string& id) const;
    /// First frame and label of every video of the given patients.
    std::vector<SegSample> seg_samples(std::span<const std::string> patients) const;
};

CohortData load_cohort(const std::filesystem::path& dir);
/// Renders the same cohort gen_cohort would write, without touching disk.
CohortData render_cohort(std::uint64_t seed, std::size_t n_patients, const PhantomSpec& spec,
                         const PlantedLinkParams& link = {});

enum class SegSourceKind { Model, Oracle, None };
std::string_view seg_source_name(SegSourceKind k) noexcept;
SegSourceKind parse_seg_source(std::string_view name);

inline constexpr std::size_t kFusedChannels = 7;

/// Segmentation channels of every cohort video, quantised to 1/255 steps:
/// model probabilities, the label's confidence / 100 on every frame (oracle),
/// or zeros.  Fused inputs stack the greyscale frame in front as channel 0.
class FusedStore {
public:
    FusedStore(const CohortData& data, SegSourceKind kind, const SegNet<float>* model = nullptr);

    /// T x 7 x H x W, all channels in [0, 1].
    template <typename Real>
    nn::Tensor<Real> fused(const VideoKey& k) const;

    const CohortData& data() const noexcept { return *data_; }
    SegSourceKind kind() const noexcept { return kind_; }

private:
    const CohortData* data_;
    SegSourceKind kind_;
    std::vector<std::vector<std::vector<std::vector<std::uint8_t>>>> seg_;
};

// ---------------------------------------------------------------------------
// Models

/// Two stride-2 conv stages (widths 8 and 32), each followed by a residual
/// temporal-shift block x + relu(conv1x1(shift(x))); global average pooling
/// over space and then time gives a 1 x 32 feature.
template <typename Real>
class VideoEncoder {
public:
    static constexpr std::size_t kFeatureWidth = 32;

    explicit VideoEncoder(std::uint64_t seed = 0);

    /// video: T x 7 x H x W.  Returns 1 x 32.
    nn::Tensor<Real> forward(const nn::Tensor<Real>& video) const;
    nn::ParamList<Real> parameters(const std::string& prefix = "encoder.") const;

private:
    nn::Tensor<Real> s1w_, s1b_, b1w_, b1b_, s2w_, s2b_, b2w_, b2b_;
};

/// Stack of linear layers with ReLU between them (none after the last).
template <typename Real>
class Mlp {
public:
    Mlp() = default;
    Mlp(std::vector<std::size_t> widths, std::uint64_t seed);

    nn::Tensor<Real> forward(const nn::Tensor<Real>& x) const;
    nn::ParamList<Real> parameters(const std::string& prefix) const;
    /// Zeroes every weight, keeping biases.
    void zero_weights();
    void set_output_bias(std::span<const Real> bias);

private:
    std::vector<nn::Tensor<Real>> weights_;
    std::vector<nn::Tensor<Real>> biases_;
};

/// logits = head(encode(b) - encode(a)).
template <typename Real>
nn::Tensor<Real> sf_change_forward(const VideoEncoder<Real>& encoder, const Mlp<Real>& head,
                                   const nn::Tensor<Real>& video_a, const nn::Tensor<Real>& video_b);

template <typename Real>
nn::Tensor<Real> sf_regress_forward(const VideoEncoder<Real>& encoder, const Mlp<Real>& head,
                                    const nn::Tensor<Real>& video);

/// Head widths used by the harnesses.
inline const std::vector<std::size_t> kChangeHeadWidths = {32, 3};
inline const std::vector<std::size_t> kRegressionHeadWidths = {32, 32, 16, 1};
inline const std::vector<std::size_t> kReadmissionHeadWidths = {32, 2};

// ---------------------------------------------------------------------------
// Training and evaluation

struct TaskTrainConfig {
    std::size_t epochs = 20;
    double lr = 1e-4;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    std::size_t train_pair_cap = 2000;
    std::size_t val_pair_cap = 200;
    std::size_t test_pair_cap = 100;
    AggregateMode aggregate = AggregateMode::Avg;
};

struct TaskEpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_score = 0.0;
};
using TaskEpochCallback = std::function<void(const TaskEpochLog&)>;

struct TaskTrainResult {
    nn::Checkpoint checkpoint;
    /// Parameters after the last epoch, whatever was selected.
    nn::Checkpoint final_checkpoint;
    std::size_t best_epoch = 0;
    std::vector<double> train_loss;
    /// Accuracy for classification tasks, RMSE for regression.
    std::vector<double> val_score;
};

struct ChangeMetrics {
    double accuracy3 = 0.0;
    double accuracy2 = 0.0;
    std::optional<double> recall2;
    std::optional<double> precision2;
    std::size_t pairs = 0;
};

struct RegressionMetrics {
    double rmse = 0.0;
    std::size_t patient_days = 0;
    std::vector<double> predictions;
    std::vector<double> targets;
};

struct ReadmissionMetrics {
    double accuracy = 0.0;
    std::optional<double> recall;
    std::optional<double> precision;
    std::size_t patients = 0;
};

/// Selects the epoch with the best validation 3-class accuracy (ties: earlier).
TaskTrainResult train_sf_change(const TaskTrainConfig& cfg, const FusedStore& store,
                                std::span<const std::string> train_patients, std::span<const std::string> val_patients,
                                const TaskEpochCallback& on_epoch = {});
ChangeMetrics eval_sf_change(const nn::Checkpoint& ckpt, const FusedStore& store, std::span<const PairExample> pairs);

/// One example per video, target = that day's normalised S/F.  Selects the
/// epoch with the lowest validation RMSE of view-aggregated predictions.
TaskTrainResult train_sf_regress(const TaskTrainConfig& cfg, const FusedStore& store,
                                 std::span<const std::string> train_patients,
                                 std::span<const std::string> val_patients, const TaskEpochCallback& on_epoch = {});
/// RMSE over patient-days of the aggregated six-view prediction.
RegressionMetrics eval_sf_regress(const nn::Checkpoint& ckpt, const FusedStore& store,
                                  std::span<const std::string> patients, AggregateMode mode);

/// Encoder optionally warm-started from an S/F-change checkpoint.  Selects
/// the epoch with the best validation accuracy (ties: earlier).
TaskTrainResult train_readmission(const TaskTrainConfig& cfg, const FusedStore& store,
                                  std::span<const std::string> train_patients,
                                  std::span<const std::string> val_patients,
                                  const nn::Checkpoint* warm_start = nullptr, const TaskEpochCallback& on_epoch = {});

struct ReadmissionPrediction {
    int flag = 0;
    std::array<std::array<double, 2>, 6> view_logits{};
};

ReadmissionPrediction readmission_predict(const VideoEncoder<float>& encoder, std::span<const Mlp<float>> heads,
                                          const FusedStore& store, std::size_t patient);
ReadmissionMetrics eval_readmission(const nn::Checkpoint& ckpt, const FusedStore& store,
                                    std::span<const std::string> patients);

}  // namespace confseg
