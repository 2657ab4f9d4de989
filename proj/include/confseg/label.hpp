#pragma once

// Confidence-label data model: per-pixel expert confidence rasters and the
// threshold / weight / trimap transforms used to turn them into training
// targets.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace confseg {

inline constexpr std::size_t kChannels = 6;

enum class Channel : std::uint8_t {
    SharpPleura = 0,
    FuzzyPleura = 1,
    FasciaBand = 2,
    ALine = 3,
    SubALine = 4,
    VerticalLine = 5,
};

/// Canonical channel names, in storage order.
inline constexpr std::array<std::string_view, kChannels> kChannelNames = {
    "sharp_pleura", "fuzzy_pleura", "fascia_band", "a_line", "sub_a_line", "vertical_line"};

/// Confidence levels an experiment may threshold at, ascending.
inline constexpr std::array<int, 7> kThresholdLevels = {0, 20, 40, 50, 60, 80, 100};

/// Background weight used for the two extreme thresholds (0 and 100).
inline constexpr double kExtremeBackgroundWeight = 0.8;

/// A confidence cutoff restricted to the fixed experiment grid.
class ConfidenceThreshold {
public:
    /// Throws std::invalid_argument when `percent` is not in kThresholdLevels.
    explicit ConfidenceThreshold(int percent);

    static bool is_valid(int percent) noexcept;
    static std::vector<ConfidenceThreshold> all();

    int level() const noexcept { return level_; }
    /// Column label in the style of the threshold sweep tables ("> 0", ">= 60", "= 100").
    std::string_view label() const noexcept;

    friend bool operator==(ConfidenceThreshold, ConfidenceThreshold) = default;
    friend auto operator<=>(ConfidenceThreshold, ConfidenceThreshold) = default;

private:
    int level_;
};

/// Six-plane raster of integer confidence percentages in [0, 100], stored
/// channel-major then row-major.
class ConfidenceMap {
public:
    ConfidenceMap(std::size_t width, std::size_t height);
    /// Takes ownership of `values` (size must be 6*width*height, each <= 100).
    ConfidenceMap(std::size_t width, std::size_t height, std::vector<std::uint8_t> values);

    std::size_t width() const noexcept { return width_; }
    std::size_t height() const noexcept { return height_; }
    std::size_t plane_size() const noexcept { return width_ * height_; }

    std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const {
        return values_[index(c, y, x)];
    }
    void set(std::size_t c, std::size_t y, std::size_t x, int value);

    std::span<const std::uint8_t> values() const noexcept { return values_; }
    std::span<const std::uint8_t> plane(std::size_t c) const;

    friend bool operator==(const ConfidenceMap&, const ConfidenceMap&) = default;

private:
    std::size_t index(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return (c * height_ + y) * width_ + x;
    }

    std::size_t width_;
    std::size_t height_;
    std::vector<std::uint8_t> values_;
};

/// Six-plane binary raster; values are 0 or 1.
struct BinaryMaskStack {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> bits;

    BinaryMaskStack() = default;
    BinaryMaskStack(std::size_t w, std::size_t h) : width(w), height(h), bits(kChannels * w * h, 0) {}

    std::size_t plane_size() const noexcept { return width * height; }
    std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const {
        return bits[(c * height + y) * width + x];
    }
    std::span<const std::uint8_t> plane(std::size_t c) const {
        return std::span<const std::uint8_t>(bits).subspan(c * plane_size(), plane_size());
    }

    friend bool operator==(const BinaryMaskStack&, const BinaryMaskStack&) = default;
};

/// Per-pixel loss weights in (0, 1].
struct WeightMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> weights;
};

/// Pixels whose raw confidence is exactly 0 or 100, with their hard targets.
struct TrimapMask {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> certain;
    /// 0 or 1 on certain pixels; 0 elsewhere (meaningless off the certain set).
    std::vector<std::uint8_t> targets;

    std::size_t certain_count() const noexcept;
};

/// t > 0: 1 where confidence >= t.  t == 0: 1 where confidence > 0.
BinaryMaskStack threshold_map(const ConfidenceMap& cmap, ConfidenceThreshold t);

/// Foreground pixels are weighted by their own confidence; background pixels
/// by t/100, except for t in {0, 100} where the background weight is 0.8.
/// Throws std::invalid_argument if `mask` does not match `cmap` dimensions.
WeightMap compute_weights(const ConfidenceMap& cmap, ConfidenceThreshold t, const BinaryMaskStack& mask);

/// Background weight that compute_weights assigns at threshold t.
double background_weight(ConfidenceThreshold t) noexcept;

TrimapMask trimap_select(const ConfidenceMap& cmap);

/// Fraction of 1-pixels in one channel.  Throws std::out_of_range for channel >= 6.
double foreground_fraction(const BinaryMaskStack& mask, std::size_t channel);

}  // namespace confseg
