#include "confseg/label.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace confseg {

ConfidenceThreshold::ConfidenceThreshold(int percent) : level_(percent) {
    if (!is_valid(percent)) {
        throw std::invalid_argument("confidence threshold " + std::to_string(percent) +
                                    " is not one of 0,20,40,50,60,80,100");
    }
}

bool ConfidenceThreshold::is_valid(int percent) noexcept {
    return std::find(kThresholdLevels.begin(), kThresholdLevels.end(), percent) != kThresholdLevels.end();
}

std::vector<ConfidenceThreshold> ConfidenceThreshold::all() {
    std::vector<ConfidenceThreshold> out;
    for (int level : kThresholdLevels) out.emplace_back(level);
    return out;
}

std::string_view ConfidenceThreshold::label() const noexcept {
    switch (level_) {
        case 0: return "> 0";
        case 20: return ">= 20";
        case 40: return ">= 40";
        case 50: return ">= 50";
        case 60: return ">= 60";
        case 80: return ">= 80";
        default: return "= 100";
    }
}

ConfidenceMap::ConfidenceMap(std::size_t width, std::size_t height)
    : ConfidenceMap(width, height, std::vector<std::uint8_t>(kChannels * width * height, 0)) {}

ConfidenceMap::ConfidenceMap(std::size_t width, std::size_t height, std::vector<std::uint8_t> values)
    : width_(width), height_(height), values_(std::move(values)) {
    if (width_ == 0 || height_ == 0) throw std::invalid_argument("confidence map must be non-empty");
    if (values_.size() != kChannels * width_ * height_) {
        throw std::invalid_argument("confidence map payload size does not match 6 x height x width");
    }
    if (std::any_of(values_.begin(), values_.end(), [](std::uint8_t v) { return v > 100; })) {
        throw std::invalid_argument("confidence value out of range");
    }
}

void ConfidenceMap::set(std::size_t c, std::size_t y, std::size_t x, int value) {
    if (value < 0 || value > 100) throw std::invalid_argument("confidence value out of range");
    if (c >= kChannels || y >= height_ || x >= width_) throw std::out_of_range("confidence map index");
    values_[index(c, y, x)] = static_cast<std::uint8_t>(value);
}

std::span<const std::uint8_t> ConfidenceMap::plane(std::size_t c) const {
    if (c >= kChannels) throw std::out_of_range("channel index");
    return std::span<const std::uint8_t>(values_).subspan(c * plane_size(), plane_size());
}

std::size_t TrimapMask::certain_count() const noexcept {
    return static_cast<std::size_t>(std::count(certain.begin(), certain.end(), std::uint8_t{1}));
}

BinaryMaskStack threshold_map(const ConfidenceMap& cmap, ConfidenceThreshold t) {
    BinaryMaskStack out(cmap.width(), cmap.height());
    const auto src = cmap.values();
    const int level = t.level();
    if (level == 0) {
        std::transform(src.begin(), src.end(), out.bits.begin(),
                       [](std::uint8_t v) { return static_cast<std::uint8_t>(v > 0); });
    } else {
        std::transform(src.begin(), src.end(), out.bits.begin(),
                       [level](std::uint8_t v) { return static_cast<std::uint8_t>(v >= level); });
    }
    return out;
}

double background_weight(ConfidenceThreshold t) noexcept {
    const int level = t.level();
    if (level == 0 || level == 100) return kExtremeBackgroundWeight;
    return level / 100.0;
}

WeightMap compute_weights(const ConfidenceMap& cmap, ConfidenceThreshold t, const BinaryMaskStack& mask) {
    if (mask.width != cmap.width() || mask.height != cmap.height() || mask.bits.size() != cmap.values().size()) {
        throw std::invalid_argument("mask dimensions do not match confidence map");
    }
    WeightMap out{cmap.width(), cmap.height(), std::vector<double>(mask.bits.size())};
    const double bg = background_weight(t);
    const auto src = cmap.values();
    for (std::size_t i = 0; i < src.size(); ++i) {
        out.weights[i] = mask.bits[i] != 0 ? src[i] / 100.0 : bg;
    }
    return out;
}

TrimapMask trimap_select(const ConfidenceMap& cmap) {
    const auto src = cmap.values();
    TrimapMask out{cmap.width(), cmap.height(), std::vector<std::uint8_t>(src.size()),
                   std::vector<std::uint8_t>(src.size())};
    for (std::size_t i = 0; i < src.size(); ++i) {
        out.certain[i] = static_cast<std::uint8_t>(src[i] == 0 || src[i] == 100);
        out.targets[i] = static_cast<std::uint8_t>(src[i] == 100);
    }
    return out;
}

double foreground_fraction(const BinaryMaskStack& mask, std::size_t channel) {
    if (channel >= kChannels) throw std::out_of_range("channel index " + std::to_string(channel));
    const auto plane = mask.plane(channel);
    const auto ones = std::accumulate(plane.begin(), plane.end(), std::size_t{0});
    return static_cast<double>(ones) / static_cast<double>(plane.size());
}

}  // namespace confseg
