#pragma once

#include <filesystem>
#include <string>

#include "confseg/label.hpp"
#include "confseg/random.hpp"

namespace testutil {

/// Random map whose values are drawn from the threshold grid plus a few off-grid levels.
inline confseg::ConfidenceMap random_cmap(confseg::Rng& rng, std::size_t w, std::size_t h) {
    static constexpr int kLevels[] = {0, 0, 0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 100};
    confseg::ConfidenceMap m(w, h);
    for (std::size_t c = 0; c < confseg::kChannels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) m.set(c, y, x, kLevels[confseg::uniform_int(rng, 0, 13)]);
        }
    }
    return m;
}

/// Single-channel map: plane 0 holds `plane`, others zero.
inline confseg::ConfidenceMap plane_map(std::size_t w, std::size_t h, std::initializer_list<int> plane) {
    confseg::ConfidenceMap m(w, h);
    std::size_t i = 0;
    for (int v : plane) {
        m.set(0, i / w, i % w, v);
        ++i;
    }
    return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("confseg_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
