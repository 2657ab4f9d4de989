#include <doctest.h>

#include <optional>

#include "confseg/label.hpp"
#include "helpers.hpp"

using namespace confseg;
using testutil::plane_map;

namespace {

std::vector<int> plane_bits(const BinaryMaskStack& m, std::size_t c = 0) {
    const auto p = m.plane(c);
    return {p.begin(), p.end()};
}

}  // namespace

TEST_CASE("threshold grid") {
    CHECK(ConfidenceThreshold::all().size() == 7);
    for (int t : kThresholdLevels) CHECK(ConfidenceThreshold::is_valid(t));
    for (int t : {-1, 1, 10, 37, 59, 99, 101}) {
        CHECK_FALSE(ConfidenceThreshold::is_valid(t));
        CHECK_THROWS_AS(ConfidenceThreshold{t}, std::invalid_argument);
    }
    CHECK(ConfidenceThreshold(0).label() == "> 0");
    CHECK(ConfidenceThreshold(60).label() == ">= 60");
    CHECK(ConfidenceThreshold(100).label() == "= 100");
}

TEST_CASE("confidence map rejects out-of-range values and bad sizes") {
    ConfidenceMap m(2, 2);
    CHECK_THROWS(m.set(0, 0, 0, 101));
    CHECK_THROWS(m.set(0, 0, 0, -1));
    CHECK_THROWS(ConfidenceMap(0, 3));
    CHECK_THROWS(ConfidenceMap(2, 2, std::vector<std::uint8_t>(23, 0)));
    CHECK_THROWS(ConfidenceMap(1, 1, {0, 0, 0, 0, 0, 101}));
}

TEST_CASE("threshold_map examples") {
    const auto m = plane_map(2, 2, {0, 30, 60, 100});
    CHECK(plane_bits(threshold_map(m, ConfidenceThreshold(50))) == std::vector<int>{0, 0, 1, 1});
    CHECK(plane_bits(threshold_map(m, ConfidenceThreshold(0))) == std::vector<int>{0, 1, 1, 1});
    CHECK(plane_bits(threshold_map(m, ConfidenceThreshold(100))) == std::vector<int>{0, 0, 0, 1});
}

TEST_CASE("compute_weights examples") {
    auto weights = [](std::initializer_list<int> plane, int t) {
        const auto m = plane_map(2, 1, plane);
        const ConfidenceThreshold th(t);
        const auto w = compute_weights(m, th, threshold_map(m, th));
        return std::vector<double>{w.weights[0], w.weights[1]};
    };
    CHECK(weights({0, 60}, 60) == std::vector<double>{0.6, 0.6});
    CHECK(weights({0, 100}, 100) == std::vector<double>{0.8, 1.0});
    CHECK(weights({0, 40}, 0) == std::vector<double>{0.8, 0.4});
    // Below-threshold confidence counts as background.
    CHECK(weights({40, 80}, 60) == std::vector<double>{0.6, 0.8});
    CHECK(background_weight(ConfidenceThreshold(20)) == 0.2);
    CHECK(background_weight(ConfidenceThreshold(0)) == kExtremeBackgroundWeight);

    const ConfidenceMap m(2, 2);
    CHECK_THROWS_AS(compute_weights(m, ConfidenceThreshold(0), BinaryMaskStack(3, 2)), std::invalid_argument);
}

TEST_CASE("trimap_select examples") {
    const auto t = trimap_select(plane_map(3, 1, {0, 50, 100}));
    CHECK(t.certain[0] == 1);
    CHECK(t.certain[1] == 0);
    CHECK(t.certain[2] == 1);
    CHECK(t.targets[0] == 0);
    CHECK(t.targets[2] == 1);

    const auto zeros = trimap_select(ConfidenceMap(3, 2));
    CHECK(zeros.certain_count() == 6 * 6);

    ConfidenceMap mid(2, 2);
    for (std::size_t c = 0; c < kChannels; ++c) {
        for (std::size_t i = 0; i < 4; ++i) mid.set(c, i / 2, i % 2, 50);
    }
    CHECK(trimap_select(mid).certain_count() == 0);
}

TEST_CASE("foreground_fraction") {
    BinaryMaskStack m(2, 2);
    CHECK(foreground_fraction(m, 0) == 0.0);
    m.bits[3] = 1;
    CHECK(foreground_fraction(m, 0) == 0.25);
    for (std::size_t i = 4; i < 8; ++i) m.bits[i] = 1;
    CHECK(foreground_fraction(m, 1) == 1.0);
    CHECK_THROWS_AS(foreground_fraction(m, 6), std::out_of_range);
}

TEST_CASE("property: threshold monotonicity, support, weight positivity") {
    Rng rng(11);
    for (int iter = 0; iter < 500; ++iter) {
        const auto w = static_cast<std::size_t>(uniform_int(rng, 1, 9));
        const auto h = static_cast<std::size_t>(uniform_int(rng, 1, 9));
        const auto m = testutil::random_cmap(rng, w, h);
        std::optional<BinaryMaskStack> prev;
        for (int level : kThresholdLevels) {
            const ConfidenceThreshold t(level);
            const auto mask = threshold_map(m, t);
            if (prev) {
                for (std::size_t i = 0; i < mask.bits.size(); ++i) REQUIRE(mask.bits[i] <= prev->bits[i]);
            }
            const auto weights = compute_weights(m, t, mask);
            for (double v : weights.weights) REQUIRE((v > 0.0 && v <= 1.0));
            prev = mask;
        }
        const auto support = threshold_map(m, ConfidenceThreshold(0));
        for (std::size_t i = 0; i < support.bits.size(); ++i) REQUIRE(support.bits[i] == (m.values()[i] > 0 ? 1 : 0));
        const auto tri = trimap_select(m);
        for (std::size_t i = 0; i < tri.certain.size(); ++i) {
            const int v = m.values()[i];
            REQUIRE(tri.certain[i] == ((v == 0 || v == 100) ? 1 : 0));
        }
    }
}
