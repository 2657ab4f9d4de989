#include <doctest.h>

#include <cmath>
#include <numeric>

#include "confseg/metrics.hpp"
#include "helpers.hpp"

using namespace confseg;

namespace {

ProbMap probs_plane(std::size_t w, std::size_t h, std::initializer_list<double> plane, double rest = 0.5) {
    ProbMap p(w, h, rest);
    std::size_t i = 0;
    for (double v : plane) p.values[i++] = v;
    return p;
}

BinaryMaskStack mask_plane(std::size_t w, std::size_t h, std::initializer_list<int> plane) {
    BinaryMaskStack m(w, h);
    std::size_t i = 0;
    for (int v : plane) m.bits[i++] = static_cast<std::uint8_t>(v);
    return m;
}

double bce(double y, double p) {
    p = std::clamp(p, 1e-7, 1.0 - 1e-7);
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

}  // namespace

TEST_CASE("iou examples") {
    const auto a = mask_plane(2, 2, {1, 1, 0, 0});
    const auto b = mask_plane(2, 2, {1, 0, 1, 0});
    const auto r = iou(a, b);
    REQUIRE(r.per_channel[0]);
    CHECK(*r.per_channel[0] == doctest::Approx(1.0 / 3.0));
    for (std::size_t c = 1; c < kChannels; ++c) CHECK_FALSE(r.per_channel[c]);
    CHECK(r.macro == doctest::Approx(1.0 / 3.0));

    CHECK(iou(a, a).macro == 1.0);
    CHECK(iou(a, mask_plane(2, 2, {0, 0, 1, 1})).macro == 0.0);
    CHECK(iou(BinaryMaskStack(2, 2), BinaryMaskStack(2, 2)).macro == 1.0);
    CHECK_THROWS(iou(a, BinaryMaskStack(2, 3)));
}

TEST_CASE("iou is symmetric and invariant under pixel permutation") {
    Rng rng(3);
    for (int iter = 0; iter < 200; ++iter) {
        BinaryMaskStack a(5, 4), b(5, 4);
        for (auto& v : a.bits) v = bernoulli(rng, 0.3);
        for (auto& v : b.bits) v = bernoulli(rng, 0.3);
        const auto ab = iou(a, b);
        CHECK(ab.macro == iou(b, a).macro);
        std::vector<std::size_t> perm(20);
        std::iota(perm.begin(), perm.end(), 0);
        shuffle(perm, rng);
        BinaryMaskStack pa(5, 4), pb(5, 4);
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t i = 0; i < 20; ++i) {
                pa.bits[c * 20 + i] = a.bits[c * 20 + perm[i]];
                pb.bits[c * 20 + i] = b.bits[c * 20 + perm[i]];
            }
        }
        CHECK(iou(pa, pb).macro == doctest::Approx(ab.macro).epsilon(1e-12));
    }
}

TEST_CASE("weighted_ce examples") {
    WeightMap w{1, 1, std::vector<double>(6, 1.0)};
    auto gt = mask_plane(1, 1, {1});
    // Other channels: y = 0, p = 0.5 so each contributes ln 2 as well.
    CHECK(weighted_ce(probs_plane(1, 1, {0.5}), gt, w) == doctest::Approx(std::log(2.0)));

    WeightMap w8{1, 1, std::vector<double>(6, 0.8)};
    const auto p = probs_plane(1, 1, {0.1, 0.1, 0.1, 0.1, 0.1, 0.1});
    CHECK(weighted_ce(p, BinaryMaskStack(1, 1), w8) == doctest::Approx(-0.8 * std::log(0.9)));
    CHECK(-0.8 * std::log(0.9) == doctest::Approx(0.08430).epsilon(1e-4));

    const auto exact = probs_plane(1, 1, {1.0, 0.0, 0.0, 0.0, 0.0, 0.0});
    CHECK(weighted_ce(exact, gt, w) < 1e-6);
    CHECK_THROWS(weighted_ce(p, BinaryMaskStack(2, 1), w8));
}

TEST_CASE("soft_ce examples") {
    auto cmap = testutil::plane_map(1, 1, {50});
    // Only channel 0 carries 0.5; others have target 0 and prediction 0.5.
    const auto half = probs_plane(1, 1, {0.5});
    CHECK(soft_ce(half, cmap) == doctest::Approx(std::log(2.0)));

    ConfidenceMap sixty(1, 1);
    for (std::size_t c = 0; c < kChannels; ++c) sixty.set(c, 0, 0, 60);
    const ProbMap p60(1, 1, 0.6);
    const double h = -(0.6 * std::log(0.6) + 0.4 * std::log(0.4));
    CHECK(soft_ce(p60, sixty) == doctest::Approx(h));
    CHECK(h == doctest::Approx(0.6730).epsilon(1e-4));

    ConfidenceMap ones(1, 1);
    for (std::size_t c = 0; c < kChannels; ++c) ones.set(c, 0, 0, 100);
    CHECK(soft_ce(ProbMap(1, 1, 1.0), ones) < 1e-6);
}

TEST_CASE("soft_ce is minimised at the mean soft target over constant predictions") {
    Rng rng(21);
    const auto cmap = testutil::random_cmap(rng, 6, 6);
    const double mean = std::accumulate(cmap.values().begin(), cmap.values().end(), 0.0) / 100.0 /
                        static_cast<double>(cmap.values().size());
    double best = 1e300, best_p = 0.0;
    for (int i = 1; i < 1000; ++i) {
        const double p = i / 1000.0;
        const double v = soft_ce(ProbMap(6, 6, p), cmap);
        if (v < best) {
            best = v;
            best_p = p;
        }
    }
    CHECK(std::abs(best_p - mean) <= 0.001);
}

TEST_CASE("trimap_loss examples") {
    ConfidenceMap cmap(3, 1);
    for (std::size_t c = 1; c < kChannels; ++c) {
        for (std::size_t x = 0; x < 3; ++x) cmap.set(c, 0, x, 50);  // uncertain elsewhere
    }
    cmap.set(0, 0, 0, 0);
    cmap.set(0, 0, 1, 50);
    cmap.set(0, 0, 2, 100);
    const auto p = probs_plane(3, 1, {0.1, 0.9, 0.8});
    const auto t = trimap_loss(p, cmap);
    REQUIRE(t);
    CHECK(*t == doctest::Approx((-std::log(0.9) - std::log(0.8)) / 2.0));
    CHECK(*t == doctest::Approx(0.1643).epsilon(1e-3));

    ConfidenceMap fifty(2, 2);
    for (std::size_t c = 0; c < kChannels; ++c) {
        for (std::size_t i = 0; i < 4; ++i) fifty.set(c, i / 2, i % 2, 50);
    }
    CHECK_FALSE(trimap_loss(ProbMap(2, 2), fifty));
}

TEST_CASE("property: metrics against brute-force per-pixel loops") {
    Rng rng(77);
    for (int iter = 0; iter < 200; ++iter) {
        const auto cmap = testutil::random_cmap(rng, 8, 8);
        ProbMap p(8, 8);
        for (auto& v : p.values) v = uniform01(rng);
        const ConfidenceThreshold t(kThresholdLevels[static_cast<std::size_t>(uniform_int(rng, 0, 6))]);
        const auto mask = threshold_map(cmap, t);
        const auto w = compute_weights(cmap, t, mask);

        double wce = 0, sce = 0, tri = 0, ones = 0;
        std::size_t certain = 0;
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t y = 0; y < 8; ++y) {
                for (std::size_t x = 0; x < 8; ++x) {
                    const std::size_t i = (c * 8 + y) * 8 + x;
                    const int v = cmap.at(c, y, x);
                    wce += w.weights[i] * bce(mask.at(c, y, x), p.at(c, y, x));
                    ones += bce(mask.at(c, y, x), p.at(c, y, x));
                    sce += bce(v / 100.0, p.at(c, y, x));
                    if (v == 0 || v == 100) {
                        tri += bce(v / 100.0, p.at(c, y, x));
                        ++certain;
                    }
                }
            }
        }
        const double n = 6 * 64;
        CHECK(std::abs(weighted_ce(p, mask, w) - wce / n) < 1e-10);
        CHECK(std::abs(soft_ce(p, cmap) - sce / n) < 1e-10);
        const WeightMap unit{8, 8, std::vector<double>(6 * 64, 1.0)};
        CHECK(std::abs(weighted_ce(p, mask, unit) - ones / n) < 1e-12);
        const auto tl = trimap_loss(p, cmap);
        REQUIRE(tl.has_value() == (certain > 0));
        if (tl) CHECK(std::abs(*tl - tri / static_cast<double>(certain)) < 1e-10);
    }
}

TEST_CASE("rmse and classification scores") {
    CHECK(rmse(std::vector<double>{0.2, 0.4}, std::vector<double>{0.2, 0.4}) == 0.0);
    CHECK(rmse(std::vector<double>{0, 1}, std::vector<double>{1, 1}) == doctest::Approx(std::sqrt(0.5)));
    CHECK(rmse(std::vector<double>{0.3}, std::vector<double>{0.8}) == doctest::Approx(0.5));
    CHECK_THROWS(rmse(std::vector<double>{}, std::vector<double>{}));
    CHECK_THROWS(rmse(std::vector<double>{1}, std::vector<double>{1, 2}));

    const auto perfect = classification_scores(std::vector<int>{1, 0, 1}, std::vector<int>{1, 0, 1}, 1);
    CHECK(perfect.accuracy == 1.0);
    CHECK(*perfect.recall == 1.0);
    CHECK(*perfect.precision == 1.0);
    const auto s = classification_scores(std::vector<int>{1, 0, 0, 0}, std::vector<int>{1, 1, 0, 0}, 1);
    CHECK(s.accuracy == 0.75);
    CHECK(*s.recall == 0.5);
    CHECK(*s.precision == 1.0);
    const auto neg = classification_scores(std::vector<int>{0, 0}, std::vector<int>{1, 0}, 1);
    CHECK(*neg.recall == 0.0);
    CHECK_FALSE(neg.precision);
    CHECK_THROWS(classification_scores(std::vector<int>{}, std::vector<int>{}, 1));
}

TEST_CASE("summaries and formatting") {
    const auto s = summarize(std::vector<double>{1.0, 2.0, 3.0});
    CHECK(s.mean == 2.0);
    CHECK(s.stdev == doctest::Approx(1.0));
    CHECK(summarize(std::vector<double>{4.0}).stdev == 0.0);
    CHECK(summarize(std::vector<double>{}).count == 0);
    CHECK(format_metric(std::nullopt) == "NA");
    CHECK(format_metric(0.5, 3) == "0.500");
    const auto table = render_text_table({"a", "bb"}, {{"1", "2"}, {"333", "4"}});
    CHECK(table.find("333") != std::string::npos);
}

TEST_CASE("segmentation accumulator averages per image") {
    const auto cmap = testutil::plane_map(2, 2, {100, 100, 0, 0});
    const ConfidenceThreshold t(60);
    SegMetricAccumulator acc(t);
    auto perfect = ProbMap(2, 2, 0.0);
    perfect.values[0] = perfect.values[1] = 1.0;
    acc.add(perfect, cmap);
    acc.add(ProbMap(2, 2, 0.0), cmap);
    const auto row = acc.row();
    CHECK(acc.count() == 2);
    // Image 1: channel 0 IoU 1; image 2: 0.  Other channels have empty unions.
    CHECK(row.iou == doctest::Approx(0.5));
    REQUIRE(row.channel_iou[0]);
    CHECK(*row.channel_iou[0] == doctest::Approx(0.5));
    CHECK_FALSE(row.channel_iou[3]);
}
