#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>

#include "confseg/phantom.hpp"
#include "helpers.hpp"

using namespace confseg;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

/// Median intensity of the unlabelled pixels (zero confidence on every
/// channel) in the (2r+1)^2 window around (y, x); nullopt if there are fewer
/// than `min_count`.
std::optional<double> background_median(const PhantomImage& p, std::size_t y, std::size_t x, std::size_t r,
                                        std::size_t min_count = 16) {
    std::vector<int> v;
    const auto& img = p.image;
    const std::size_t y0 = y >= r ? y - r : 0, x0 = x >= r ? x - r : 0;
    for (std::size_t yy = y0; yy <= std::min(img.height - 1, y + r); ++yy) {
        for (std::size_t xx = x0; xx <= std::min(img.width - 1, x + r); ++xx) {
            bool labelled = false;
            for (std::size_t c = 0; c < kChannels; ++c) labelled = labelled || p.label.at(c, yy, xx) > 0;
            if (!labelled) v.push_back(img.at(yy, xx));
        }
    }
    if (v.size() < min_count) return std::nullopt;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    return v[v.size() / 2];
}

}  // namespace

TEST_CASE("spec validation") {
    PhantomSpec s;
    validate(s);
    s.width = 16;
    CHECK_THROWS_AS(validate(s), std::invalid_argument);
    s = PhantomSpec{};
    s.b_lines_max = 7;
    CHECK_THROWS_AS(validate(s), std::invalid_argument);
    s = PhantomSpec{};
    s.a_lines_min = 3;
    s.a_lines_max = 2;
    CHECK_THROWS_AS(validate(s), std::invalid_argument);
    CHECK_THROWS_AS(gen_image(0, PhantomSpec{}, 7), std::invalid_argument);
}

TEST_CASE("same seed gives bitwise-identical image and label") {
    const PhantomSpec spec;
    const auto a = gen_image(42, spec);
    const auto b = gen_image(42, spec);
    CHECK(a.image == b.image);
    CHECK(a.label == b.label);
    CHECK_FALSE(gen_image(43, spec).image == a.image);
    const auto va = gen_video(5, spec, 3);
    const auto vb = gen_video(5, spec, 3);
    CHECK(va.frames == vb.frames);
    CHECK(va.label == vb.label);
    CHECK(va.frames.size() == spec.frames);
}

TEST_CASE("no vertical lines means an empty vertical_line channel") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = gen_image(seed, PhantomSpec{}, 0);
        const auto plane = p.label.plane(static_cast<std::size_t>(Channel::VerticalLine));
        CHECK(std::all_of(plane.begin(), plane.end(), [](auto v) { return v == 0; }));
    }
    const auto p = gen_image(1, PhantomSpec{}, 4);
    const auto plane = p.label.plane(static_cast<std::size_t>(Channel::VerticalLine));
    CHECK(std::count(plane.begin(), plane.end(), 100) > 0);
}

TEST_CASE("labels use the falloff grid and cores survive t=100") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = gen_image(seed, PhantomSpec{});
        for (auto v : p.label.values()) REQUIRE((v == 0 || v == 20 || v == 40 || v == 60 || v == 80 || v == 100));
        const auto mask = threshold_map(p.label, ConfidenceThreshold(100));
        for (std::size_t i = 0; i < mask.bits.size(); ++i) REQUIRE(mask.bits[i] == (p.label.values()[i] == 100 ? 1 : 0));
        // The pleura (sharp or fuzzy) and the fascia band are always present.
        const auto count100 = [&](Channel c) {
            const auto pl = p.label.plane(static_cast<std::size_t>(c));
            return std::count(pl.begin(), pl.end(), 100);
        };
        CHECK(count100(Channel::SharpPleura) + count100(Channel::FuzzyPleura) > 0);
        CHECK(count100(Channel::FasciaBand) > 0);
        // Confidence steps down by one level per pixel of distance.
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t y = 0; y < 64; ++y) {
                for (std::size_t x = 1; x < 64; ++x) REQUIRE(std::abs(p.label.at(c, y, x) - p.label.at(c, y, x - 1)) <= 20);
            }
        }
    }
}

TEST_CASE("property: certain bright-structure pixels are brighter than the local background") {
    const std::array<Channel, 5> bright = {Channel::SharpPleura, Channel::FuzzyPleura, Channel::FasciaBand, Channel::ALine,
                                           Channel::VerticalLine};
    std::size_t total = 0, above = 0;
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_channel;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto p = gen_image(seed, PhantomSpec{});
        for (auto ch : bright) {
            const auto c = static_cast<std::size_t>(ch);
            for (std::size_t y = 0; y < 64; ++y) {
                for (std::size_t x = 0; x < 64; ++x) {
                    if (p.label.at(c, y, x) != 100) continue;
                    // Grow the window until it holds enough background.
                    std::optional<double> bg;
                    for (std::size_t r = 4; !bg && r < 64; r += 2) bg = background_median(p, y, x, r);
                    REQUIRE(bg);
                    const bool ok = p.image.at(y, x) > *bg;
                    ++total;
                    above += ok;
                    ++per_channel[c].first;
                    per_channel[c].second += ok;
                }
            }
        }
    }
    for (const auto& [c, n] : per_channel) {
        MESSAGE(kChannelNames[c] << ": " << n.second << "/" << n.first);
    }
    REQUIRE(total > 0);
    CHECK(static_cast<double>(above) / static_cast<double>(total) >= 0.95);
}

TEST_CASE("cohort of 42 patients lists 504 videos and writes them") {
    const PhantomSpec spec;
    const auto plan = plan_cohort(3, 42, spec);
    validate(plan);
    CHECK(plan.patients.size() == 42);
    CHECK(plan.video_count() == 504);

    const auto dir = testutil::temp_dir("phantom_cohort");
    PhantomSpec small;
    small.frames = 2;
    const auto m = gen_cohort(4, 6, small, dir, {}, 2);
    validate(m);
    CHECK(to_json(m) == to_json(plan_cohort(4, 6, small)));
    const auto again = load_manifest(dir / "cohort.json");
    CHECK(to_json(again) == to_json(m));
    const auto& v = m.patients[2].days[1].videos[4];
    REQUIRE(v.image_refs.size() == 2);
    const auto img = load_pgm(dir / v.image_refs[1]);
    CHECK(img.width == 64);
    const auto label = load_cmap(dir / v.label_ref);
    const auto video = gen_video(video_seed(4, 2, 1, 4), small, v.b_lines);
    CHECK(label == video.label);
    CHECK(img == video.frames[1]);
    CHECK_THROWS_AS(plan_cohort(0, 5, spec), std::invalid_argument);
}

TEST_CASE("planted link: views share the day's burden and sf is reproducible") {
    const auto m = plan_cohort(9, 50, PhantomSpec{});
    for (const auto& p : m.patients) {
        for (const auto& d : p.days) {
            CHECK(d.sf_ratio_normalized == m.link.sf_from(d.b_line_burden, d.eta));
            CHECK((d.sf_ratio_normalized >= 0.05 && d.sf_ratio_normalized <= 1.0));
            for (const auto& v : d.videos) CHECK(std::abs(v.b_lines - d.b_line_burden) <= 1);
        }
    }
    const PlantedLinkParams link;
    CHECK(link.sf_from(0, 0.0) == doctest::Approx(0.95));
    CHECK(link.sf_from(3, 0.01) == doctest::Approx(0.66));
    CHECK(link.sf_from(6, -0.5) == 0.05);
    CHECK(link.sf_from(0, 0.2) == 1.0);
    CHECK(link.readmit_probability(2) == doctest::Approx(0.35));
}

TEST_CASE("burden and sf correlate strongly over 200 patients") {
    const auto m = plan_cohort(11, 200, PhantomSpec{});
    std::vector<double> k, sf;
    std::size_t readmitted = 0;
    for (const auto& p : m.patients) {
        for (const auto& d : p.days) {
            k.push_back(d.b_line_burden);
            sf.push_back(d.sf_ratio_normalized);
        }
        readmitted += p.readmission_flag;
    }
    const double r = pearson(k, sf);
    MESSAGE("pearson(k, sf) = " << r);
    CHECK(r < -0.8);
    CHECK(readmitted > 0);
    CHECK(readmitted < 200);
}
