#include <doctest.h>

#include <set>
#include <sstream>

#include "confseg/dataio.hpp"
#include "confseg/phantom.hpp"
#include "helpers.hpp"

using namespace confseg;

namespace {

FormatErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_cmap(bytes);
    } catch (const FormatError& e) {
        return e.code();
    }
    FAIL("decode_cmap accepted malformed input");
    return FormatErrorCode::BadHeader;
}

FormatErrorCode pgm_error(const std::string& text) {
    try {
        decode_pgm(std::vector<std::uint8_t>(text.begin(), text.end()));
    } catch (const FormatError& e) {
        return e.code();
    }
    FAIL("decode_pgm accepted malformed input");
    return FormatErrorCode::BadHeader;
}

}  // namespace

TEST_CASE("cmap 1x1 all zeros is a 17-byte header plus 6 payload bytes") {
    const ConfidenceMap m(1, 1);
    const auto bytes = encode_cmap(m);
    REQUIRE(bytes.size() == 17 + 6);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CMAP");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 1);   // width LE
    CHECK(bytes[9] == 1);   // height LE
    CHECK(bytes[13] == 6);  // channels LE
    CHECK(decode_cmap(bytes) == m);
}

TEST_CASE("cmap layout is channel-major then row-major") {
    ConfidenceMap m(3, 2);
    m.set(1, 1, 2, 77);
    const auto bytes = encode_cmap(m);
    CHECK(bytes[17 + (1 * 2 + 1) * 3 + 2] == 77);
}

TEST_CASE("cmap decode errors are distinct") {
    const auto good = encode_cmap(ConfidenceMap(2, 2));
    auto bad = good;
    bad[17] = 101;
    CHECK(decode_error(bad) == FormatErrorCode::ValueOutOfRange);
    bad = good;
    bad[0] = 'X';
    CHECK(decode_error(bad) == FormatErrorCode::BadMagic);
    bad = good;
    bad[4] = 2;
    CHECK(decode_error(bad) == FormatErrorCode::VersionMismatch);
    bad = good;
    bad.pop_back();
    CHECK(decode_error(bad) == FormatErrorCode::Truncated);
    CHECK(decode_error({'C', 'M'}) == FormatErrorCode::Truncated);
    bad = good;
    bad.push_back(0);
    CHECK(decode_error(bad) == FormatErrorCode::TrailingBytes);
}

TEST_CASE("cmap stream round trip on random maps") {
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const auto m = testutil::random_cmap(rng, 64, 64);
        std::stringstream ss;
        write_cmap(m, ss);
        CHECK(read_cmap(ss) == m);
    }
}

TEST_CASE("pgm examples") {
    GrayImage img(2, 2);
    img.pixels = {0, 255, 128, 7};
    const auto bytes = encode_pgm(img);
    CHECK(decode_pgm(bytes) == img);
    std::stringstream ss;
    write_pgm(img, ss);
    CHECK(read_pgm(ss) == img);

    CHECK(pgm_error("P5\n3 3\n255\n" + std::string(8, 'a')) == FormatErrorCode::Truncated);
    CHECK(pgm_error("P5\n1 1\n65535\nab") == FormatErrorCode::UnsupportedDepth);
    CHECK(pgm_error("P6\n1 1\n255\nabc") == FormatErrorCode::BadMagic);
}

TEST_CASE("pgm header comments are skipped") {
    const std::string text = "P5\n# made by hand\n2 1\n255\n\x01\x02";
    const auto img = decode_pgm(std::vector<std::uint8_t>(text.begin(), text.end()));
    CHECK(img.width == 2);
    CHECK(img.pixels == std::vector<std::uint8_t>{1, 2});
}

TEST_CASE("file helpers write atomically and round trip") {
    const auto dir = testutil::temp_dir("dataio");
    Rng rng(9);
    const auto m = testutil::random_cmap(rng, 7, 5);
    save_cmap(dir / "a.cmap", m);
    CHECK(load_cmap(dir / "a.cmap") == m);
    save_cmap(dir / "a.cmap", ConfidenceMap(7, 5));
    CHECK(load_cmap(dir / "a.cmap") == ConfidenceMap(7, 5));
    for (const auto& e : std::filesystem::directory_iterator(dir)) CHECK(e.path().filename() == "a.cmap");
    CHECK_THROWS(load_cmap(dir / "missing.cmap"));
}

TEST_CASE("views and zones") {
    CHECK(zone_of(View::R1) == 1);
    CHECK(zone_of(View::L1) == 1);
    CHECK(zone_of(View::R2) == 2);
    CHECK(zone_of(View::L3) == 3);
    for (auto v : kViews) CHECK(parse_view(view_name(v)) == v);
    CHECK_THROWS(parse_view("R4"));
}

TEST_CASE("manifest JSON round trip and validation") {
    const auto m = plan_cohort(3, 8, PhantomSpec{});
    validate(m);
    const auto back = manifest_from_json(to_json(m));
    CHECK(to_json(back) == to_json(m));

    auto bad = m;
    bad.patients[0].days.resize(1);
    CHECK_THROWS_AS(validate(bad), FormatError);
    bad = m;
    bad.patients[0].days[0].sf_ratio_normalized = 1.5;
    CHECK_THROWS_AS(validate(bad), FormatError);
    bad = m;
    bad.patients[0].days[0].videos[0].zone = 3;  // R1 is zone 1
    CHECK_THROWS_AS(validate(bad), FormatError);
}

TEST_CASE("split_folds: 42 patients, 6 folds, 4 test") {
    const auto m = plan_cohort(1, 42, PhantomSpec{});
    const auto s = split_folds(m, 6, 4, 7);
    CHECK(s.held_out_test.size() == 4);
    REQUIRE(s.folds.size() == 5);
    std::size_t total = 0;
    std::size_t lo = 100, hi = 0;
    std::set<std::string> seen(s.held_out_test.begin(), s.held_out_test.end());
    for (const auto& f : s.folds) {
        total += f.size();
        lo = std::min(lo, f.size());
        hi = std::max(hi, f.size());
        for (const auto& p : f) CHECK(seen.insert(p).second);
    }
    CHECK(total == 38);
    CHECK(hi - lo <= 1);
    CHECK(seen.size() == 42);
    validate(s);

    const auto again = split_folds(m, 6, 4, 7);
    CHECK(to_json(again) == to_json(s));
    CHECK(to_json(split_folds(m, 6, 4, 8)) != to_json(s));
    CHECK(to_json(fold_split_from_json(to_json(s))) == to_json(s));

    const auto train = s.train_patients(0);
    CHECK(train.size() == 38 - s.folds[0].size());
    for (const auto& p : s.val_patients(0)) CHECK(std::find(train.begin(), train.end(), p) == train.end());
}

TEST_CASE("split_folds: too few patients") {
    const auto m = plan_cohort(1, 6, PhantomSpec{});
    CHECK_THROWS_AS(split_folds(m, 6, 1, 0), std::invalid_argument);
    auto five = m;
    five.patients.resize(5);
    CHECK_THROWS_AS(split_folds(five, 6, 0, 0), std::invalid_argument);
}
