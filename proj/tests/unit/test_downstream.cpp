#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "confseg/downstream.hpp"
#include "helpers.hpp"

using namespace confseg;

namespace {

std::vector<std::string> ids(const CohortManifest& m, std::size_t first, std::size_t count) {
    std::vector<std::string> out;
    for (std::size_t i = first; i < first + count; ++i) out.push_back(m.patients.at(i).patient_id);
    return out;
}

double sf_of(const CohortManifest& m, const VideoKey& k) { return m.patients[k.patient].days[k.day].sf_ratio_normalized; }
int zone_at(const CohortManifest& m, const VideoKey& k) { return m.patients[k.patient].days[k.day].videos[k.view].zone; }

/// Reference vote: count argmax votes; on a split compare logit sums.
int vote_oracle(const std::vector<std::array<double, 2>>& logits) {
    int ones = 0;
    double s0 = 0, s1 = 0;
    for (const auto& l : logits) {
        ones += l[1] > l[0] ? 1 : 0;
        s0 += l[0];
        s1 += l[1];
    }
    const int zeros = static_cast<int>(logits.size()) - ones;
    if (ones != zeros) return ones > zeros ? 1 : 0;
    return s1 > s0 ? 1 : 0;
}

PhantomSpec small_spec() {
    PhantomSpec s;
    s.width = s.height = 48;
    s.frames = 4;
    return s;
}

}  // namespace

TEST_CASE("label_pair and collapse_2class") {
    CHECK(label_pair(0.8, 0.6) == ChangeClass::Decrease);
    CHECK(label_pair(0.5, 0.5) == ChangeClass::Same);
    CHECK(label_pair(0.3, 0.9) == ChangeClass::Increase);
    CHECK(label_pair(0.5, 0.5 + 1e-12) == ChangeClass::Same);
    CHECK(collapse_2class(ChangeClass::Decrease) == BinaryChange::NotIncrease);
    CHECK(collapse_2class(ChangeClass::Same) == BinaryChange::NotIncrease);
    CHECK(collapse_2class(ChangeClass::Increase) == BinaryChange::Increase);
}

TEST_CASE("test pairs: 2 patients x 2 days x 6 views gives 36 within-patient pairs") {
    const auto m = plan_cohort(1, 6, PhantomSpec{});
    const auto two = ids(m, 0, 2);
    const auto pairs = build_pairs(m, two, PairRole::Test, 0, 0);
    CHECK(pairs.size() == 36);
    std::set<std::pair<VideoKey, VideoKey>> seen;
    for (const auto& p : pairs) {
        CHECK(p.a.patient == p.b.patient);
        CHECK(zone_at(m, p.a) == zone_at(m, p.b));
        CHECK(std::tie(p.a.day, p.a.view) < std::tie(p.b.day, p.b.view));
        CHECK(p.label == label_pair(sf_of(m, p.a), sf_of(m, p.b)));
        CHECK(seen.insert({p.a, p.b}).second);
    }
    CHECK_THROWS_AS(build_pairs(m, std::vector<std::string>{"nobody"}, PairRole::Val, 0, 0), std::invalid_argument);
}

TEST_CASE("train pairs: every same-zone pair, capped reproducibly") {
    const auto m = plan_cohort(2, 6, PhantomSpec{});
    const auto all = ids(m, 0, 6);
    const auto pairs = build_pairs(m, all, PairRole::Train, 3, 0);
    // Per zone: 6 patients x 2 days x 2 views = 24 videos, C(24, 2) pairs.
    CHECK(pairs.size() == 3 * 276);
    std::size_t cross_patient = 0;
    for (const auto& p : pairs) {
        CHECK(zone_at(m, p.a) == zone_at(m, p.b));
        CHECK_FALSE(p.a == p.b);
        CHECK(p.label == label_pair(sf_of(m, p.a), sf_of(m, p.b)));
        cross_patient += p.a.patient != p.b.patient;
    }
    CHECK(cross_patient > 0);

    const auto capped = build_pairs(m, all, PairRole::Train, 3, 100);
    CHECK(capped.size() == 100);
    const auto again = build_pairs(m, all, PairRole::Train, 3, 100);
    const auto other = build_pairs(m, all, PairRole::Train, 4, 100);
    bool same = true, differs = false;
    for (std::size_t i = 0; i < 100; ++i) {
        same = same && capped[i].a == again[i].a && capped[i].b == again[i].b;
        differs = differs || !(capped[i].a == other[i].a && capped[i].b == other[i].b);
    }
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("property: pair hygiene over every generated pair") {
    const auto m = plan_cohort(5, 12, PhantomSpec{});
    for (auto role : {PairRole::Train, PairRole::Val, PairRole::Test}) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const auto pairs = build_pairs(m, ids(m, 0, 12), role, seed, role == PairRole::Train ? 500 : 0);
            for (const auto& p : pairs) {
                REQUIRE(zone_at(m, p.a) == zone_at(m, p.b));
                if (role != PairRole::Train) REQUIRE(p.a.patient == p.b.patient);
            }
        }
    }
}

TEST_CASE("aggregate_views") {
    const std::vector<double> four{0.2, 0.4, 0.6, 0.8};
    CHECK(aggregate_views(four, AggregateMode::Median) == doctest::Approx(0.5));
    CHECK(aggregate_views(four, AggregateMode::Avg) == doctest::Approx(0.5));
    const std::vector<double> three{0.2, 0.5, 0.3};
    CHECK(aggregate_views(three, AggregateMode::Max) == 0.5);
    CHECK(aggregate_views(three, AggregateMode::Median) == 0.3);
    CHECK_THROWS_AS(aggregate_views(std::vector<double>{}, AggregateMode::Avg), std::invalid_argument);
    for (auto mode : {AggregateMode::Avg, AggregateMode::Median, AggregateMode::Max}) {
        CHECK(parse_aggregate(aggregate_name(mode)) == mode);
    }
    CHECK_THROWS(parse_aggregate("mode"));

    Rng rng(8);
    for (int i = 0; i < 1000; ++i) {
        const double v = uniform01(rng);
        const std::vector<double> same(static_cast<std::size_t>(uniform_int(rng, 1, 6)), v);
        for (auto mode : {AggregateMode::Avg, AggregateMode::Median, AggregateMode::Max}) {
            REQUIRE(aggregate_views(same, mode) == doctest::Approx(v).epsilon(1e-15));
        }
    }
}

TEST_CASE("majority_vote examples") {
    auto votes = [](std::initializer_list<int> v) {
        std::vector<std::array<double, 2>> out;
        for (int c : v) out.push_back(c == 1 ? std::array<double, 2>{0.0, 1.0} : std::array<double, 2>{1.0, 0.0});
        return out;
    };
    CHECK(majority_vote(votes({1, 1, 0, 0, 1, 1})) == 1);
    CHECK(majority_vote(votes({0, 0, 0, 0, 0, 0})) == 0);

    // Split vote: class-1 logits sum to 3.2, class-0 logits to 2.9.
    const std::vector<std::array<double, 2>> split = {{0.1, 1.0}, {0.2, 1.0}, {0.3, 1.0},
                                                      {0.8, 0.1}, {0.7, 0.0}, {0.8, 0.1}};
    CHECK(majority_vote(split) == 1);

    // Unanimous votes win whatever the logit sums say.
    const std::vector<std::array<double, 2>> unanimous = {{0.0, 0.1}, {0.0, 0.1}, {0.0, 0.1},
                                                          {0.0, 0.1}, {0.0, 0.1}, {-50.0, -49.9}};
    CHECK(majority_vote(unanimous) == 1);
    CHECK_THROWS_AS(majority_vote(std::vector<std::array<double, 2>>{}), std::invalid_argument);
}

TEST_CASE("property: majority_vote matches the oracle over all 2^6 vote vectors") {
    Rng rng(9);
    for (int rep = 0; rep < 20; ++rep) {
        for (int bits = 0; bits < 64; ++bits) {
            std::vector<std::array<double, 2>> logits;
            for (int v = 0; v < 6; ++v) {
                const double lo = uniform(rng, -3.0, 3.0);
                const double gap = uniform(rng, 0.01, 3.0);
                logits.push_back(((bits >> v) & 1) ? std::array<double, 2>{lo, lo + gap}
                                                   : std::array<double, 2>{lo + gap, lo});
            }
            REQUIRE(majority_vote(logits) == vote_oracle(logits));
        }
    }
}

TEST_CASE("fused store channels") {
    const auto data = render_cohort(3, 6, small_spec());
    const VideoKey k{1, 0, 2};
    const FusedStore oracle(data, SegSourceKind::Oracle);
    const auto x = oracle.fused<float>(k);
    CHECK(x.shape() == nn::Shape{4, 7, 48, 48});
    for (float v : x.data()) REQUIRE((v >= 0.0f && v <= 1.0f));
    const auto& clip = data.video(k);
    const std::size_t plane = 48 * 48;
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t i = 0; i < plane; ++i) {
            REQUIRE(x.data()[t * 7 * plane + i] == doctest::Approx(clip.frames[t].pixels[i] / 255.0));
            for (std::size_t c = 0; c < kChannels; ++c) {
                REQUIRE(std::abs(x.data()[(t * 7 + 1 + c) * plane + i] - clip.label.values()[c * plane + i] / 100.0) <=
                        0.5 / 255.0 + 1e-6);
            }
        }
    }
    const FusedStore none(data, SegSourceKind::None);
    const auto z = none.fused<float>(k);
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t i = plane; i < 7 * plane; ++i) REQUIRE(z.data()[t * 7 * plane + i] == 0.0f);
    }
    CHECK_THROWS(FusedStore(data, SegSourceKind::Model, nullptr));
    CHECK(parse_seg_source(seg_source_name(SegSourceKind::Oracle)) == SegSourceKind::Oracle);
}

TEST_CASE("identical videos give the head bias and swapping negates the difference") {
    const auto data = render_cohort(4, 6, small_spec());
    const FusedStore store(data, SegSourceKind::Oracle);
    const VideoEncoder<float> enc(5);
    Mlp<float> head(kChangeHeadWidths, 6);
    const std::vector<float> bias{0.25f, -0.5f, 1.0f};
    head.set_output_bias(bias);
    const auto a = store.fused<float>({0, 0, 0});
    const auto b = store.fused<float>({0, 1, 3});
    nn::NoGradGuard guard;
    const auto same = sf_change_forward(enc, head, a, a);
    for (std::size_t i = 0; i < 3; ++i) CHECK(same.data()[i] == bias[i]);
    const auto ab = sf_change_forward(enc, head, a, b);
    const auto ba = sf_change_forward(enc, head, b, a);
    for (std::size_t i = 0; i < 3; ++i) CHECK((ab.data()[i] - bias[i]) == doctest::Approx(-(ba.data()[i] - bias[i])).epsilon(1e-4));

    // Encoder output does not depend on the number of frames.
    CHECK(enc.forward(a).shape() == nn::Shape{1, 32});
}

TEST_CASE("zero weights give the output bias") {
    const auto data = render_cohort(4, 6, small_spec());
    const FusedStore store(data, SegSourceKind::Oracle);
    const VideoEncoder<float> enc(7);
    Mlp<float> head(kRegressionHeadWidths, 8);
    head.zero_weights();
    const std::vector<float> bias{0.37f};
    head.set_output_bias(bias);
    nn::NoGradGuard guard;
    for (std::size_t v = 0; v < 6; ++v) {
        const auto y = sf_regress_forward(enc, head, store.fused<float>({2, 1, v}));
        CHECK(y.data()[0] == 0.37f);
    }
}

TEST_CASE("overfit: 50 planted pairs reach 3-class accuracy >= 0.9") {
    const auto data = render_cohort(10, 6, small_spec());
    const FusedStore store(data, SegSourceKind::Oracle);
    const auto patients = ids(data.manifest, 0, 6);
    TaskTrainConfig cfg;
    cfg.epochs = 60;
    cfg.lr = 3e-3;
    cfg.batch_size = 10;
    cfg.seed = 1;
    cfg.train_pair_cap = 50;
    cfg.val_pair_cap = 20;
    const auto r = train_sf_change(cfg, store, patients, patients);
    const auto pairs = build_pairs(data.manifest, patients, PairRole::Train, cfg.seed, cfg.train_pair_cap);
    MESSAGE("final train loss " << r.train_loss.back());
    const auto m = eval_sf_change(r.final_checkpoint, store, pairs);
    MESSAGE("accuracy on the training pairs: " << m.accuracy3);
    CHECK(m.pairs == 50);
    CHECK(m.accuracy3 >= 0.9);
}

TEST_CASE("overfit: one patient's S/F is recovered to within 0.02") {
    const auto data = render_cohort(11, 6, small_spec());
    const FusedStore store(data, SegSourceKind::Oracle);
    const auto one = ids(data.manifest, 0, 1);
    TaskTrainConfig cfg;
    cfg.epochs = 60;
    cfg.lr = 1e-3;
    cfg.batch_size = 6;
    cfg.seed = 2;
    const auto r = train_sf_regress(cfg, store, one, one);
    const auto m = eval_sf_regress(r.checkpoint, store, one, AggregateMode::Avg);
    REQUIRE(m.predictions.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        MESSAGE("day " << i << ": pred " << m.predictions[i] << " target " << m.targets[i]);
        CHECK(std::abs(m.predictions[i] - m.targets[i]) <= 0.02);
    }
}

TEST_CASE("readmission training is deterministic and evaluates every patient") {
    const auto data = render_cohort(12, 6, small_spec());
    const FusedStore store(data, SegSourceKind::Oracle);
    const auto train = ids(data.manifest, 0, 4);
    const auto val = ids(data.manifest, 4, 2);
    TaskTrainConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 1e-3;
    cfg.batch_size = 4;
    const auto a = train_readmission(cfg, store, train, val);
    const auto b = train_readmission(cfg, store, train, val);
    CHECK(a.train_loss == b.train_loss);
    CHECK(a.val_score == b.val_score);
    const auto m = eval_readmission(a.checkpoint, store, val);
    CHECK(m.patients == 2);
    CHECK((m.accuracy >= 0.0 && m.accuracy <= 1.0));

    const auto change = train_sf_change(cfg, store, train, val);
    const auto warm = train_readmission(cfg, store, train, val, &change.checkpoint);
    CHECK(warm.train_loss.size() == 2);
    CHECK(warm.train_loss != a.train_loss);
}
