#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "confseg/phantom.hpp"
#include "confseg/segmodel.hpp"
#include "helpers.hpp"

using namespace confseg;

namespace {

/// Bright square on a dark background; the square is labelled 100 on every channel.
SegSample square_sample(std::size_t size = 32) {
    SegSample s{GrayImage(size, size), ConfidenceMap(size, size)};
    for (std::size_t y = 8; y < 20; ++y) {
        for (std::size_t x = 10; x < 24; ++x) {
            s.image.at(y, x) = 220;
            for (std::size_t c = 0; c < kChannels; ++c) s.label.set(c, y, x, 100);
        }
    }
    for (auto& p : s.image.pixels) p = std::max<std::uint8_t>(p, 20);
    return s;
}

std::vector<SegSample> phantom_samples(std::size_t n, std::uint64_t seed) {
    PhantomSpec spec;
    spec.width = spec.height = 48;
    spec.b_lines_max = 3;
    std::vector<SegSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto p = gen_image(seed + i, spec);
        out.push_back({std::move(p.image), std::move(p.label)});
    }
    return out;
}

}  // namespace

TEST_CASE("forward keeps spatial size and emits six channels") {
    const SegNet<float> net(1);
    const auto s = square_sample();
    const std::vector<const GrayImage*> ptrs{&s.image, &s.image};
    const auto y = net.forward(image_batch<float>(ptrs));
    CHECK(y.shape() == nn::Shape{2, 6, 32, 32});
    CHECK_THROWS_AS(net.forward(nn::Tensor<float>::zeros({1, 1, 36, 36})), nn::ShapeError);
    CHECK_THROWS_AS(net.forward(nn::Tensor<float>::zeros({1, 2, 32, 32})), nn::ShapeError);
}

TEST_CASE("zero head gives probability 0.5 everywhere") {
    SegNet<float> net(2);
    net.zero_head();
    const auto s = square_sample();
    const auto pred = infer_seg(nn::snapshot(net.parameters()), s.image);
    for (double v : pred.probs.values) CHECK(v == 0.5);
    for (auto b : pred.mask.bits) CHECK(b == 1);  // 0.5 >= 0.5
    CHECK_THROWS(infer_seg(nn::snapshot(net.parameters()), GrayImage(30, 30)));
}

TEST_CASE("checkpoint restores an identical model") {
    const SegNet<float> net(3);
    const auto back = SegNet<float>::from_checkpoint(nn::snapshot(net.parameters()));
    const auto s = square_sample();
    const auto a = predict(net, s.image);
    const auto b = predict(back, s.image);
    CHECK(a.values == b.values);
}

TEST_CASE("identity augmentation returns the input unchanged") {
    const auto s = phantom_samples(1, 4)[0];
    const auto out = apply_augment(s.image, s.label, AugmentParams{});
    CHECK(out.image == s.image);
    CHECK(out.label == s.label);
}

TEST_CASE("double horizontal flip is the identity") {
    const auto s = phantom_samples(1, 5)[0];
    AugmentParams flip;
    flip.flip = true;
    const auto once = apply_augment(s.image, s.label, flip);
    CHECK_FALSE(once.image == s.image);
    CHECK(once.image.at(3, 0) == s.image.at(3, 47));
    CHECK(once.label.at(2, 10, 0) == s.label.at(2, 10, 47));
    const auto twice = apply_augment(once.image, once.label, flip);
    CHECK(twice.image == s.image);
    CHECK(twice.label == s.label);
}

TEST_CASE("property: rotation introduces no new confidence values") {
    Rng rng(6);
    const auto samples = phantom_samples(10, 40);
    for (const auto& s : samples) {
        std::set<int> allowed(s.label.values().begin(), s.label.values().end());
        allowed.insert(0);
        for (int k = 0; k < 5; ++k) {
            AugmentParams p;
            p.angle_deg = uniform(rng, -15.0, 15.0);
            const auto out = apply_augment(s.image, s.label, p);
            for (auto v : out.label.values()) REQUIRE(allowed.count(v) == 1);
        }
    }
}

TEST_CASE("image and label share the geometric transform") {
    // 3x3 labelled block inside a 5x5 bright block; after any flip/rotation
    // every labelled pixel must still sit on non-zero image intensity.
    Rng rng(7);
    for (int k = 0; k < 200; ++k) {
        GrayImage img(32, 32);
        ConfidenceMap label(32, 32);
        const auto y = static_cast<std::size_t>(uniform_int(rng, 6, 25));
        const auto x = static_cast<std::size_t>(uniform_int(rng, 6, 25));
        for (std::size_t dy = 0; dy < 5; ++dy) {
            for (std::size_t dx = 0; dx < 5; ++dx) img.at(y + dy - 2, x + dx - 2) = 255;
        }
        for (std::size_t dy = 0; dy < 3; ++dy) {
            for (std::size_t dx = 0; dx < 3; ++dx) label.set(0, y + dy - 1, x + dx - 1, 100);
        }
        AugmentParams p;
        p.flip = bernoulli(rng, 0.5);
        p.angle_deg = uniform(rng, -15.0, 15.0);
        const auto out = apply_augment(img, label, p);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < 32 * 32; ++i) {
            if (out.label.values()[i] == 100) {
                ++hits;
                CHECK(out.image.pixels[i] > 0);
            }
        }
        CHECK(hits >= 1);
    }
}

TEST_CASE("intensity transform touches the image only and stays in range") {
    const auto s = phantom_samples(1, 8)[0];
    AugmentParams p;
    p.gain = 1.2;
    p.gamma = 0.8;
    const auto out = apply_augment(s.image, s.label, p);
    CHECK(out.label == s.label);
    CHECK_FALSE(out.image == s.image);
}

TEST_CASE("draw_augment consumes the same draws whatever the toggles") {
    Rng a(9), b(9);
    draw_augment(a, AugmentToggles{});
    draw_augment(b, AugmentToggles{false, false, false});
    CHECK(a() == b());
    Rng c(10);
    for (int i = 0; i < 100; ++i) {
        const auto p = draw_augment(c, AugmentToggles{false, false, false});
        CHECK_FALSE(p.flip);
        CHECK(p.angle_deg == 0.0);
        CHECK(p.gain == 1.0);
        CHECK(p.gamma == 1.0);
    }
    Rng d(11);
    for (int i = 0; i < 1000; ++i) {
        const auto p = draw_augment(d);
        CHECK(std::abs(p.angle_deg) <= 15.0);
        CHECK((p.gain >= 0.8 && p.gain <= 1.2));
        CHECK((p.gamma >= 0.8 && p.gamma <= 1.25));
    }
}

TEST_CASE("training is deterministic and selects the best epoch") {
    const auto train = phantom_samples(6, 100);
    const auto val = phantom_samples(3, 200);
    SegTrainConfig cfg;
    cfg.epochs = 4;
    cfg.lr = 1e-3;
    cfg.batch_size = 4;
    cfg.seed = 12;
    const auto a = train_seg(cfg, train, val);
    const auto b = train_seg(cfg, train, val);
    CHECK(a.train_loss == b.train_loss);
    CHECK(a.val_iou == b.val_iou);
    CHECK(a.step_loss == b.step_loss);
    REQUIRE(a.val_iou.size() == 4);
    const auto best = std::max_element(a.val_iou.begin(), a.val_iou.end());
    CHECK(a.best_epoch == static_cast<std::size_t>(best - a.val_iou.begin()));

    // The returned checkpoint reproduces the recorded IoU of its epoch.
    const auto model = SegNet<float>::from_checkpoint(a.checkpoint);
    CHECK(mean_macro_iou(predict(model, std::vector<GrayImage>{val[0].image, val[1].image, val[2].image}), val,
                         cfg.threshold) == doctest::Approx(a.val_iou[a.best_epoch]).epsilon(1e-9));
}

TEST_CASE("uniform weights reproduce the unweighted trainer's step losses") {
    const auto train = phantom_samples(4, 300);
    const auto val = phantom_samples(2, 400);
    SegTrainConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 1e-3;
    cfg.batch_size = 2;
    cfg.seed = 13;
    cfg.weighting = LossWeighting::Uniform;
    const auto u = train_seg(cfg, train, val);
    cfg.weighting = LossWeighting::Unweighted;
    const auto n = train_seg(cfg, train, val);
    REQUIRE(u.step_loss.size() == n.step_loss.size());
    for (std::size_t i = 0; i < u.step_loss.size(); ++i) CHECK(std::abs(u.step_loss[i] - n.step_loss[i]) < 1e-6);
}

TEST_CASE("threshold 100 on labels without certain pixels still trains") {
    auto train = phantom_samples(2, 500);
    for (auto& s : train) {
        std::vector<std::uint8_t> v(s.label.values().begin(), s.label.values().end());
        for (auto& x : v) x = std::min<std::uint8_t>(x, 80);
        s.label = ConfidenceMap(s.label.width(), s.label.height(), std::move(v));
    }
    SegTrainConfig cfg;
    cfg.threshold = ConfidenceThreshold(100);
    cfg.epochs = 2;
    cfg.lr = 1e-3;
    cfg.batch_size = 2;
    const auto r = train_seg(cfg, train, train);
    for (double v : r.val_iou) CHECK(std::isfinite(v));
    for (double v : r.train_loss) CHECK(std::isfinite(v));
}

TEST_CASE("training rejects bad inputs") {
    const auto s = phantom_samples(1, 600);
    SegTrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(train_seg(cfg, s, s), std::invalid_argument);
    cfg.epochs = 1;
    CHECK_THROWS_AS(train_seg(cfg, {}, s), std::invalid_argument);
    std::vector<SegSample> mixed = s;
    mixed.push_back(square_sample(40));
    CHECK_THROWS_AS(train_seg(cfg, mixed, s), std::invalid_argument);
}

TEST_CASE("overfit: one trivially separable image reaches IoU >= 0.9") {
    const auto s = square_sample();
    const std::vector<SegSample> one{s};
    SegTrainConfig cfg;
    cfg.threshold = ConfidenceThreshold(60);
    cfg.epochs = 30;
    cfg.lr = 1e-2;
    cfg.batch_size = 1;
    cfg.augment = AugmentToggles{false, false, false};
    const auto r = train_seg(cfg, one, one);
    CHECK(r.val_iou[r.best_epoch] >= 0.9);
    const auto pred = infer_seg(r.checkpoint, s.image);
    CHECK(iou(pred.mask, threshold_map(s.label, cfg.threshold)).macro >= 0.9);

    // Flip consistency is only a diagnostic: the network is not built to be equivariant.
    AugmentParams flip;
    flip.flip = true;
    const auto flipped = apply_augment(s.image, s.label, flip);
    const auto model = SegNet<float>::from_checkpoint(r.checkpoint);
    const auto a = predict(model, flipped.image);
    const auto b = predict(model, s.image);
    double diff = 0.0;
    for (std::size_t c = 0; c < kChannels; ++c) {
        for (std::size_t y = 0; y < 32; ++y) {
            for (std::size_t x = 0; x < 32; ++x) diff += std::abs(a.at(c, y, x) - b.at(c, y, 31 - x));
        }
    }
    MESSAGE("flip consistency: mean |infer(flip x) - flip(infer x)| = " << diff / (6.0 * 32 * 32));
}
