#include "confseg/gradsuite.hpp"

#include "confseg/downstream.hpp"
#include "confseg/random.hpp"
#include "confseg/segmodel.hpp"

namespace confseg {

using nn::Tensor;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(nn::Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
    std::vector<double> v(nn::numel(shape));
    for (auto& x : v) x = normal(rng, 0.0, scale);
    return T64::from(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(rng, lo, hi);
    return v;
}

/// loss = mse(f(), random targets) so every output element gets a distinct weight.
std::function<T64()> via_mse(std::function<T64()> f, Rng& rng) {
    const auto probe = [&] {
        nn::NoGradGuard guard;
        return f().numel();
    }();
    auto targets = std::make_shared<std::vector<double>>(random_values(probe, rng));
    return [f = std::move(f), targets] { return nn::mse_loss<double>(f(), *targets); };
}

}  // namespace

std::vector<GradSuiteEntry> run_gradcheck_suite(double tolerance, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x67ad));
    std::vector<GradSuiteEntry> out;
    auto check = [&](const std::string& name, const std::function<T64()>& loss, const nn::ParamList<double>& params) {
        out.push_back({name, nn::gradient_check(loss, params, tolerance)});
    };

    {
        const std::size_t n = 2, c = static_cast<std::size_t>(uniform_int(rng, 1, 3));
        const std::size_t o = static_cast<std::size_t>(uniform_int(rng, 2, 4));
        const std::size_t h = static_cast<std::size_t>(uniform_int(rng, 5, 8));
        const std::size_t w = static_cast<std::size_t>(uniform_int(rng, 5, 8));
        auto x = random_tensor({n, c, h, w}, rng);
        auto k3 = random_tensor({o, c, 3, 3}, rng);
        auto k1 = random_tensor({o, c, 1, 1}, rng);
        auto b = random_tensor({o}, rng);
        nn::ParamList<double> p3{{"x", x}, {"w", k3}, {"b", b}};
        check("conv2d 3x3", via_mse([=] { return nn::conv2d(x, k3, b); }, rng), p3);
        check("conv2d 3x3 stride 2", via_mse([=] { return nn::conv2d(x, k3, b, 2); }, rng), p3);
        check("conv2d 3x3 pad 0", via_mse([=] { return nn::conv2d(x, k3, b, 1, 0); }, rng), p3);
        check("conv2d 1x1", via_mse([=] { return nn::conv2d(x, k1, b, 1, 0); }, rng), {{"x", x}, {"w", k1}, {"b", b}});
    }
    {
        auto x = random_tensor({2, 3, 4, 5}, rng);
        check("relu", via_mse([=] { return nn::relu(x); }, rng), {{"x", x}});
        check("sigmoid", via_mse([=] { return nn::sigmoid(x); }, rng), {{"x", x}});
        check("upsample_nearest2x", via_mse([=] { return nn::upsample_nearest2x(x); }, rng), {{"x", x}});
        check("global_avg_pool", via_mse([=] { return nn::global_avg_pool(x); }, rng), {{"x", x}});
        check("reshape", via_mse([=] { return nn::reshape(x, {6, 20}); }, rng), {{"x", x}});
        check("sum", [=] { return nn::sum(nn::sigmoid(x)); }, {{"x", x}});
        auto y = random_tensor({2, 3, 4, 5}, rng);
        check("add", via_mse([=] { return nn::add(x, y); }, rng), {{"x", x}, {"y", y}});
        check("sub", via_mse([=] { return nn::sub(x, y); }, rng), {{"x", x}, {"y", y}});
    }
    {
        const std::size_t n = static_cast<std::size_t>(uniform_int(rng, 2, 5));
        auto x = random_tensor({n, 6}, rng);
        auto w = random_tensor({4, 6}, rng);
        auto b = random_tensor({4}, rng);
        check("linear", via_mse([=] { return nn::linear(x, w, b); }, rng), {{"x", x}, {"w", w}, {"b", b}});
        check("mean_rows", via_mse([=] { return nn::mean_rows(x); }, rng), {{"x", x}});
        auto z = random_tensor({3, 6}, rng);
        check("concat_rows", via_mse([=] { return nn::concat_rows<double>({x, z, x}); }, rng), {{"x", x}, {"z", z}});
    }
    {
        const std::size_t t = static_cast<std::size_t>(uniform_int(rng, 2, 5));
        auto x = random_tensor({t, 8, 3, 3}, rng);
        check("temporal_shift", via_mse([=] { return nn::temporal_shift(x); }, rng), {{"x", x}});
        auto x2 = random_tensor({t, 16, 2, 2}, rng);
        check("temporal_shift 1/4", via_mse([=] { return nn::temporal_shift(x2, 0.25); }, rng), {{"x", x2}});
    }
    {
        auto z = random_tensor({2, 3, 4, 4}, rng, true, 2.0);
        std::vector<double> y(z.numel());
        for (auto& v : y) v = bernoulli(rng, 0.4) ? 1.0 : 0.0;
        const auto w = random_values(z.numel(), rng, 0.2, 1.0);
        check("weighted_bce_loss", [=] { return nn::weighted_bce_loss<double>(z, y, w); }, {{"z", z}});
        check("bce_loss", [=] { return nn::bce_loss<double>(z, y); }, {{"z", z}});
        const auto t = random_values(z.numel(), rng);
        check("mse_loss", [=] { return nn::mse_loss<double>(z, t); }, {{"z", z}});
        auto logits = random_tensor({5, 3}, rng);
        const std::vector<int> labels = {0, 2, 1, 1, 0};
        check("softmax_cross_entropy", [=] { return nn::softmax_cross_entropy<double>(logits, labels); },
              {{"logits", logits}});
    }
    {
        // Tiny FPN with the confidence-weighted loss at t = 60.
        SegNet<double> net(derive_seed(seed, 1));
        const std::size_t H = 16;
        const std::size_t W = 16;
        GrayImage img(W, H);
        ConfidenceMap cmap(W, H);
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(uniform_int(rng, 0, 255));
        for (std::size_t c = 0; c < kChannels; ++c) {
            for (std::size_t y = 0; y < H; ++y) {
                for (std::size_t x = 0; x < W; ++x) cmap.set(c, y, x, kThresholdLevels[static_cast<std::size_t>(uniform_int(rng, 0, 6))]);
            }
        }
        const ConfidenceThreshold t(60);
        const auto mask = threshold_map(cmap, t);
        const auto weights = compute_weights(cmap, t, mask);
        std::vector<double> y(mask.bits.begin(), mask.bits.end());
        const std::vector<const GrayImage*> ptrs{&img};
        const auto input = image_batch<double>(ptrs);
        check("tiny FPN + weighted loss",
              [=] { return nn::weighted_bce_loss<double>(net.forward(input), y, weights.weights); }, net.parameters());
    }
    {
        // Video encoder with the change head (late fusion) and the regression head.
        VideoEncoder<double> enc(derive_seed(seed, 2));
        Mlp<double> change(kChangeHeadWidths, derive_seed(seed, 3));
        Mlp<double> reg(kRegressionHeadWidths, derive_seed(seed, 4));
        auto a = random_tensor({3, kFusedChannels, 8, 8}, rng, false, 0.5);
        auto b = random_tensor({3, kFusedChannels, 8, 8}, rng, false, 0.5);
        auto params = enc.parameters();
        const auto hp = change.parameters("head.");
        params.insert(params.end(), hp.begin(), hp.end());
        const std::vector<int> label = {2};
        check("video encoder + change head",
              [=] { return nn::softmax_cross_entropy<double>(sf_change_forward(enc, change, a, b), label); }, params);
        auto rparams = enc.parameters();
        const auto rp = reg.parameters("head.");
        rparams.insert(rparams.end(), rp.begin(), rp.end());
        const std::vector<double> target = {0.4};
        check("video encoder + regression head",
              [=] { return nn::mse_loss<double>(sf_regress_forward(enc, reg, a), target); }, rparams);
    }
    return out;
}

}  // namespace confseg
