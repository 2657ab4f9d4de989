#include "confseg/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace confseg::nn {

namespace {

struct Probe {
    double loss;
    std::uint64_t pattern;
};

Probe evaluate(const std::function<Tensor<double>()>& loss_fn) {
    NoGradGuard guard;
    ActivationTrace trace;
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw std::runtime_error("gradient_check: non-finite loss");
    return {v, trace.fingerprint()};
}

}  // namespace

GradCheckResult gradient_check(const std::function<Tensor<double>()>& loss_fn, const ParamList<double>& params,
                               double tolerance, double h) {
    for (auto p : params) p.tensor.zero_grad();
    auto loss = loss_fn();
    if (!std::isfinite(loss.item())) throw std::runtime_error("gradient_check: non-finite loss");
    loss.backward();
    const std::uint64_t base = evaluate(loss_fn).pattern;

    GradCheckResult result;
    for (auto p : params) {
        auto& t = p.tensor;
        const std::vector<double> analytic(t.grad().begin(), t.grad().end());
        auto data = t.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const auto up = evaluate(loss_fn);
            data[i] = saved - h;
            const auto down = evaluate(loss_fn);
            data[i] = saved;
            ++result.checked;
            if (up.pattern != base || down.pattern != base) {
                ++result.kinks_skipped;
                continue;
            }
            const double numeric = (up.loss - down.loss) / (2.0 * h);
            const double a = analytic[i];
            if (std::abs(a) + std::abs(numeric) <= 1e-10) continue;
            const double rel = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
            if (rel > result.worst_relative_error) {
                result.worst_relative_error = rel;
                result.worst_parameter = p.name;
                result.worst_index = i;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    result.passed = result.worst_relative_error <= tolerance &&
                    static_cast<double>(result.kinks_skipped) <= kMaxKinkFraction * static_cast<double>(result.checked);
    return result;
}

}  // namespace confseg::nn
