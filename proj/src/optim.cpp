#include "confseg/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace confseg::nn {

template <typename Real>
void adam_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> first_moment,
                 std::span<Real> second_moment, std::uint64_t step, const AdamConfig& cfg, double lr) {
    if (grad.size() != param.size() || first_moment.size() != param.size() || second_moment.size() != param.size()) {
        throw ShapeError("adam_update: parameter, gradient and moment sizes differ");
    }
    if (step == 0) throw std::invalid_argument("adam_update: step is 1-based");
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        const double m = cfg.beta1 * first_moment[i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * second_moment[i] + (1.0 - cfg.beta2) * g * g;
        first_moment[i] = static_cast<Real>(m);
        second_moment[i] = static_cast<Real>(v);
        const double m_hat = m / c1;
        const double v_hat = v / c2;
        param[i] = static_cast<Real>(param[i] - lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
}

template <typename Real>
Adam<Real>::Adam(ParamList<Real> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg), lr_(cfg.lr) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), Real(0));
        v_.emplace_back(p.tensor.numel(), Real(0));
    }
}

template <typename Real>
void Adam<Real>::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

template <typename Real>
void Adam<Real>::step() {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& t = params_[i].tensor;
        adam_update<Real>(t.data(), t.grad(), m_[i], v_[i], step_, cfg_, lr_);
    }
}

double LrSchedule::at(std::size_t t) const {
    std::size_t t_cur = t;
    std::size_t t_len = std::max<std::size_t>(period, 1);
    if (kind == Kind::Cosine) {
        t_cur = std::min(t, t_len);
    } else {
        const std::size_t mult = std::max<std::size_t>(period_mult, 1);
        while (t_cur >= t_len) {
            t_cur -= t_len;
            t_len *= mult;
        }
    }
    const double phase = std::numbers::pi * static_cast<double>(t_cur) / static_cast<double>(t_len);
    const double lr = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
    return std::clamp(lr, std::min(lr_min, lr_max), std::max(lr_min, lr_max));
}

template void adam_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                 std::uint64_t, const AdamConfig&, double);
template void adam_update<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                  std::uint64_t, const AdamConfig&, double);
template class Adam<float>;
template class Adam<double>;

}  // namespace confseg::nn
