#pragma once

// Adam with bias correction, cosine learning-rate schedules, and the
// named-parameter list that models expose to optimizers and checkpoints.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "confseg/tensor.hpp"

namespace confseg::nn {

template <typename Real>
struct NamedParam {
    std::string name;
    Tensor<Real> tensor;
};

template <typename Real>
using ParamList = std::vector<NamedParam<Real>>;

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update of `param` in place.  `step` is the 1-based
/// update count after this step.  Throws ShapeError on size mismatch.
template <typename Real>
void adam_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> first_moment,
                 std::span<Real> second_moment, std::uint64_t step, const AdamConfig& cfg, double lr);

template <typename Real>
class Adam {
public:
    Adam(ParamList<Real> params, AdamConfig cfg);

    void set_lr(double lr) noexcept { lr_ = lr; }
    double lr() const noexcept { return lr_; }
    std::uint64_t steps() const noexcept { return step_; }
    const AdamConfig& config() const noexcept { return cfg_; }

    void zero_grad();
    /// Applies one update from the parameters' accumulated gradients.
    void step();

    const ParamList<Real>& params() const noexcept { return params_; }
    std::vector<std::vector<Real>>& first_moments() noexcept { return m_; }
    std::vector<std::vector<Real>>& second_moments() noexcept { return v_; }
    const std::vector<std::vector<Real>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<Real>>& second_moments() const noexcept { return v_; }
    void set_steps(std::uint64_t s) noexcept { step_ = s; }

private:
    ParamList<Real> params_;
    AdamConfig cfg_;
    double lr_;
    std::uint64_t step_ = 0;
    std::vector<std::vector<Real>> m_;
    std::vector<std::vector<Real>> v_;
};

struct LrSchedule {
    enum class Kind { Cosine, CosineWarmRestarts };

    Kind kind = Kind::Cosine;
    double lr_max = 1e-4;
    double lr_min = 0.0;
    /// Annealing period in steps (first period for warm restarts).
    std::size_t period = 100;
    /// Growth factor of successive periods (warm restarts only).
    std::size_t period_mult = 1;

    /// Plain cosine holds lr_min once t >= period.
    double at(std::size_t t) const;
};

}  // namespace confseg::nn
