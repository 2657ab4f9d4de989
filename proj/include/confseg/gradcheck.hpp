#pragma once

#include <functional>
#include <string>

#include "confseg/optim.hpp"

namespace confseg::nn {

struct GradCheckResult {
    bool passed = true;
    double worst_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    /// Elements whose +/-h probes changed some relu's on/off state.  The loss
    /// is not differentiable across such a step, so they are not compared.
    std::size_t kinks_skipped = 0;
};

/// Largest share of elements that may be skipped as kink crossings before
/// the check fails outright.
inline constexpr double kMaxKinkFraction = 0.01;

/// Compares the analytic gradient of `loss_fn` with respect to every element of
/// every parameter against central differences with step `h`.  Elements with
/// |analytic| + |numeric| <= 1e-10 are skipped; otherwise the relative error is
/// |a - n| / max(|a|, |n|).  Probes that flip a relu are skipped and
/// counted (see kMaxKinkFraction).  Throws std::runtime_error on a non-finite loss.
GradCheckResult gradient_check(const std::function<Tensor<double>()>& loss_fn, const ParamList<double>& params,
                               double tolerance, double h = 1e-5);

}  // namespace confseg::nn
