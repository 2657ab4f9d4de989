#pragma once

// Finite-difference checks over every autodiff primitive and the end-to-end
// models, in 64-bit mode.

#include <cstdint>
#include <string>
#include <vector>

#include "confseg/gradcheck.hpp"

namespace confseg {

struct GradSuiteEntry {
    std::string name;
    nn::GradCheckResult result;
};

/// Randomised shapes drawn from `seed`.  Each entry reduces its op's output to
/// a scalar through mse_loss against random targets.
std::vector<GradSuiteEntry> run_gradcheck_suite(double tolerance, std::uint64_t seed = 0);

}  // namespace confseg
