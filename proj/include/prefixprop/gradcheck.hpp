#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prefixprop/autodiff.hpp"

namespace prefixprop {

struct GradCheckOptions {
    // Coordinates sampled per parameter; 0 checks every coordinate.
    std::size_t max_coords_per_param = 0;
    std::uint64_t seed = 0;
    double rel_tol = 1e-5;
    double abs_tol = 1e-8;
    // Below this gradient magnitude the absolute tolerance applies.
    double small_grad = 1e-6;
};

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double error = 0.0;
    bool relative = true;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    bool passed = true;
};

// Builds the scalar loss on the given tape, binding the parameters it uses.
using LossFn = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients with central differences
/// (f(p + eps) - f(p - eps)) / (2 eps) on each checked coordinate.
///
/// Parameter gradients are overwritten. Throws ConfigError when eps is
/// outside [1e-6, 1e-4] and DeterminismError when two evaluations at the
/// same point disagree.
GradCheckReport grad_check(const LossFn& loss_fn, std::span<Parameter* const> params, double eps = 1e-5,
                           const GradCheckOptions& options = {});

}  // namespace prefixprop
