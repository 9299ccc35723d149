#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "taskmoe/matrix.hpp"

namespace taskmoe {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;   // index into the checked parameter list
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
};

struct GradCheckOptions {
    /// Check at most this many coordinates per parameter (evenly strided); 0 = all.
    std::size_t max_coords_per_param = 0;
};

/// Central-difference check of `params[i]->grad` against `loss`.
///
/// The analytic gradients must already be stored in each parameter's grad
/// at the current point. Per coordinate the relative error is
/// |a - n| / max(|a|, |n|, 1e-8); the maximum is returned. Parameter values
/// are restored exactly. Throws EvaluationError if `loss` is non-finite and
/// ValidationError if h <= 0.
GradCheckResult grad_check(const std::function<double()>& loss, std::span<Parameter* const> params,
                           double h, const GradCheckOptions& options = {});

} // namespace taskmoe
