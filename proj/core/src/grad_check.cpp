#include "taskmoe/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "taskmoe/error.hpp"

namespace taskmoe {

GradCheckResult grad_check(const std::function<double()>& loss, std::span<Parameter* const> params,
                           double h, const GradCheckOptions& options) {
    if (!(h > 0.0)) {
        throw ValidationError("grad_check: step must be positive");
    }
    auto eval = [&loss] {
        const double v = loss();
        if (!std::isfinite(v)) {
            throw EvaluationError("grad_check: loss is not finite");
        }
        return v;
    };

    GradCheckResult result;
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto values = params[p]->value.data();
        auto grads = params[p]->grad.data();
        const std::size_t n = values.size();
        std::size_t stride = 1;
        if (options.max_coords_per_param != 0 && n > options.max_coords_per_param) {
            stride = (n + options.max_coords_per_param - 1) / options.max_coords_per_param;
        }
        for (std::size_t i = 0; i < n; i += stride) {
            const double saved = values[i];
            values[i] = saved + h;
            const double plus = eval();
            values[i] = saved - h;
            const double minus = eval();
            values[i] = saved;

            const double numeric = (plus - minus) / (2.0 * h);
            const double analytic = grads[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic - numeric) / denom;
            ++result.coords_checked;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_param = p;
                result.worst_coord = i;
                result.worst_analytic = analytic;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

} // namespace taskmoe
