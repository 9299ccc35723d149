#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "taskmoe/grad_check.hpp"
#include "taskmoe/model.hpp"

namespace taskmoe {

/// Distances from the loss's non-differentiable points on `batch`.
struct PointMargins {
    double gate_gap;      // smallest gap between two gate probabilities of one decision (+inf without learned gates)
    double relu_margin;   // smallest |FFN pre-activation|
};

PointMargins point_margins(Seq2SeqModel& model, std::span<const Sample> batch);

struct ModelGradCheckOptions {
    std::size_t points = 20;          // accepted parameter points
    double h = 1e-4;
    double min_gate_gap = 1e-3;       // reject points closer than this to a top-K switch
    double min_relu_margin = 1e-3;    // and closer than this to a ReLU kink
    std::size_t max_attempts = 2000;
    std::size_t max_coords_per_param = 0;   // 0 = every coordinate
    bool verbose = false;                    // per-point summary on stderr
};

struct ModelGradCheckReport {
    std::vector<double> point_errors;     // max relative error per accepted point
    std::vector<std::uint64_t> point_seeds;
    double max_rel_error = 0.0;
    std::size_t attempts = 0;
};

/// Draws model initializations from `seed` onward, keeps those at least the
/// configured margins away from gate ties and ReLU kinks on `batch`, and compares
/// forward_loss gradients with central differences at each.
ModelGradCheckReport check_model_gradients(const ModelConfig& config, std::span<const Sample> batch,
                                           std::uint64_t seed, const ModelGradCheckOptions& options = {});

} // namespace taskmoe
