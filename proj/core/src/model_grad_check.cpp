#include "taskmoe/model_grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "taskmoe/error.hpp"
#include "taskmoe/rng.hpp"

namespace taskmoe {

namespace {

class GapObserver : public RoutingObserver {
public:
    void on_dispatch(Side, std::size_t, const MoELayerParams& layer, const DispatchPlan& plan) override {
        if (layer.frozen || layer.strategy.kind == RoutingKind::StaticPartition) {
            return;
        }
        for (const auto& d : plan.decisions) {
            std::vector<double> p = d.full_probs;
            std::sort(p.begin(), p.end());
            for (std::size_t i = 1; i < p.size(); ++i) {
                gap = std::min(gap, p[i] - p[i - 1]);
            }
        }
    }
    double gap = std::numeric_limits<double>::infinity();
};

} // namespace

PointMargins point_margins(Seq2SeqModel& model, std::span<const Sample> batch) {
    GapObserver observer;
    const LossBreakdown loss = model.forward_loss(batch, false, &observer);
    return {observer.gap, loss.min_relu_margin};
}

ModelGradCheckReport check_model_gradients(const ModelConfig& config, std::span<const Sample> batch,
                                           std::uint64_t seed, const ModelGradCheckOptions& options) {
    ModelGradCheckReport report;
    GradCheckOptions gc;
    gc.max_coords_per_param = options.max_coords_per_param;
    while (report.point_errors.size() < options.points) {
        if (report.attempts >= options.max_attempts) {
            throw EvaluationError("gradient check: could not find enough untied parameter points in " +
                                  std::to_string(options.max_attempts) + " attempts");
        }
        const std::uint64_t point_seed = derive_seed(seed, report.attempts++);
        Seq2SeqModel model = Seq2SeqModel::initialize(config, point_seed);
        const PointMargins margins = point_margins(model, batch);
        if (margins.gate_gap < options.min_gate_gap || margins.relu_margin < options.min_relu_margin) {
            continue;
        }
        model.zero_grad();
        model.forward_loss(batch, true);
        auto loss = [&model, batch] { return model.forward_loss(batch, false).total; };
        const auto params = model.parameters();
        const GradCheckResult r = grad_check(loss, params, options.h, gc);
        if (options.verbose) {
            std::fprintf(stderr, "point %llu: max rel %.3g (param %zu coord %zu analytic %.6g numeric %.6g)\n",
                         static_cast<unsigned long long>(point_seed), r.max_rel_error, r.worst_param, r.worst_coord,
                         r.worst_analytic, r.worst_numeric);
        }
        report.point_errors.push_back(r.max_rel_error);
        report.point_seeds.push_back(point_seed);
        report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    }
    return report;
}

} // namespace taskmoe
