#include "taskmoe/moe_layer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "taskmoe/error.hpp"
#include "taskmoe/ops.hpp"
#include "taskmoe/rng.hpp"

namespace taskmoe {

void RoutingStrategy::validate() const {
    if (is_task_level() != boundary.has_value()) {
        throw ValidationError("routing strategy: a task boundary is required exactly for task-level routing");
    }
}

std::string to_string(RoutingKind kind) {
    switch (kind) {
    case RoutingKind::Token:
        return "token";
    case RoutingKind::Sentence:
        return "sentence";
    case RoutingKind::Task:
        return "task";
    case RoutingKind::StaticPartition:
        return "static";
    }
    return "?";
}

RoutingKind parse_routing_kind(const std::string& text) {
    for (RoutingKind k : {RoutingKind::Token, RoutingKind::Sentence, RoutingKind::Task, RoutingKind::StaticPartition}) {
        if (to_string(k) == text) {
            return k;
        }
    }
    throw ValidationError("unknown routing kind '" + text + "'");
}

std::string to_string(const RoutingStrategy& s) {
    auto suffix = [&s] {
        return std::string(s.boundary == TaskBoundary::LanguagePair ? "pair" : "target");
    };
    switch (s.kind) {
    case RoutingKind::Token:
        return "token";
    case RoutingKind::Sentence:
        return "sentence";
    case RoutingKind::Task:
        return "task:" + suffix();
    case RoutingKind::StaticPartition:
        return "static:" + suffix();
    }
    return "?";
}

RoutingStrategy parse_routing_strategy(const std::string& text) {
    if (text == "token") {
        return RoutingStrategy::token();
    }
    if (text == "sentence") {
        return RoutingStrategy::sentence();
    }
    const auto colon = text.find(':');
    if (colon != std::string::npos) {
        const std::string head = text.substr(0, colon);
        const std::string tail = text.substr(colon + 1);
        std::optional<TaskBoundary> boundary;
        if (tail == "target") {
            boundary = TaskBoundary::TargetLanguage;
        } else if (tail == "pair") {
            boundary = TaskBoundary::LanguagePair;
        }
        if (boundary && head == "task") {
            return RoutingStrategy::task(*boundary);
        }
        if (boundary && head == "static") {
            return RoutingStrategy::static_partition(*boundary);
        }
    }
    throw ValidationError("unknown routing strategy '" + text +
                          "' (expected token, sentence, task:target, task:pair, static:target, static:pair)");
}

void MoEConfig::validate() const {
    if (num_experts == 0 || top_k == 0 || top_k > num_experts) {
        throw ValidationError("moe config: need 1 <= top_k <= num_experts");
    }
    if (d_model == 0 || d_ff == 0) {
        throw ValidationError("moe config: dimensions must be positive");
    }
    if (!(capacity_factor > 0.0)) {
        throw ValidationError("moe config: capacity_factor must be positive");
    }
    if (!(eval_capacity_factor >= 0.0)) {
        throw ValidationError("moe config: eval_capacity_factor must be >= 0");
    }
    if (!(aux_loss_weight >= 0.0)) {
        throw ValidationError("moe config: aux_loss_weight must be nonnegative");
    }
}

GateDecision select_top_k(std::vector<double> full_probs, std::size_t k) {
    if (k == 0 || k > full_probs.size()) {
        throw ShapeError("select_top_k: k out of range");
    }
    std::vector<std::size_t> order(full_probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&full_probs](std::size_t a, std::size_t b) { return full_probs[a] > full_probs[b]; });
    GateDecision d;
    d.expert_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    double mass = 0.0;
    for (std::size_t id : d.expert_ids) {
        mass += full_probs[id];
    }
    d.weights.reserve(k);
    for (std::size_t id : d.expert_ids) {
        d.weights.push_back(full_probs[id] / mass);
    }
    d.full_probs = std::move(full_probs);
    return d;
}

Matrix expert_ffn(const ExpertParams& e, const Matrix& x) {
    return affine(relu(affine(x, e.wi.value)), e.wo.value);
}

GateDecision gate_token(std::span<const double> x, const GateNetwork& gate, const MoEConfig& cfg) {
    const Matrix logits = affine(Matrix::row_vector(x), gate.token_proj.value);
    return select_top_k(softmax(logits.row(0)), cfg.top_k);
}

namespace {

Matrix mean_row(const Matrix& x) {
    if (x.rows() == 0) {
        throw ShapeError("sentence gate: empty sequence");
    }
    Matrix mean(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            mean(0, c) += row[c];
        }
    }
    mean *= 1.0 / static_cast<double>(x.rows());
    return mean;
}

} // namespace

GateDecision gate_sentence(const Matrix& x, const GateNetwork& gate, const MoEConfig& cfg) {
    const Matrix mean = mean_row(x);
    return gate_token(mean.row(0), gate, cfg);
}

GateDecision gate_task(std::size_t task_row, const GateNetwork& gate, const MoEConfig& cfg, RoutingKind kind) {
    if (kind == RoutingKind::StaticPartition) {
        if (task_row >= gate.static_map.size()) {
            throw UnknownTaskError("static partition has no entry for task row " + std::to_string(task_row));
        }
        // Equal weights: slot order follows the tie rule (lower id first).
        std::vector<std::size_t> experts = gate.static_map[task_row];
        std::sort(experts.begin(), experts.end());
        GateDecision d;
        d.full_probs.assign(cfg.num_experts, 0.0);
        const double w = 1.0 / static_cast<double>(experts.size());
        for (std::size_t id : experts) {
            d.expert_ids.push_back(id);
            d.weights.push_back(w);
            d.full_probs[id] = w;
        }
        return d;
    }
    if (task_row >= gate.task_logits.value.rows()) {
        throw UnknownTaskError("task gate has no row " + std::to_string(task_row));
    }
    return select_top_k(softmax(gate.task_logits.value.row(task_row)), cfg.top_k);
}

std::vector<std::size_t> DispatchPlan::touched_experts() const {
    std::vector<std::size_t> out;
    for (std::size_t e = 0; e < admitted.size(); ++e) {
        if (!admitted[e].empty()) {
            out.push_back(e);
        }
    }
    return out;
}

std::size_t expert_capacity(std::size_t positions, const MoEConfig& cfg) {
    const double raw = static_cast<double>(cfg.top_k * positions) * cfg.capacity_factor /
                       static_cast<double>(cfg.num_experts);
    return static_cast<std::size_t>(std::ceil(raw));
}

DispatchPlan dispatch(std::vector<GateDecision> decisions, std::size_t num_experts, std::size_t capacity) {
    DispatchPlan plan;
    plan.capacity = capacity;
    plan.admitted.assign(num_experts, {});
    plan.slot_row.resize(decisions.size());
    for (std::size_t s = 0; s < decisions.size(); ++s) {
        const auto& ids = decisions[s].expert_ids;
        plan.slot_row[s].assign(ids.size(), DispatchPlan::npos);
        for (std::size_t j = 0; j < ids.size(); ++j) {
            const std::size_t e = ids[j];
            if (e >= num_experts) {
                throw IndexError("dispatch: expert id " + std::to_string(e) + " out of range");
            }
            if (plan.admitted[e].size() < capacity) {
                plan.slot_row[s][j] = plan.admitted[e].size();
                plan.admitted[e].push_back(s);
            } else {
                plan.dropped.emplace_back(s, j);
            }
        }
    }
    plan.decisions = std::move(decisions);
    return plan;
}

DispatchPlan dispatch_with_capacity(std::vector<GateDecision> decisions, const MoEConfig& cfg) {
    const std::size_t capacity = expert_capacity(decisions.size(), cfg);
    return dispatch(std::move(decisions), cfg.num_experts, capacity);
}

double load_balance_loss(const Matrix& full_probs, std::span<const std::size_t> top1) {
    const std::size_t rows = full_probs.rows();
    const std::size_t experts = full_probs.cols();
    if (top1.size() != rows) {
        throw ShapeError("load_balance_loss: top1 length mismatch");
    }
    if (rows == 0) {
        return 0.0;
    }
    std::vector<double> f(experts, 0.0);
    std::vector<double> m(experts, 0.0);
    for (std::size_t s = 0; s < rows; ++s) {
        if (top1[s] >= experts) {
            throw IndexError("load_balance_loss: expert id out of range");
        }
        f[top1[s]] += 1.0;
        auto p = full_probs.row(s);
        for (std::size_t e = 0; e < experts; ++e) {
            m[e] += p[e];
        }
    }
    const auto n = static_cast<double>(rows);
    double acc = 0.0;
    for (std::size_t e = 0; e < experts; ++e) {
        acc += (f[e] / n) * (m[e] / n);
    }
    return static_cast<double>(experts) * acc;
}

std::vector<double> load_balance_prob_grad(std::span<const std::size_t> top1, std::size_t rows,
                                           std::size_t num_experts, double weight) {
    std::vector<double> g(num_experts, 0.0);
    if (rows == 0) {
        return g;
    }
    const auto n = static_cast<double>(rows);
    for (std::size_t e : top1) {
        g[e] += 1.0;
    }
    for (double& v : g) {
        v = weight * static_cast<double>(num_experts) * (v / n) / n;
    }
    return g;
}

std::vector<Parameter*> MoELayerParams::parameters() {
    std::vector<Parameter*> out;
    for (auto& e : experts) {
        out.push_back(&e.wi);
        out.push_back(&e.wo);
    }
    if (!frozen) {
        if (!gate.token_proj.value.empty()) {
            out.push_back(&gate.token_proj);
        }
        if (!gate.task_logits.value.empty()) {
            out.push_back(&gate.task_logits);
        }
    }
    return out;
}

namespace {

std::vector<GateDecision> route(const MoELayerParams& layer, const Matrix& x, std::optional<std::size_t> task_row) {
    const std::size_t positions = x.rows();
    if (layer.frozen) {
        GateDecision d;
        d.expert_ids.resize(layer.frozen->expert_ids.size());
        std::iota(d.expert_ids.begin(), d.expert_ids.end(), std::size_t{0});
        d.weights = layer.frozen->weights;
        d.full_probs = layer.frozen->weights;
        return std::vector<GateDecision>(positions, d);
    }
    switch (layer.strategy.kind) {
    case RoutingKind::Token: {
        const Matrix probs = softmax_rows(affine(x, layer.gate.token_proj.value));
        std::vector<GateDecision> out;
        out.reserve(positions);
        for (std::size_t s = 0; s < positions; ++s) {
            auto p = probs.row(s);
            out.push_back(select_top_k(std::vector<double>(p.begin(), p.end()), layer.config.top_k));
        }
        return out;
    }
    case RoutingKind::Sentence:
        return std::vector<GateDecision>(positions, gate_sentence(x, layer.gate, layer.config));
    case RoutingKind::Task:
    case RoutingKind::StaticPartition:
        if (!task_row) {
            throw ValidationError("task-level routing needs a task id");
        }
        return std::vector<GateDecision>(positions,
                                         gate_task(*task_row, layer.gate, layer.config, layer.strategy.kind));
    }
    return {};
}

} // namespace

MoEOutput moe_forward(const MoELayerParams& layer, const Matrix& x, std::optional<std::size_t> task_row,
                      MoECache* cache, MoEPhase phase) {
    const MoEConfig& cfg = layer.config;
    if (x.cols() != cfg.d_model) {
        throw ShapeError("moe_forward: input width " + std::to_string(x.cols()) + " != d_model " +
                         std::to_string(cfg.d_model));
    }
    const std::size_t positions = x.rows();
    const std::size_t num_local = layer.experts.size();

    std::vector<GateDecision> decisions = route(layer, x, task_row);
    std::size_t capacity = positions;
    if (!layer.frozen && layer.strategy.kind == RoutingKind::Token) {
        if (phase == MoEPhase::Train) {
            capacity = expert_capacity(positions, cfg);
        } else if (cfg.eval_capacity_factor > 0.0) {
            MoEConfig eval_cfg = cfg;
            eval_cfg.capacity_factor = cfg.eval_capacity_factor;
            capacity = expert_capacity(positions, eval_cfg);
        }
    }
    DispatchPlan plan = dispatch(std::move(decisions), num_local, capacity);

    MoEOutput out;
    out.y = Matrix(positions, cfg.d_model);
    std::vector<Matrix> ins(num_local), pres(num_local), hiddens(num_local), outs(num_local);
    for (std::size_t e = 0; e < num_local; ++e) {
        if (plan.admitted[e].empty()) {
            continue;
        }
        out.evaluated.push_back(e);
        ins[e] = x.gather_rows(plan.admitted[e]);
        pres[e] = affine(ins[e], layer.experts[e].wi.value);
        hiddens[e] = relu(pres[e]);
        outs[e] = affine(hiddens[e], layer.experts[e].wo.value);
    }
    for (std::size_t s = 0; s < positions; ++s) {
        const GateDecision& d = plan.decisions[s];
        auto y = out.y.row(s);
        for (std::size_t j = 0; j < d.expert_ids.size(); ++j) {
            const std::size_t row = plan.slot_row[s][j];
            if (row == DispatchPlan::npos) {
                continue;
            }
            const double w = d.weights[j];
            auto src = outs[d.expert_ids[j]].row(row);
            for (std::size_t c = 0; c < y.size(); ++c) {
                y[c] += w * src[c];
            }
        }
    }

    if (!layer.frozen && layer.strategy.kind != RoutingKind::StaticPartition && positions > 0) {
        Matrix probs(positions, cfg.num_experts);
        std::vector<std::size_t> top1(positions);
        for (std::size_t s = 0; s < positions; ++s) {
            const auto& p = plan.decisions[s].full_probs;
            std::copy(p.begin(), p.end(), probs.row(s).begin());
            top1[s] = plan.decisions[s].expert_ids.front();
        }
        out.aux_loss = load_balance_loss(probs, top1);
    }

    if (cache != nullptr) {
        cache->x = x;
        cache->plan = plan;
        cache->task_row = task_row;
        cache->evaluated = out.evaluated;
        cache->expert_in = std::move(ins);
        cache->expert_pre = std::move(pres);
        cache->expert_hidden = std::move(hiddens);
        cache->expert_out = std::move(outs);
    }
    out.plan = std::move(plan);
    return out;
}

Matrix moe_backward(MoELayerParams& layer, const MoECache& cache, const Matrix& dy,
                    std::span<const double> aux_prob_grad) {
    const MoEConfig& cfg = layer.config;
    const DispatchPlan& plan = cache.plan;
    const std::size_t positions = cache.x.rows();
    if (dy.rows() != positions || dy.cols() != cfg.d_model) {
        throw ShapeError("moe_backward: upstream gradient shape mismatch");
    }
    Matrix dx(positions, cfg.d_model);

    // Expert path: d(expert out row) = weight · dy_s.
    std::vector<Matrix> dout(layer.experts.size());
    for (std::size_t e : cache.evaluated) {
        dout[e] = Matrix(cache.expert_out[e].rows(), cfg.d_model);
    }
    // Gate path: dL/dw_j = <dy_s, out_j(s)>.
    const bool learned_gate = !layer.frozen && (layer.strategy.kind == RoutingKind::Token ||
                                                layer.strategy.kind == RoutingKind::Sentence ||
                                                layer.strategy.kind == RoutingKind::Task);
    Matrix dlogits(learned_gate ? positions : 0, cfg.num_experts);

    for (std::size_t s = 0; s < positions; ++s) {
        const GateDecision& d = plan.decisions[s];
        auto g = dy.row(s);
        const std::size_t k = d.expert_ids.size();
        std::vector<double> dweights(k, 0.0);
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t row = plan.slot_row[s][j];
            if (row == DispatchPlan::npos) {
                continue;
            }
            const std::size_t e = d.expert_ids[j];
            auto src = cache.expert_out[e].row(row);
            auto dst = dout[e].row(row);
            double dot = 0.0;
            for (std::size_t c = 0; c < g.size(); ++c) {
                dst[c] += d.weights[j] * g[c];
                dot += g[c] * src[c];
            }
            dweights[j] = dot;
        }
        if (!learned_gate) {
            continue;
        }
        // w_j = p_j / P over the selected set ⇒ dp_i = Σ_j dw_j (δ_ij − w_j) / P.
        double mass = 0.0;
        for (std::size_t id : d.expert_ids) {
            mass += d.full_probs[id];
        }
        double weighted = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            weighted += dweights[j] * d.weights[j];
        }
        std::vector<double> dprobs(cfg.num_experts, 0.0);
        for (std::size_t j = 0; j < k; ++j) {
            dprobs[d.expert_ids[j]] += (dweights[j] - weighted) / mass;
        }
        if (!aux_prob_grad.empty()) {
            for (std::size_t e = 0; e < cfg.num_experts; ++e) {
                dprobs[e] += aux_prob_grad[e];
            }
        }
        const auto dz = softmax_backward(d.full_probs, dprobs);
        std::copy(dz.begin(), dz.end(), dlogits.row(s).begin());
    }

    for (std::size_t e : cache.evaluated) {
        ExpertParams& ex = layer.experts[e];
        Matrix dhidden(cache.expert_hidden[e].rows(), cfg.d_ff);
        affine_backward(cache.expert_hidden[e], ex.wo.value, dout[e], &dhidden, &ex.wo.grad);
        const Matrix dpre = relu_backward(cache.expert_pre[e], dhidden);
        Matrix din(cache.expert_in[e].rows(), cfg.d_model);
        affine_backward(cache.expert_in[e], ex.wi.value, dpre, &din, &ex.wi.grad);
        const auto& rows = plan.admitted[e];
        for (std::size_t r = 0; r < rows.size(); ++r) {
            auto src = din.row(r);
            auto dst = dx.row(rows[r]);
            for (std::size_t c = 0; c < src.size(); ++c) {
                dst[c] += src[c];
            }
        }
    }

    if (!learned_gate || positions == 0) {
        return dx;
    }
    switch (layer.strategy.kind) {
    case RoutingKind::Token:
        affine_backward(cache.x, layer.gate.token_proj.value, dlogits, &dx, &layer.gate.token_proj.grad);
        break;
    case RoutingKind::Sentence: {
        Matrix total(1, cfg.num_experts);
        for (std::size_t s = 0; s < positions; ++s) {
            for (std::size_t e = 0; e < cfg.num_experts; ++e) {
                total(0, e) += dlogits(s, e);
            }
        }
        const Matrix mean = mean_row(cache.x);
        Matrix dmean(1, cfg.d_model);
        affine_backward(mean, layer.gate.token_proj.value, total, &dmean, &layer.gate.token_proj.grad);
        const double inv = 1.0 / static_cast<double>(positions);
        for (std::size_t s = 0; s < positions; ++s) {
            auto dst = dx.row(s);
            for (std::size_t c = 0; c < cfg.d_model; ++c) {
                dst[c] += dmean(0, c) * inv;
            }
        }
        break;
    }
    case RoutingKind::Task: {
        auto dst = layer.gate.task_logits.grad.row(*cache.task_row);
        for (std::size_t s = 0; s < positions; ++s) {
            for (std::size_t e = 0; e < cfg.num_experts; ++e) {
                dst[e] += dlogits(s, e);
            }
        }
        break;
    }
    case RoutingKind::StaticPartition:
        break;
    }
    return dx;
}

std::vector<std::vector<std::size_t>> default_static_map(std::size_t rows, const MoEConfig& cfg) {
    std::vector<std::vector<std::size_t>> map(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cfg.top_k; ++j) {
            map[r].push_back((r * cfg.top_k + j) % cfg.num_experts);
        }
    }
    return map;
}

MoELayerParams make_moe_layer(const MoEConfig& cfg, const RoutingStrategy& strategy, std::size_t task_rows,
                              Rng& rng, std::vector<std::vector<std::size_t>> static_map) {
    cfg.validate();
    strategy.validate();
    MoELayerParams layer;
    layer.config = cfg;
    layer.strategy = strategy;
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double out_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
    layer.experts.reserve(cfg.num_experts);
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
        ExpertParams ex;
        ex.wi = Parameter(rng.normal_matrix(cfg.d_model, cfg.d_ff, in_scale));
        ex.wo = Parameter(rng.normal_matrix(cfg.d_ff, cfg.d_model, out_scale));
        layer.experts.push_back(std::move(ex));
    }
    switch (strategy.kind) {
    case RoutingKind::Token:
    case RoutingKind::Sentence:
        layer.gate.token_proj = Parameter(rng.normal_matrix(cfg.d_model, cfg.num_experts, in_scale));
        break;
    case RoutingKind::Task:
        layer.gate.task_logits = Parameter(rng.normal_matrix(task_rows, cfg.num_experts, 1.0));
        break;
    case RoutingKind::StaticPartition:
        layer.gate.static_map = static_map.empty() ? default_static_map(task_rows, cfg) : std::move(static_map);
        for (const auto& experts : layer.gate.static_map) {
            if (experts.size() != cfg.top_k) {
                throw ValidationError("static partition entries must list exactly top_k experts");
            }
            for (std::size_t j = 0; j < experts.size(); ++j) {
                if (experts[j] >= cfg.num_experts) {
                    throw ValidationError("static partition expert id out of range");
                }
                if (std::find(experts.begin(), experts.begin() + static_cast<std::ptrdiff_t>(j), experts[j]) !=
                    experts.begin() + static_cast<std::ptrdiff_t>(j)) {
                    throw ValidationError("static partition experts must be distinct");
                }
            }
        }
        break;
    }
    return layer;
}

} // namespace taskmoe
