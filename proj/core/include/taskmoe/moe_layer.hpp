#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "taskmoe/matrix.hpp"

namespace taskmoe {

enum class RoutingKind { Token, Sentence, Task, StaticPartition };

/// What counts as one task for task-level routing.
enum class TaskBoundary { TargetLanguage, LanguagePair };

struct RoutingStrategy {
    RoutingKind kind = RoutingKind::Token;
    std::optional<TaskBoundary> boundary;   // set iff kind is Task or StaticPartition

    static RoutingStrategy token() { return {RoutingKind::Token, std::nullopt}; }
    static RoutingStrategy sentence() { return {RoutingKind::Sentence, std::nullopt}; }
    static RoutingStrategy task(TaskBoundary b) { return {RoutingKind::Task, b}; }
    static RoutingStrategy static_partition(TaskBoundary b) { return {RoutingKind::StaticPartition, b}; }

    /// Task and StaticPartition: routing is a function of the task only.
    bool is_task_level() const noexcept {
        return kind == RoutingKind::Task || kind == RoutingKind::StaticPartition;
    }
    void validate() const;

    friend bool operator==(const RoutingStrategy&, const RoutingStrategy&) = default;
};

/// "token", "sentence", "task", "static".
std::string to_string(RoutingKind kind);
RoutingKind parse_routing_kind(const std::string& text);

/// "token", "sentence", "task:target", "task:pair", "static:target", "static:pair".
std::string to_string(const RoutingStrategy& s);
RoutingStrategy parse_routing_strategy(const std::string& text);

struct MoEConfig {
    std::size_t num_experts = 8;
    std::size_t top_k = 2;
    std::size_t d_model = 32;
    std::size_t d_ff = 64;
    double capacity_factor = 1.0;
    double eval_capacity_factor = 0.0;   // capacity at inference; 0 means unlimited
    double aux_loss_weight = 0.01;

    void validate() const;
    friend bool operator==(const MoEConfig&, const MoEConfig&) = default;
};

/// One expert FFN. Stored for row-vector inputs: wi is [d_model×d_ff] and
/// wo is [d_ff×d_model], so FFN(x) = relu(x·wi)·wo.
struct ExpertParams {
    Parameter wi;
    Parameter wo;
};

struct GateNetwork {
    Parameter token_proj;                              // [d_model×E], token and sentence routing
    Parameter task_logits;                             // [T×E], one row per routing task
    std::vector<std::vector<std::size_t>> static_map;  // row → K experts, StaticPartition
};

struct GateDecision {
    std::vector<std::size_t> expert_ids;   // K distinct ids, descending probability
    std::vector<double> weights;           // renormalized top-K probabilities
    std::vector<double> full_probs;        // length E

    friend bool operator==(const GateDecision&, const GateDecision&) = default;
};

/// Top-k of a probability vector, ties to the lower index, weights
/// renormalized to sum to one.
GateDecision select_top_k(std::vector<double> full_probs, std::size_t k);

/// Row-wise FFN over x[S×d_model].
Matrix expert_ffn(const ExpertParams& e, const Matrix& x);

GateDecision gate_token(std::span<const double> x, const GateNetwork& gate, const MoEConfig& cfg);
/// Routes on the mean row of x. Throws ShapeError when x has no rows.
GateDecision gate_sentence(const Matrix& x, const GateNetwork& gate, const MoEConfig& cfg);
/// Task-level routing for a resolved routing row. For StaticPartition the
/// mapped experts share the weight equally and nothing is learned.
GateDecision gate_task(std::size_t task_row, const GateNetwork& gate, const MoEConfig& cfg,
                       RoutingKind kind = RoutingKind::Task);

struct DispatchPlan {
    std::vector<GateDecision> decisions;                // per position
    std::vector<std::vector<std::size_t>> admitted;     // per expert, ascending positions
    std::vector<std::vector<std::size_t>> slot_row;     // [position][slot] → row in expert batch, or npos
    std::vector<std::pair<std::size_t, std::size_t>> dropped;   // (position, slot)
    std::size_t capacity = 0;

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    bool is_admitted(std::size_t position, std::size_t slot) const {
        return slot_row[position][slot] != npos;
    }
    /// Experts with at least one admitted position, ascending.
    std::vector<std::size_t> touched_experts() const;
};

/// ceil(K·S·capacity_factor / E).
std::size_t expert_capacity(std::size_t positions, const MoEConfig& cfg);

/// Admits (position, slot) pairs position-major then slot-major until each
/// expert holds `capacity` positions; the rest are dropped.
DispatchPlan dispatch(std::vector<GateDecision> decisions, std::size_t num_experts, std::size_t capacity);
DispatchPlan dispatch_with_capacity(std::vector<GateDecision> decisions, const MoEConfig& cfg);

/// E · Σ_e f_e·m_e, with f_e the share of rows whose top-1 is e and m_e the
/// mean probability of e.
double load_balance_loss(const Matrix& full_probs, std::span<const std::size_t> top1);

/// Gradient of weight·load_balance_loss w.r.t. each row's probability of e
/// (identical for every row since f is piecewise constant).
std::vector<double> load_balance_prob_grad(std::span<const std::size_t> top1, std::size_t rows,
                                           std::size_t num_experts, double weight);

/// A layer whose routing was resolved ahead of time for one task. The
/// layer's experts vector then holds exactly these experts in slot order.
struct FrozenRoute {
    std::vector<std::size_t> expert_ids;   // original expert ids in the full model
    std::vector<double> weights;

    friend bool operator==(const FrozenRoute&, const FrozenRoute&) = default;
};

struct MoELayerParams {
    MoEConfig config;
    RoutingStrategy strategy;
    std::vector<ExpertParams> experts;
    GateNetwork gate;
    std::optional<FrozenRoute> frozen;

    std::vector<Parameter*> parameters();
};

/// Everything the backward pass needs from one forward call.
struct MoECache {
    Matrix x;
    DispatchPlan plan;
    std::optional<std::size_t> task_row;
    std::vector<std::size_t> evaluated;    // experts actually run
    std::vector<Matrix> expert_in;         // indexed by expert id (empty when unused)
    std::vector<Matrix> expert_pre;
    std::vector<Matrix> expert_hidden;
    std::vector<Matrix> expert_out;
};

struct MoEOutput {
    Matrix y;
    double aux_loss = 0.0;      // unweighted load_balance_loss over this call's rows
    DispatchPlan plan;
    std::vector<std::size_t> evaluated;
};

/// Training uses capacity_factor, inference eval_capacity_factor.
enum class MoEPhase { Train, Inference };

/// y_s = Σ over admitted slots (ascending) of weight · FFN_e(x_s).
/// Capacity applies to token routing only; sentence- and task-level routing
/// send whole sequences to the same experts and are never dropped.
/// `task_row` is required for task-level strategies (ValidationError otherwise).
MoEOutput moe_forward(const MoELayerParams& layer, const Matrix& x, std::optional<std::size_t> task_row,
                      MoECache* cache = nullptr, MoEPhase phase = MoEPhase::Train);

/// Accumulates parameter gradients and returns dL/dx. `aux_prob_grad` (length E
/// or empty) is added to every row's dL/dp before the gate backward.
Matrix moe_backward(MoELayerParams& layer, const MoECache& cache, const Matrix& dy,
                    std::span<const double> aux_prob_grad);

class Rng;

/// Builds a layer with N(0, 1/fan_in) weights. Only the gate fields the
/// strategy uses are allocated; `task_rows` sizes the task gate and
/// `static_map` (defaulted when empty) serves StaticPartition.
MoELayerParams make_moe_layer(const MoEConfig& cfg, const RoutingStrategy& strategy, std::size_t task_rows,
                              Rng& rng, std::vector<std::vector<std::size_t>> static_map = {});

/// Default static partition: row r gets experts (r·K + j) mod E.
std::vector<std::vector<std::size_t>> default_static_map(std::size_t rows, const MoEConfig& cfg);

} // namespace taskmoe
