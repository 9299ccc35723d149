#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taskmoe/model.hpp"

namespace taskmoe {

/// The resolved route of one MoE block for one task.
struct LayerRoute {
    Side side = Side::Decoder;
    std::size_t block = 0;   // block index within its side
    FrozenRoute route;       // global expert ids in slot order

    friend bool operator==(const LayerRoute&, const LayerRoute&) = default;
};

struct TaskExpertMap {
    TaskKey task;
    std::vector<LayerRoute> layers;   // encoder blocks first, ascending

    /// Exactly `top_k` distinct experts below `num_experts` per layer,
    /// weights summing to one within 1e-12.
    void validate(std::size_t top_k, std::size_t num_experts) const;
    friend bool operator==(const TaskExpertMap&, const TaskExpertMap&) = default;
};

/// Evaluates the task gate once per MoE block on the extracted sides. With no
/// sides given, every task-routed side is extracted. Throws
/// NotExtractableError when a requested side (or, by default, every side) is
/// token- or sentence-routed.
TaskExpertMap resolve_task_experts(const Seq2SeqModel& model, const TaskKey& task, std::span<const Side> sides = {});

/// Copy of `model` whose mapped blocks hold only their K experts, run with the
/// frozen route and no gate. Every other parameter is copied verbatim.
Seq2SeqModel extract_subnetwork(const Seq2SeqModel& model, const TaskKey& task, std::span<const Side> sides = {});

/// Freezes the listed blocks of `model` (which must still hold all E experts
/// there) and marks it as serving `map.task` only.
void apply_task_expert_map(Seq2SeqModel& model, const TaskExpertMap& map);

/// Reshapes the listed blocks to K zero experts with frozen routes; used when
/// loading a sub-network checkpoint.
void shape_as_subnetwork(Seq2SeqModel& model, const TaskExpertMap& map);

/// The frozen routes carried by an extracted model (empty layers otherwise).
TaskExpertMap frozen_routes(const Seq2SeqModel& model);

struct EquivalenceReport {
    double max_abs_diff = 0.0;
    bool tokens_identical = true;
    std::size_t sentences = 0;
    std::size_t steps_compared = 0;
    std::optional<std::size_t> first_divergent_sentence;
    std::optional<std::size_t> first_divergent_step;

    bool equivalent() const noexcept { return tokens_identical && max_abs_diff == 0.0; }
};

/// Greedy-decodes every source with both models (|src| + 4 tokens at most) and
/// compares the tokens and each step's logits. Comparison of a sentence stops
/// at its first token mismatch.
EquivalenceReport verify_equivalence(const Seq2SeqModel& full, const Seq2SeqModel& sub, std::span<const Sample> corpus,
                                     const TaskKey& task);

struct ParamBreakdown {
    std::uint64_t vocabulary = 0;   // shared embedding, counted once
    std::uint64_t encoder = 0;
    std::uint64_t decoder = 0;
    std::uint64_t softmax = 0;      // separate output projection, if any
    std::uint64_t total = 0;
    std::uint64_t effective_encoder = 0;
    std::uint64_t effective_decoder = 0;
    std::uint64_t effective_at_inference = 0;

    friend bool operator==(const ParamBreakdown&, const ParamBreakdown&) = default;
};

/// Exact counts of the model's tensors. Effective counts keep K experts and
/// drop the gate on task-routed or frozen MoE blocks, and keep all E experts
/// plus the gate on token- and sentence-routed blocks.
ParamBreakdown count_params(const Seq2SeqModel& model);

/// Closed-form counts for a standard transformer at arbitrary dimensions:
/// 4·d² per attention, 2·d·d_ff per FFN or expert, V·d shared embedding, and
/// an optional separate V×softmax_hidden output layer.
struct ArchDims {
    std::uint64_t vocab = 64000;
    std::uint64_t d_model = 512;
    std::uint64_t d_ff = 2048;
    std::uint64_t enc_layers = 6;
    std::uint64_t dec_layers = 6;
    std::uint64_t moe_every = 2;
    std::uint64_t num_experts = 1;   // 1 means dense
    std::uint64_t top_k = 2;
    std::uint64_t softmax_hidden = 1024;   // 0: tied output projection
    RoutingKind enc_routing = RoutingKind::Token;
    RoutingKind dec_routing = RoutingKind::Token;
    /// Experts counted per MoE block on task-routed sides at inference;
    /// 0 means top_k.
    std::uint64_t task_side_experts = 0;
    bool include_gate = false;       // d·E token-gate weights per MoE block
};

ParamBreakdown count_params(const ArchDims& dims);

/// Keys as in ArchDims; routing kinds as "token", "sentence", "task", "static".
ArchDims arch_dims_from_json(const std::string& text);

/// `component,count` rows: vocabulary, encoder, decoder, softmax, total,
/// effective_encoder, effective_decoder, effective_at_inference.
std::string to_csv(const ParamBreakdown& p);

} // namespace taskmoe
