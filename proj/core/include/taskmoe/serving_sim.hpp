#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "taskmoe/moe_layer.hpp"

namespace taskmoe {

/// Abstract accelerator cluster. The defaults are loosely modeled on a
/// 16-chip slice and are not physical measurements.
struct HardwareProfile {
    std::size_t device_count = 16;
    double flops_rate = 1.0e13;         // sustained flop/s per device
    double link_bandwidth = 1.0e11;     // bytes/s, aggregate all-to-all
    double per_step_latency = 1.0e-6;   // s per all-to-all
    double bytes_per_value = 4.0;

    void validate() const;
    friend bool operator==(const HardwareProfile&, const HardwareProfile&) = default;
};

/// One batch of `sentences` requests: an encoder pass over src_len tokens
/// each, then `decode_steps` single-token decoder passes.
struct ServingScenario {
    RoutingKind enc_routing = RoutingKind::Token;
    RoutingKind dec_routing = RoutingKind::Token;
    std::size_t d_model = 512;
    std::size_t d_ff = 2048;
    std::size_t enc_layers = 6;
    std::size_t dec_layers = 6;
    std::size_t enc_moe_layers = 3;
    std::size_t dec_moe_layers = 3;
    std::size_t num_experts = 32;
    std::size_t top_k = 2;
    std::size_t sentences = 64;
    std::size_t src_len = 32;
    std::size_t decode_steps = 32;
    double min_expert_batch = 64.0;    // b_min: tokens per expert for full efficiency

    void validate() const;
    friend bool operator==(const ServingScenario&, const ServingScenario&) = default;
};

struct StepBreakdown {
    double compute_s = 0.0;
    double comm_s = 0.0;
    double encoder_comm_s = 0.0;
    double decoder_comm_s = 0.0;
    double utilization = 1.0;          // flop-weighted over the encoder and decoder passes
    double flops = 0.0;
    std::uint64_t generated_tokens = 0;

    double total_s() const noexcept { return compute_s + comm_s; }
};

/// All-to-all payload of one MoE layer per token: dispatch and combine of
/// K·d_model values each.
double comm_bytes_per_token(const ServingScenario& s, const HardwareProfile& hw);

StepBreakdown step_time(const ServingScenario& s, const HardwareProfile& hw);

/// comm_s / (compute_s + comm_s). Throws EvaluationError on a zero step.
double comm_fraction(const StepBreakdown& b);

struct ThroughputPoint {
    std::size_t batch = 0;
    double tokens_per_s = 0.0;
    double comm_fraction = 0.0;
};

/// Generated tokens per second for each batch size (sentences per batch).
std::vector<ThroughputPoint> throughput_curve(const ServingScenario& s, const HardwareProfile& hw,
                                              std::span<const std::size_t> batch_sizes);
ThroughputPoint peak(std::span<const ThroughputPoint> curve);

struct StrategyComparison {
    double peak_ratio = 1.0;            // peak(task) / peak(token)
    ThroughputPoint token_peak;
    ThroughputPoint task_peak;
    double token_utilization_at_peak = 1.0;
    std::uint64_t token_effective_params = 0;
    std::uint64_t task_effective_params = 0;
};

/// Both scenarios must share model dims (ValidationError otherwise).
StrategyComparison compare_strategies(const ServingScenario& token, const ServingScenario& task,
                                      const HardwareProfile& hw, std::span<const std::size_t> batch_sizes);

/// Targets measured at the largest batch of the sweep.
struct CalibrationTarget {
    double comm_fraction = 0.269;
    double utilization = 1.0;
};

struct Calibration {
    ServingScenario scenario;   // with min_expert_batch solved
    HardwareProfile hardware;   // with link_bandwidth solved
    double achieved_comm_fraction = 0.0;
    double achieved_utilization = 1.0;
};

/// Solves b_min for the utilization target, then link bandwidth for the
/// communication fraction, both by bisection. Throws ValidationError when a
/// target is outside what the knobs can reach.
Calibration calibrate(const ServingScenario& token, const HardwareProfile& hw, std::size_t batch,
                      const CalibrationTarget& target);

std::string hardware_to_json(const HardwareProfile& hw);
HardwareProfile hardware_from_json(const std::string& text);
std::string scenario_to_json(const ServingScenario& s);
ServingScenario scenario_from_json(const std::string& text);
CalibrationTarget calibration_target_from_json(const std::string& text);

/// "batch,tokens_per_s,comm_fraction" with %.17g values.
std::string to_csv(std::span<const ThroughputPoint> curve);

} // namespace taskmoe
