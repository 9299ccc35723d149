#include "taskmoe/serving_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "taskmoe/error.hpp"
#include "taskmoe/extraction.hpp"

namespace taskmoe {

using nlohmann::json;

namespace {

bool task_level(RoutingKind k) { return k == RoutingKind::Task || k == RoutingKind::StaticPartition; }

void require_positive(double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) {
        throw ValidationError(std::string(what) + " must be positive and finite");
    }
}

// 2·(parameters touched) per token, summed over one side's layers.
double flops_per_token(const ServingScenario& s, Side side) {
    const double d = static_cast<double>(s.d_model);
    const double ffn = 2.0 * d * static_cast<double>(s.d_ff);
    const bool enc = side == Side::Encoder;
    const double layers = static_cast<double>(enc ? s.enc_layers : s.dec_layers);
    const double moe = static_cast<double>(enc ? s.enc_moe_layers : s.dec_moe_layers);
    const RoutingKind kind = enc ? s.enc_routing : s.dec_routing;
    const double attn = (enc ? 4.0 : 8.0) * d * d;
    const double gate = task_level(kind) ? 0.0 : d * static_cast<double>(s.num_experts);
    const double params = layers * attn + (layers - moe) * ffn + moe * (static_cast<double>(s.top_k) * ffn + gate);
    return 2.0 * params;
}

double utilization(const ServingScenario& s, RoutingKind kind, double tokens_per_pass) {
    if (task_level(kind)) {
        return 1.0;
    }
    const double fill = tokens_per_pass * static_cast<double>(s.top_k) /
                        (static_cast<double>(s.num_experts) * s.min_expert_batch);
    return std::min(1.0, fill);
}

double side_comm(const ServingScenario& s, const HardwareProfile& hw, RoutingKind kind, std::size_t moe_layers,
                 double tokens_per_pass, double passes) {
    if (task_level(kind) || hw.device_count < 2 || moe_layers == 0) {
        return 0.0;
    }
    const double per_layer = tokens_per_pass * comm_bytes_per_token(s, hw) / hw.link_bandwidth +
                             2.0 * hw.per_step_latency;
    return passes * static_cast<double>(moe_layers) * per_layer;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
    if (!j.is_object()) {
        throw ValidationError(std::string(what) + ": expected an object");
    }
    for (const auto& item : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; }) ==
            allowed.end()) {
            throw ValidationError(std::string(what) + ": unknown key '" + item.key() + "'");
        }
    }
}

template <typename T>
void opt(const json& j, const char* key, T& out) {
    if (const auto it = j.find(key); it != j.end()) {
        it->get_to(out);
    }
}

template <typename F>
auto parse_or_throw(const std::string& text, const char* what, F&& f) {
    try {
        return f(json::parse(text));
    } catch (const json::exception& e) {
        throw ValidationError(std::string(what) + ": " + e.what());
    }
}

} // namespace

void HardwareProfile::validate() const {
    if (device_count == 0) {
        throw ValidationError("hardware: device_count must be positive");
    }
    require_positive(flops_rate, "hardware: flops_rate");
    require_positive(link_bandwidth, "hardware: link_bandwidth");
    require_positive(per_step_latency, "hardware: per_step_latency");
    require_positive(bytes_per_value, "hardware: bytes_per_value");
}

void ServingScenario::validate() const {
    if (d_model == 0 || d_ff == 0 || sentences == 0 || src_len == 0) {
        throw ValidationError("scenario: dims, sentences and src_len must be positive");
    }
    if (decode_steps < 1) {
        throw ValidationError("scenario: decode_steps must be at least 1");
    }
    if (enc_moe_layers > enc_layers || dec_moe_layers > dec_layers) {
        throw ValidationError("scenario: more MoE layers than layers");
    }
    if (top_k == 0 || top_k > num_experts) {
        throw ValidationError("scenario: need 1 <= top_k <= num_experts");
    }
    require_positive(min_expert_batch, "scenario: min_expert_batch");
}

double comm_bytes_per_token(const ServingScenario& s, const HardwareProfile& hw) {
    return 2.0 * static_cast<double>(s.top_k) * static_cast<double>(s.d_model) * hw.bytes_per_value;
}

StepBreakdown step_time(const ServingScenario& s, const HardwareProfile& hw) {
    s.validate();
    hw.validate();
    const double enc_tokens = static_cast<double>(s.sentences * s.src_len);
    const double dec_tokens = static_cast<double>(s.sentences);
    const double steps = static_cast<double>(s.decode_steps);
    const double rate = static_cast<double>(hw.device_count) * hw.flops_rate;

    const double enc_flops = enc_tokens * flops_per_token(s, Side::Encoder);
    const double dec_flops = steps * dec_tokens * flops_per_token(s, Side::Decoder);
    const double enc_u = utilization(s, s.enc_routing, enc_tokens);
    const double dec_u = utilization(s, s.dec_routing, dec_tokens);

    StepBreakdown b;
    b.flops = enc_flops + dec_flops;
    b.compute_s = enc_flops / (rate * enc_u) + dec_flops / (rate * dec_u);
    b.utilization = enc_u == 1.0 && dec_u == 1.0 ? 1.0 : b.flops / (rate * b.compute_s);
    b.encoder_comm_s = side_comm(s, hw, s.enc_routing, s.enc_moe_layers, enc_tokens, 1.0);
    b.decoder_comm_s = side_comm(s, hw, s.dec_routing, s.dec_moe_layers, dec_tokens, steps);
    b.comm_s = b.encoder_comm_s + b.decoder_comm_s;
    b.generated_tokens = static_cast<std::uint64_t>(s.sentences) * s.decode_steps;
    return b;
}

double comm_fraction(const StepBreakdown& b) {
    const double total = b.compute_s + b.comm_s;
    if (!(total > 0.0)) {
        throw EvaluationError("comm_fraction: step time is zero");
    }
    return b.comm_s / total;
}

std::vector<ThroughputPoint> throughput_curve(const ServingScenario& s, const HardwareProfile& hw,
                                              std::span<const std::size_t> batch_sizes) {
    if (batch_sizes.empty()) {
        throw ValidationError("throughput_curve: empty batch list");
    }
    std::vector<ThroughputPoint> out;
    for (std::size_t batch : batch_sizes) {
        ServingScenario at = s;
        at.sentences = batch;
        const StepBreakdown b = step_time(at, hw);
        out.push_back({batch, static_cast<double>(b.generated_tokens) / b.total_s(), comm_fraction(b)});
    }
    return out;
}

ThroughputPoint peak(std::span<const ThroughputPoint> curve) {
    if (curve.empty()) {
        throw ValidationError("peak: empty curve");
    }
    return *std::max_element(curve.begin(), curve.end(), [](const ThroughputPoint& a, const ThroughputPoint& b) {
        return a.tokens_per_s < b.tokens_per_s;
    });
}

namespace {

ArchDims arch_of(const ServingScenario& s) {
    ArchDims a;
    a.vocab = 0;
    a.softmax_hidden = 0;
    a.d_model = s.d_model;
    a.d_ff = s.d_ff;
    a.enc_layers = s.enc_layers;
    a.dec_layers = s.dec_layers;
    a.moe_every = s.enc_moe_layers > 0 ? std::max<std::size_t>(1, s.enc_layers / s.enc_moe_layers) : s.enc_layers + 1;
    a.num_experts = s.num_experts;
    a.top_k = s.top_k;
    a.enc_routing = s.enc_routing;
    a.dec_routing = s.dec_routing;
    return a;
}

bool same_dims(const ServingScenario& a, const ServingScenario& b) {
    return a.d_model == b.d_model && a.d_ff == b.d_ff && a.enc_layers == b.enc_layers &&
           a.dec_layers == b.dec_layers && a.enc_moe_layers == b.enc_moe_layers &&
           a.dec_moe_layers == b.dec_moe_layers && a.num_experts == b.num_experts && a.top_k == b.top_k;
}

} // namespace

StrategyComparison compare_strategies(const ServingScenario& token, const ServingScenario& task,
                                      const HardwareProfile& hw, std::span<const std::size_t> batch_sizes) {
    if (!same_dims(token, task)) {
        throw ValidationError("compare_strategies: scenarios must share model dims");
    }
    const auto token_curve = throughput_curve(token, hw, batch_sizes);
    const auto task_curve = throughput_curve(task, hw, batch_sizes);
    StrategyComparison c;
    c.token_peak = peak(token_curve);
    c.task_peak = peak(task_curve);
    c.peak_ratio = c.task_peak.tokens_per_s / c.token_peak.tokens_per_s;
    ServingScenario at = token;
    at.sentences = c.token_peak.batch;
    c.token_utilization_at_peak = step_time(at, hw).utilization;
    c.token_effective_params = count_params(arch_of(token)).effective_at_inference;
    c.task_effective_params = count_params(arch_of(task)).effective_at_inference;
    return c;
}

namespace {

// Bisection in log space for a monotone function; `decreasing` gives its direction.
template <typename F>
double solve_log(F&& f, double target, double lo, double hi, bool decreasing) {
    double a = std::log(lo);
    double b = std::log(hi);
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (a + b);
        const double v = f(std::exp(mid));
        if ((v > target) == decreasing) {
            a = mid;
        } else {
            b = mid;
        }
    }
    return std::exp(0.5 * (a + b));
}

} // namespace

Calibration calibrate(const ServingScenario& token, const HardwareProfile& hw, std::size_t batch,
                      const CalibrationTarget& target) {
    if (!(target.utilization > 0.0 && target.utilization <= 1.0)) {
        throw ValidationError("calibrate: utilization target must be in (0, 1]");
    }
    if (!(target.comm_fraction > 0.0 && target.comm_fraction < 1.0)) {
        throw ValidationError("calibrate: comm fraction target must be in (0, 1)");
    }
    Calibration c{token, hw, 0.0, 1.0};
    c.scenario.sentences = batch;
    c.scenario.validate();
    c.hardware.validate();
    if (task_level(token.enc_routing) && task_level(token.dec_routing)) {
        throw ValidationError("calibrate: scenario has no token- or sentence-routed side");
    }
    if (c.hardware.device_count < 2) {
        throw ValidationError("calibrate: communication needs at least two devices");
    }

    auto u_at = [&](double b_min) {
        ServingScenario s = c.scenario;
        s.min_expert_batch = b_min;
        return step_time(s, c.hardware).utilization;
    };
    if (target.utilization == 1.0) {
        c.scenario.min_expert_batch = static_cast<double>(batch) * static_cast<double>(token.top_k) /
                                      static_cast<double>(token.num_experts);
    } else {
        c.scenario.min_expert_batch = solve_log(u_at, target.utilization, 1e-6, 1e15, true);
    }

    auto f_at = [&](double bw) {
        HardwareProfile h = c.hardware;
        h.link_bandwidth = bw;
        return comm_fraction(step_time(c.scenario, h));
    };
    if (f_at(1e300) >= target.comm_fraction) {
        throw ValidationError("calibrate: latency alone exceeds the communication fraction target");
    }
    c.hardware.link_bandwidth = solve_log(f_at, target.comm_fraction, 1e-6, 1e300, true);

    const StepBreakdown b = step_time(c.scenario, c.hardware);
    c.achieved_comm_fraction = comm_fraction(b);
    c.achieved_utilization = b.utilization;
    return c;
}

std::string hardware_to_json(const HardwareProfile& hw) {
    const json j = {{"device_count", hw.device_count},
                    {"flops_rate", hw.flops_rate},
                    {"link_bandwidth", hw.link_bandwidth},
                    {"per_step_latency", hw.per_step_latency},
                    {"bytes_per_value", hw.bytes_per_value}};
    return j.dump(2);
}

HardwareProfile hardware_from_json(const std::string& text) {
    return parse_or_throw(text, "hardware", [](const json& j) {
        check_keys(j, {"device_count", "flops_rate", "link_bandwidth", "per_step_latency", "bytes_per_value"},
                   "hardware");
        HardwareProfile hw;
        opt(j, "device_count", hw.device_count);
        opt(j, "flops_rate", hw.flops_rate);
        opt(j, "link_bandwidth", hw.link_bandwidth);
        opt(j, "per_step_latency", hw.per_step_latency);
        opt(j, "bytes_per_value", hw.bytes_per_value);
        hw.validate();
        return hw;
    });
}

std::string scenario_to_json(const ServingScenario& s) {
    const json j = {{"enc_routing", to_string(s.enc_routing)},
                    {"dec_routing", to_string(s.dec_routing)},
                    {"d_model", s.d_model},
                    {"d_ff", s.d_ff},
                    {"enc_layers", s.enc_layers},
                    {"dec_layers", s.dec_layers},
                    {"enc_moe_layers", s.enc_moe_layers},
                    {"dec_moe_layers", s.dec_moe_layers},
                    {"num_experts", s.num_experts},
                    {"top_k", s.top_k},
                    {"sentences", s.sentences},
                    {"src_len", s.src_len},
                    {"decode_steps", s.decode_steps},
                    {"min_expert_batch", s.min_expert_batch}};
    return j.dump(2);
}

ServingScenario scenario_from_json(const std::string& text) {
    return parse_or_throw(text, "scenario", [](const json& j) {
        check_keys(j,
                   {"enc_routing", "dec_routing", "d_model", "d_ff", "enc_layers", "dec_layers", "enc_moe_layers",
                    "dec_moe_layers", "num_experts", "top_k", "sentences", "src_len", "decode_steps",
                    "min_expert_batch"},
                   "scenario");
        ServingScenario s;
        if (const auto it = j.find("enc_routing"); it != j.end()) {
            s.enc_routing = parse_routing_kind(it->get<std::string>());
        }
        if (const auto it = j.find("dec_routing"); it != j.end()) {
            s.dec_routing = parse_routing_kind(it->get<std::string>());
        }
        opt(j, "d_model", s.d_model);
        opt(j, "d_ff", s.d_ff);
        opt(j, "enc_layers", s.enc_layers);
        opt(j, "dec_layers", s.dec_layers);
        opt(j, "enc_moe_layers", s.enc_moe_layers);
        opt(j, "dec_moe_layers", s.dec_moe_layers);
        opt(j, "num_experts", s.num_experts);
        opt(j, "top_k", s.top_k);
        opt(j, "sentences", s.sentences);
        opt(j, "src_len", s.src_len);
        opt(j, "decode_steps", s.decode_steps);
        opt(j, "min_expert_batch", s.min_expert_batch);
        s.validate();
        return s;
    });
}

CalibrationTarget calibration_target_from_json(const std::string& text) {
    return parse_or_throw(text, "calibration", [](const json& j) {
        check_keys(j, {"comm_fraction", "utilization"}, "calibration");
        CalibrationTarget t;
        opt(j, "comm_fraction", t.comm_fraction);
        opt(j, "utilization", t.utilization);
        return t;
    });
}

std::string to_csv(std::span<const ThroughputPoint> curve) {
    std::string out = "batch,tokens_per_s,comm_fraction\n";
    char buf[96];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", p.batch, p.tokens_per_s, p.comm_fraction);
        out += buf;
    }
    return out;
}

} // namespace taskmoe
