#include "taskmoe/extraction.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "json_support.hpp"
#include "taskmoe/error.hpp"

namespace taskmoe {

namespace {

const char* side_name(Side side) { return side == Side::Encoder ? "encoder" : "decoder"; }

template <typename Blocks>
const MoELayerParams* moe_at(const Blocks& blocks, std::size_t i) {
    return std::get_if<MoELayerParams>(&blocks.at(i).ffn);
}

template <typename Blocks>
MoELayerParams* moe_at(Blocks& blocks, std::size_t i) {
    return std::get_if<MoELayerParams>(&blocks.at(i).ffn);
}

const MoELayerParams* find_layer(const Seq2SeqModel& model, Side side, std::size_t block) {
    return side == Side::Encoder ? moe_at(model.encoder_blocks(), block) : moe_at(model.decoder_blocks(), block);
}

MoELayerParams* find_layer(Seq2SeqModel& model, Side side, std::size_t block) {
    return side == Side::Encoder ? moe_at(model.encoder_blocks(), block) : moe_at(model.decoder_blocks(), block);
}

std::vector<Side> default_sides(const Seq2SeqModel& model) {
    std::vector<Side> out;
    for (Side side : {Side::Encoder, Side::Decoder}) {
        if (model.config().strategy(side).is_task_level() && model.config().moe_layers(side) > 0) {
            out.push_back(side);
        }
    }
    if (out.empty()) {
        throw NotExtractableError("no task-routed MoE layers to extract");
    }
    return out;
}

std::size_t side_blocks(const Seq2SeqModel& model, Side side) {
    return side == Side::Encoder ? model.encoder_blocks().size() : model.decoder_blocks().size();
}

void drop_gate(MoELayerParams& layer) {
    layer.gate = GateNetwork{};
}

} // namespace

void TaskExpertMap::validate(std::size_t top_k, std::size_t num_experts) const {
    for (const LayerRoute& l : layers) {
        const auto& r = l.route;
        if (r.expert_ids.size() != top_k || r.weights.size() != top_k) {
            throw ValidationError("task expert map: layer needs exactly " + std::to_string(top_k) + " experts");
        }
        std::set<std::size_t> seen(r.expert_ids.begin(), r.expert_ids.end());
        if (seen.size() != top_k || *seen.rbegin() >= num_experts) {
            throw ValidationError("task expert map: expert ids must be distinct and below " +
                                  std::to_string(num_experts));
        }
        double sum = 0.0;
        for (double w : r.weights) {
            if (!std::isfinite(w) || w < 0.0) {
                throw ValidationError("task expert map: weights must be finite and non-negative");
            }
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-12) {
            throw ValidationError("task expert map: weights must sum to one");
        }
    }
}

TaskExpertMap resolve_task_experts(const Seq2SeqModel& model, const TaskKey& task, std::span<const Side> sides) {
    const std::vector<Side> chosen = sides.empty() ? default_sides(model)
                                                   : std::vector<Side>(sides.begin(), sides.end());
    TaskExpertMap map;
    map.task = task;
    for (Side side : {Side::Encoder, Side::Decoder}) {
        if (std::find(chosen.begin(), chosen.end(), side) == chosen.end()) {
            continue;
        }
        const RoutingStrategy& s = model.config().strategy(side);
        if (!s.is_task_level()) {
            throw NotExtractableError(std::string(side_name(side)) + " uses " + to_string(s) +
                                      " routing, which depends on the input");
        }
        std::optional<std::size_t> row;
        for (std::size_t b = 0; b < side_blocks(model, side); ++b) {
            const MoELayerParams* layer = find_layer(model, side, b);
            if (layer == nullptr) {
                continue;
            }
            if (layer->frozen) {
                if (model.extracted_task() && *model.extracted_task() != task) {
                    throw UnknownTaskError("sub-network was extracted for task " +
                                           to_string(*model.extracted_task()) + ", not " + to_string(task));
                }
                map.layers.push_back({side, b, *layer->frozen});
                continue;
            }
            if (!row) {
                row = model.routing_row(side, task);
            }
            GateDecision d = gate_task(*row, layer->gate, layer->config, s.kind);
            map.layers.push_back({side, b, FrozenRoute{std::move(d.expert_ids), std::move(d.weights)}});
        }
    }
    return map;
}

void apply_task_expert_map(Seq2SeqModel& model, const TaskExpertMap& map) {
    map.validate(model.config().moe.top_k, model.config().moe.num_experts);
    for (const LayerRoute& l : map.layers) {
        MoELayerParams* layer = find_layer(model, l.side, l.block);
        if (layer == nullptr) {
            throw ValidationError("task expert map names a dense block");
        }
        if (layer->frozen) {
            if (*layer->frozen != l.route) {
                throw ValidationError("block is already frozen to a different route");
            }
            continue;
        }
        std::vector<ExpertParams> kept;
        for (std::size_t id : l.route.expert_ids) {
            kept.push_back(layer->experts.at(id));
        }
        layer->experts = std::move(kept);
        layer->frozen = l.route;
        drop_gate(*layer);
    }
    model.set_extracted_task(map.task);
}

void shape_as_subnetwork(Seq2SeqModel& model, const TaskExpertMap& map) {
    const ModelConfig& cfg = model.config();
    map.validate(cfg.moe.top_k, cfg.moe.num_experts);
    for (const LayerRoute& l : map.layers) {
        MoELayerParams* layer = find_layer(model, l.side, l.block);
        if (layer == nullptr) {
            throw ValidationError("task expert map names a dense block");
        }
        layer->experts.assign(l.route.expert_ids.size(), ExpertParams{Parameter(cfg.d_model, cfg.moe.d_ff),
                                                                      Parameter(cfg.moe.d_ff, cfg.d_model)});
        layer->frozen = l.route;
        drop_gate(*layer);
    }
    model.set_extracted_task(map.task);
}

TaskExpertMap frozen_routes(const Seq2SeqModel& model) {
    TaskExpertMap map;
    if (model.extracted_task()) {
        map.task = *model.extracted_task();
    }
    for (Side side : {Side::Encoder, Side::Decoder}) {
        for (std::size_t b = 0; b < side_blocks(model, side); ++b) {
            const MoELayerParams* layer = find_layer(model, side, b);
            if (layer != nullptr && layer->frozen) {
                map.layers.push_back({side, b, *layer->frozen});
            }
        }
    }
    return map;
}

Seq2SeqModel extract_subnetwork(const Seq2SeqModel& model, const TaskKey& task, std::span<const Side> sides) {
    const TaskExpertMap map = resolve_task_experts(model, task, sides);
    Seq2SeqModel sub = model;
    apply_task_expert_map(sub, map);
    return sub;
}

EquivalenceReport verify_equivalence(const Seq2SeqModel& full, const Seq2SeqModel& sub, std::span<const Sample> corpus,
                                     const TaskKey& task) {
    EquivalenceReport report;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& src = corpus[i].src;
        std::vector<std::vector<double>> la;
        std::vector<std::vector<double>> lb;
        const auto a = full.greedy_decode(src, task, src.size() + 4, nullptr, &la);
        const auto b = sub.greedy_decode(src, task, src.size() + 4, nullptr, &lb);
        ++report.sentences;
        const std::size_t steps = std::min(la.size(), lb.size());
        std::optional<std::size_t> diverged;
        for (std::size_t s = 0; s < steps; ++s) {
            ++report.steps_compared;
            const auto& x = la[s];
            const auto& y = lb[s];
            if (x.size() != y.size()) {
                throw ShapeError("verify_equivalence: logit widths differ");
            }
            bool differs = false;
            for (std::size_t v = 0; v < x.size(); ++v) {
                const double d = std::abs(x[v] - y[v]);
                if (d != 0.0 || std::isnan(d)) {
                    differs = true;
                    report.max_abs_diff = std::max(report.max_abs_diff, std::isnan(d) ? INFINITY : d);
                }
            }
            const bool token_diff = s < a.size() && s < b.size() && a[s] != b[s];
            if ((differs || token_diff) && !diverged) {
                diverged = s;
            }
            if (token_diff) {
                break;
            }
        }
        if (a != b) {
            report.tokens_identical = false;
            if (!diverged) {
                diverged = steps;
            }
        }
        if (diverged && !report.first_divergent_sentence) {
            report.first_divergent_sentence = i;
            report.first_divergent_step = diverged;
        }
    }
    return report;
}

namespace {

std::uint64_t size_of(const Parameter& p) { return p.value.rows() * p.value.cols(); }

std::uint64_t attention_size(const AttentionParams& a) {
    return size_of(a.wq) + size_of(a.wk) + size_of(a.wv) + size_of(a.wo);
}

struct FfnCount {
    std::uint64_t total = 0;
    std::uint64_t effective = 0;
};

FfnCount ffn_size(const FfnSlot& slot) {
    if (const auto* dense = std::get_if<DenseFfnParams>(&slot)) {
        const std::uint64_t n = size_of(dense->w1) + size_of(dense->w2);
        return {n, n};
    }
    const auto& moe = std::get<MoELayerParams>(slot);
    std::uint64_t per_expert = 0;
    std::uint64_t experts = 0;
    for (const auto& e : moe.experts) {
        per_expert = size_of(e.wi) + size_of(e.wo);
        experts += per_expert;
    }
    std::uint64_t gate = 0;
    if (!moe.frozen) {
        gate = size_of(moe.gate.token_proj) + size_of(moe.gate.task_logits);
    }
    FfnCount c{experts + gate, experts + gate};
    if (!moe.frozen && moe.strategy.is_task_level()) {
        c.effective = per_expert * std::min<std::uint64_t>(moe.config.top_k, moe.experts.size());
    }
    return c;
}

} // namespace

ParamBreakdown count_params(const Seq2SeqModel& model) {
    ParamBreakdown p;
    p.vocabulary = size_of(model.embedding());
    for (const auto& b : model.encoder_blocks()) {
        const std::uint64_t attn = attention_size(b.self_attn);
        const FfnCount f = ffn_size(b.ffn);
        p.encoder += attn + f.total;
        p.effective_encoder += attn + f.effective;
    }
    for (const auto& b : model.decoder_blocks()) {
        const std::uint64_t attn = attention_size(b.self_attn) + attention_size(b.cross_attn);
        const FfnCount f = ffn_size(b.ffn);
        p.decoder += attn + f.total;
        p.effective_decoder += attn + f.effective;
    }
    p.total = p.vocabulary + p.encoder + p.decoder + p.softmax;
    p.effective_at_inference = p.vocabulary + p.effective_encoder + p.effective_decoder + p.softmax;
    return p;
}

ParamBreakdown count_params(const ArchDims& a) {
    if (a.moe_every == 0 || a.num_experts == 0 || (a.num_experts > 1 && (a.top_k == 0 || a.top_k > a.num_experts))) {
        throw ValidationError("arch dims: need moe_every >= 1 and 1 <= top_k <= num_experts");
    }
    const std::uint64_t d = a.d_model;
    const std::uint64_t attn = 4 * d * d;
    const std::uint64_t ffn = 2 * d * a.d_ff;
    const bool dense = a.num_experts == 1;
    auto side = [&](std::uint64_t layers, std::uint64_t attentions, RoutingKind kind, std::uint64_t& total,
                    std::uint64_t& effective) {
        const bool task_level = kind == RoutingKind::Task || kind == RoutingKind::StaticPartition;
        const std::uint64_t gate = a.include_gate && !task_level ? d * a.num_experts : 0;
        const std::uint64_t served = a.task_side_experts == 0 ? a.top_k : a.task_side_experts;
        for (std::uint64_t i = 0; i < layers; ++i) {
            total += attentions * attn;
            effective += attentions * attn;
            if (dense || (i + 1) % a.moe_every != 0) {
                total += ffn;
                effective += ffn;
                continue;
            }
            total += a.num_experts * ffn + gate;
            effective += task_level ? served * ffn : a.num_experts * ffn + gate;
        }
    };
    ParamBreakdown p;
    p.vocabulary = a.vocab * d;
    p.softmax = a.vocab * a.softmax_hidden;
    side(a.enc_layers, 1, a.enc_routing, p.encoder, p.effective_encoder);
    side(a.dec_layers, 2, a.dec_routing, p.decoder, p.effective_decoder);
    p.total = p.vocabulary + p.encoder + p.decoder + p.softmax;
    p.effective_at_inference = p.vocabulary + p.effective_encoder + p.effective_decoder + p.softmax;
    return p;
}

ArchDims arch_dims_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        require_known_keys(j,
                           {"vocab", "d_model", "d_ff", "enc_layers", "dec_layers", "moe_every", "num_experts",
                            "top_k", "softmax_hidden", "enc_routing", "dec_routing", "task_side_experts",
                            "include_gate"},
                           "arch dims");
        ArchDims a;
        read_optional(j, "vocab", a.vocab);
        read_optional(j, "d_model", a.d_model);
        read_optional(j, "d_ff", a.d_ff);
        read_optional(j, "enc_layers", a.enc_layers);
        read_optional(j, "dec_layers", a.dec_layers);
        read_optional(j, "moe_every", a.moe_every);
        read_optional(j, "num_experts", a.num_experts);
        read_optional(j, "top_k", a.top_k);
        read_optional(j, "softmax_hidden", a.softmax_hidden);
        read_optional(j, "task_side_experts", a.task_side_experts);
        read_optional(j, "include_gate", a.include_gate);
        if (const auto it = j.find("enc_routing"); it != j.end()) {
            a.enc_routing = parse_routing_kind(it->get<std::string>());
        }
        if (const auto it = j.find("dec_routing"); it != j.end()) {
            a.dec_routing = parse_routing_kind(it->get<std::string>());
        }
        count_params(a);   // validates
        return a;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("arch dims: ") + e.what());
    }
}

std::string to_csv(const ParamBreakdown& p) {
    std::ostringstream out;
    out << "component,count\n"
        << "vocabulary," << p.vocabulary << '\n'
        << "encoder," << p.encoder << '\n'
        << "decoder," << p.decoder << '\n'
        << "softmax," << p.softmax << '\n'
        << "total," << p.total << '\n'
        << "effective_encoder," << p.effective_encoder << '\n'
        << "effective_decoder," << p.effective_decoder << '\n'
        << "effective_at_inference," << p.effective_at_inference << '\n';
    return out.str();
}

} // namespace taskmoe
