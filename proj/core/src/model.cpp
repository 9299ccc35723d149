#include "taskmoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "taskmoe/error.hpp"
#include "taskmoe/ops.hpp"
#include "taskmoe/rng.hpp"

namespace taskmoe {

std::string to_string(const TaskKey& t) {
    return std::to_string(t.source_lang) + ":" + std::to_string(t.target_lang);
}

TaskKey parse_task_key(const std::string& text) {
    const auto colon = text.find(':');
    try {
        if (colon == std::string::npos) {
            throw ValidationError("");
        }
        std::size_t used = 0;
        const std::string a = text.substr(0, colon);
        const std::string b = text.substr(colon + 1);
        const auto src = std::stoull(a, &used);
        if (used != a.size()) {
            throw ValidationError("");
        }
        const auto tgt = std::stoull(b, &used);
        if (used != b.size()) {
            throw ValidationError("");
        }
        return {static_cast<std::size_t>(src), static_cast<std::size_t>(tgt)};
    } catch (const std::exception&) {
        throw ValidationError("task must look like SRC:TGT (language ids), got '" + text + "'");
    }
}

std::size_t ModelConfig::routing_rows(TaskBoundary boundary) const {
    if (boundary == TaskBoundary::LanguagePair) {
        return tasks.size();
    }
    std::size_t rows = 0;
    for (const auto& t : tasks) {
        rows = std::max(rows, t.target_lang + 1);
    }
    return rows;
}

std::size_t ModelConfig::moe_layers(Side side) const {
    const std::size_t blocks = side == Side::Encoder ? enc_layers : dec_layers;
    std::size_t n = 0;
    for (std::size_t i = 0; i < blocks; ++i) {
        n += is_moe_block(i) ? 1 : 0;
    }
    return n;
}

void ModelConfig::validate() const {
    if (d_model == 0 || d_ff == 0 || num_symbols == 0) {
        throw ValidationError("model config: dimensions must be positive");
    }
    if (moe_every == 0) {
        throw ValidationError("model config: moe_every must be >= 1");
    }
    if (max_len < 2) {
        throw ValidationError("model config: max_len must be >= 2");
    }
    moe.validate();
    if (moe.d_model != d_model) {
        throw ValidationError("model config: moe.d_model must equal d_model");
    }
    enc_strategy.validate();
    dec_strategy.validate();
    if (tasks.empty()) {
        throw ValidationError("model config: at least one task must be registered");
    }
    std::set<TaskKey> seen;
    std::size_t max_target = 0;
    for (const auto& t : tasks) {
        if (!seen.insert(t).second) {
            throw ValidationError("model config: duplicate task " + to_string(t));
        }
        max_target = std::max(max_target, t.target_lang);
    }
    if (vocab_size < task_token(max_target) + 1) {
        throw ValidationError("model config: vocab_size " + std::to_string(vocab_size) + " too small for " +
                              std::to_string(num_symbols) + " symbols, BOS, EOS and " +
                              std::to_string(max_target + 1) + " task tokens");
    }
    auto check_map = [this](const RoutingStrategy& s, const std::vector<std::vector<std::size_t>>& map,
                            const char* side) {
        if (s.kind != RoutingKind::StaticPartition || map.empty()) {
            return;
        }
        if (map.size() != routing_rows(*s.boundary)) {
            throw ValidationError(std::string("model config: ") + side + " static map needs one entry per task row");
        }
    };
    check_map(enc_strategy, enc_static_map, "encoder");
    check_map(dec_strategy, dec_static_map, "decoder");
}

std::size_t global_expert_id(const MoELayerParams& layer, std::size_t local_id) {
    return layer.frozen ? layer.frozen->expert_ids.at(local_id) : local_id;
}

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, bool causal) {
    if (q.cols() != k.cols() || k.rows() != v.rows()) {
        throw ShapeError("attention: incompatible q/k/v shapes");
    }
    Matrix scores = matmul_nt(q, k);
    scores *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
    if (causal) {
        for (std::size_t i = 0; i < scores.rows(); ++i) {
            for (std::size_t j = i + 1; j < scores.cols(); ++j) {
                scores(i, j) = -std::numeric_limits<double>::infinity();
            }
        }
    }
    return affine(softmax_rows(scores), v);
}

Matrix sinusoidal_positions(std::size_t length, std::size_t d_model) {
    Matrix pe(length, d_model);
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < d_model; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
            pe(pos, i) = std::sin(static_cast<double>(pos) * freq);
            if (i + 1 < d_model) {
                pe(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
            }
        }
    }
    return pe;
}

// ---------------------------------------------------------------------------
// Forward traces

namespace {

struct AttnTrace {
    Matrix xn, kv, q, k, v, probs, ctx;
};

struct FfnTrace {
    Matrix xn, pre, hidden;
    MoECache moe;
    bool is_moe = false;
};

struct EncTrace {
    Matrix n1, h, n2;
    AttnTrace self;
    FfnTrace ffn;
    Matrix x_in;
};

struct DecTrace {
    Matrix x_in, n1, h1, n2, h2, n3;
    AttnTrace self, cross;
    FfnTrace ffn;
};

Matrix attend(const AttentionParams& p, const Matrix& xn, const Matrix& kv, bool causal, AttnTrace* t) {
    Matrix q = affine(xn, p.wq.value);
    Matrix k = affine(kv, p.wk.value);
    Matrix v = affine(kv, p.wv.value);
    Matrix scores = matmul_nt(q, k);
    scores *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
    if (causal) {
        for (std::size_t i = 0; i < scores.rows(); ++i) {
            for (std::size_t j = i + 1; j < scores.cols(); ++j) {
                scores(i, j) = -std::numeric_limits<double>::infinity();
            }
        }
    }
    Matrix probs = softmax_rows(scores);
    Matrix ctx = affine(probs, v);
    Matrix out = affine(ctx, p.wo.value);
    if (t != nullptr) {
        t->xn = xn;
        t->kv = kv;
        t->q = std::move(q);
        t->k = std::move(k);
        t->v = std::move(v);
        t->probs = std::move(probs);
        t->ctx = std::move(ctx);
    }
    return out;
}

/// Accumulates into dxn and dkv (which may alias for self-attention).
void attend_backward(AttentionParams& p, const AttnTrace& t, const Matrix& dout, Matrix& dxn, Matrix& dkv) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(t.q.cols()));
    Matrix dctx(t.ctx.rows(), t.ctx.cols());
    affine_backward(t.ctx, p.wo.value, dout, &dctx, &p.wo.grad);
    const Matrix dprobs = matmul_nt(dctx, t.v);
    const Matrix dv = affine(t.probs.transposed(), dctx);
    Matrix dscores(t.probs.rows(), t.probs.cols());
    for (std::size_t i = 0; i < t.probs.rows(); ++i) {
        const auto dz = softmax_backward(t.probs.row(i), dprobs.row(i));
        auto dst = dscores.row(i);
        for (std::size_t j = 0; j < dz.size(); ++j) {
            dst[j] = dz[j] * scale;
        }
    }
    const Matrix dq = affine(dscores, t.k);
    const Matrix dk = affine(dscores.transposed(), t.q);
    affine_backward(t.xn, p.wq.value, dq, &dxn, &p.wq.grad);
    affine_backward(t.kv, p.wk.value, dk, &dkv, &p.wk.grad);
    affine_backward(t.kv, p.wv.value, dv, &dkv, &p.wv.grad);
}

} // namespace

struct Seq2SeqModel::Trace {
    std::vector<std::size_t> enc_tokens;
    std::vector<std::size_t> dec_tokens;
    std::vector<EncTrace> enc;
    Matrix enc_final_in;
    Matrix memory;
    std::vector<DecTrace> dec;
    Matrix dec_final_in;
    Matrix dec_final_n;
};

// ---------------------------------------------------------------------------
// Construction

namespace {

AttentionParams zero_attention(std::size_t d) {
    return {Parameter(d, d), Parameter(d, d), Parameter(d, d), Parameter(d, d)};
}

FfnSlot zero_ffn(const ModelConfig& cfg) {
    return DenseFfnParams{Parameter(cfg.d_model, cfg.d_ff), Parameter(cfg.d_ff, cfg.d_model)};
}

MoELayerParams zero_moe(const ModelConfig& cfg, Side side) {
    const RoutingStrategy& s = cfg.strategy(side);
    MoELayerParams layer;
    layer.config = cfg.moe;
    layer.strategy = s;
    for (std::size_t e = 0; e < cfg.moe.num_experts; ++e) {
        layer.experts.push_back(
            {Parameter(cfg.d_model, cfg.moe.d_ff), Parameter(cfg.moe.d_ff, cfg.d_model)});
    }
    switch (s.kind) {
    case RoutingKind::Token:
    case RoutingKind::Sentence:
        layer.gate.token_proj = Parameter(cfg.d_model, cfg.moe.num_experts);
        break;
    case RoutingKind::Task:
        layer.gate.task_logits = Parameter(cfg.routing_rows(*s.boundary), cfg.moe.num_experts);
        break;
    case RoutingKind::StaticPartition: {
        const auto& map = side == Side::Encoder ? cfg.enc_static_map : cfg.dec_static_map;
        layer.gate.static_map = map.empty() ? default_static_map(cfg.routing_rows(*s.boundary), cfg.moe) : map;
        break;
    }
    }
    return layer;
}

void fill_normal(Parameter& p, Rng& rng, double stddev) {
    for (double& v : p.value.data()) {
        v = rng.normal() * stddev;
    }
}

} // namespace

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d_model;
    embedding_ = Parameter(config_.vocab_size, d);
    for (std::size_t i = 0; i < config_.enc_layers; ++i) {
        EncoderBlock b{zero_attention(d), zero_ffn(config_)};
        if (config_.is_moe_block(i)) {
            b.ffn = zero_moe(config_, Side::Encoder);
        }
        encoder_.push_back(std::move(b));
    }
    for (std::size_t i = 0; i < config_.dec_layers; ++i) {
        DecoderBlock b{zero_attention(d), zero_attention(d), zero_ffn(config_)};
        if (config_.is_moe_block(i)) {
            b.ffn = zero_moe(config_, Side::Decoder);
        }
        decoder_.push_back(std::move(b));
    }
    positions_ = sinusoidal_positions(config_.max_len, d);
}

Seq2SeqModel Seq2SeqModel::initialize(const ModelConfig& config, std::uint64_t seed) {
    Seq2SeqModel model(config);
    Rng rng(seed);
    fill_normal(model.embedding_, rng, config.embed_init_std);
    auto init = [&rng](Parameter& p) {
        fill_normal(p, rng, 1.0 / std::sqrt(static_cast<double>(p.value.rows())));
    };
    for (auto& np : model.named_parameters()) {
        if (np.name == "embedding") {
            continue;
        }
        if (np.name.ends_with("task_logits")) {
            fill_normal(*np.param, rng, 1.0);
        } else {
            init(*np.param);
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

void name_attention(std::vector<NamedParameter>& out, const std::string& prefix, AttentionParams& a) {
    out.push_back({prefix + ".wq", &a.wq});
    out.push_back({prefix + ".wk", &a.wk});
    out.push_back({prefix + ".wv", &a.wv});
    out.push_back({prefix + ".wo", &a.wo});
}

void name_ffn(std::vector<NamedParameter>& out, const std::string& prefix, FfnSlot& slot) {
    if (auto* dense = std::get_if<DenseFfnParams>(&slot)) {
        out.push_back({prefix + ".ffn.w1", &dense->w1});
        out.push_back({prefix + ".ffn.w2", &dense->w2});
        return;
    }
    auto& moe = std::get<MoELayerParams>(slot);
    for (std::size_t e = 0; e < moe.experts.size(); ++e) {
        const std::string ex = prefix + ".moe.expert." + std::to_string(global_expert_id(moe, e));
        out.push_back({ex + ".wi", &moe.experts[e].wi});
        out.push_back({ex + ".wo", &moe.experts[e].wo});
    }
    if (moe.frozen) {
        return;
    }
    if (!moe.gate.token_proj.value.empty()) {
        out.push_back({prefix + ".moe.gate.token_proj", &moe.gate.token_proj});
    }
    if (!moe.gate.task_logits.value.empty()) {
        out.push_back({prefix + ".moe.gate.task_logits", &moe.gate.task_logits});
    }
}

} // namespace

std::vector<NamedParameter> Seq2SeqModel::named_parameters() {
    std::vector<NamedParameter> out;
    out.push_back({"embedding", &embedding_});
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        const std::string prefix = "enc." + std::to_string(i);
        name_attention(out, prefix + ".self_attn", encoder_[i].self_attn);
        name_ffn(out, prefix, encoder_[i].ffn);
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        const std::string prefix = "dec." + std::to_string(i);
        name_attention(out, prefix + ".self_attn", decoder_[i].self_attn);
        name_attention(out, prefix + ".cross_attn", decoder_[i].cross_attn);
        name_ffn(out, prefix, decoder_[i].ffn);
    }
    return out;
}

std::vector<Parameter*> Seq2SeqModel::parameters() {
    std::vector<Parameter*> out;
    for (auto& np : named_parameters()) {
        out.push_back(np.param);
    }
    return out;
}

void Seq2SeqModel::zero_grad() {
    for (Parameter* p : parameters()) {
        p->zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Routing ids

std::size_t Seq2SeqModel::routing_row(Side side, const TaskKey& task) const {
    const RoutingStrategy& s = config_.strategy(side);
    if (!s.is_task_level()) {
        throw ValidationError("routing_row: side is not task-routed");
    }
    const auto& tasks = config_.tasks;
    if (*s.boundary == TaskBoundary::TargetLanguage) {
        const bool known = std::any_of(tasks.begin(), tasks.end(),
                                       [&](const TaskKey& t) { return t.target_lang == task.target_lang; });
        if (!known) {
            throw UnknownTaskError("no registered task targets language " + std::to_string(task.target_lang));
        }
        return task.target_lang;
    }
    const auto it = std::find(tasks.begin(), tasks.end(), task);
    if (it != tasks.end()) {
        return static_cast<std::size_t>(it - tasks.begin());
    }
    if (config_.zero_shot_fallback) {
        const auto same_target = std::find_if(tasks.begin(), tasks.end(),
                                              [&](const TaskKey& t) { return t.target_lang == task.target_lang; });
        if (same_target != tasks.end()) {
            return static_cast<std::size_t>(same_target - tasks.begin());
        }
    }
    throw UnknownTaskError("unknown language pair " + to_string(task));
}

std::optional<std::size_t> Seq2SeqModel::side_row(Side side, const TaskKey& task) const {
    if (extracted_task_ && *extracted_task_ != task) {
        throw UnknownTaskError("sub-network was extracted for task " + to_string(*extracted_task_) +
                               ", not " + to_string(task));
    }
    if (!config_.strategy(side).is_task_level()) {
        return std::nullopt;
    }
    return routing_row(side, task);
}

std::vector<std::size_t> Seq2SeqModel::encoder_input(std::span<const std::size_t> src, const TaskKey& task) const {
    std::vector<std::size_t> tokens;
    tokens.reserve(src.size() + 2);
    tokens.push_back(config_.task_token(task.target_lang));
    tokens.insert(tokens.end(), src.begin(), src.end());
    tokens.push_back(config_.eos());
    return tokens;
}

std::vector<std::size_t> Seq2SeqModel::encoder_input(const Sample& sample) const {
    return encoder_input(sample.src, sample.task);
}

// ---------------------------------------------------------------------------
// Forward

Matrix Seq2SeqModel::embed(std::span<const std::size_t> tokens) const {
    if (tokens.size() > config_.max_len) {
        throw ShapeError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                         std::to_string(config_.max_len));
    }
    const std::size_t d = config_.d_model;
    const double scale = std::sqrt(static_cast<double>(d));
    Matrix x(tokens.size(), d);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= config_.vocab_size) {
            throw IndexError("token " + std::to_string(tokens[t]) + " outside vocabulary of " +
                             std::to_string(config_.vocab_size));
        }
        auto e = embedding_.value.row(tokens[t]);
        auto p = positions_.row(t);
        auto dst = x.row(t);
        for (std::size_t c = 0; c < d; ++c) {
            dst[c] = scale * e[c] + p[c];
        }
    }
    return x;
}

namespace {

Matrix run_ffn(const FfnSlot& slot, const Matrix& xn, std::optional<std::size_t> row, Side side,
               std::size_t moe_index, RoutingObserver* observer, FfnTrace* t) {
    if (const auto* dense = std::get_if<DenseFfnParams>(&slot)) {
        Matrix pre = affine(xn, dense->w1.value);
        Matrix hidden = relu(pre);
        Matrix out = affine(hidden, dense->w2.value);
        if (t != nullptr) {
            t->xn = xn;
            t->pre = std::move(pre);
            t->hidden = std::move(hidden);
        }
        return out;
    }
    const auto& moe = std::get<MoELayerParams>(slot);
    // Traces exist only on the loss path, which uses training capacity.
    MoEOutput result = moe_forward(moe, xn, row, t != nullptr ? &t->moe : nullptr,
                                   t != nullptr ? MoEPhase::Train : MoEPhase::Inference);
    if (t != nullptr) {
        t->is_moe = true;
    }
    if (observer != nullptr) {
        observer->on_dispatch(side, moe_index, moe, result.plan);
    }
    return std::move(result.y);
}

Matrix ffn_backward(FfnSlot& slot, const FfnTrace& t, const Matrix& dout, std::span<const double> aux_grad) {
    if (auto* dense = std::get_if<DenseFfnParams>(&slot)) {
        Matrix dhidden(t.hidden.rows(), t.hidden.cols());
        affine_backward(t.hidden, dense->w2.value, dout, &dhidden, &dense->w2.grad);
        const Matrix dpre = relu_backward(t.pre, dhidden);
        Matrix dxn(t.xn.rows(), t.xn.cols());
        affine_backward(t.xn, dense->w1.value, dpre, &dxn, &dense->w1.grad);
        return dxn;
    }
    return moe_backward(std::get<MoELayerParams>(slot), t.moe, dout, aux_grad);
}

} // namespace

Matrix Seq2SeqModel::run_encoder(std::span<const std::size_t> tokens, const TaskKey& task,
                                 RoutingObserver* observer, Trace* trace) const {
    if (tokens.empty()) {
        throw ShapeError("encode: empty input");
    }
    const std::optional<std::size_t> row = side_row(Side::Encoder, task);
    Matrix x = embed(tokens);
    std::size_t moe_index = 0;
    if (trace != nullptr) {
        trace->enc_tokens.assign(tokens.begin(), tokens.end());
        trace->enc.resize(encoder_.size());
    }
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        const EncoderBlock& b = encoder_[i];
        EncTrace* t = trace != nullptr ? &trace->enc[i] : nullptr;
        Matrix n1 = rms_norm(x);
        Matrix h = x;
        h += attend(b.self_attn, n1, n1, false, t != nullptr ? &t->self : nullptr);
        Matrix n2 = rms_norm(h);
        Matrix out = h;
        out += run_ffn(b.ffn, n2, row, Side::Encoder, moe_index, observer, t != nullptr ? &t->ffn : nullptr);
        if (std::holds_alternative<MoELayerParams>(b.ffn)) {
            ++moe_index;
        }
        if (t != nullptr) {
            t->x_in = std::move(x);
            t->n1 = std::move(n1);
            t->h = std::move(h);
            t->n2 = std::move(n2);
        }
        x = std::move(out);
    }
    Matrix memory = rms_norm(x);
    if (trace != nullptr) {
        trace->enc_final_in = std::move(x);
        trace->memory = memory;
    }
    return memory;
}

Matrix Seq2SeqModel::run_decoder(const Matrix& memory, std::span<const std::size_t> dec_input,
                                 const TaskKey& task, RoutingObserver* observer, Trace* trace) const {
    if (dec_input.empty()) {
        throw ShapeError("decoder: empty input");
    }
    const std::optional<std::size_t> row = side_row(Side::Decoder, task);
    Matrix x = embed(dec_input);
    std::size_t moe_index = 0;
    if (trace != nullptr) {
        trace->dec_tokens.assign(dec_input.begin(), dec_input.end());
        trace->dec.resize(decoder_.size());
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        const DecoderBlock& b = decoder_[i];
        DecTrace* t = trace != nullptr ? &trace->dec[i] : nullptr;
        Matrix n1 = rms_norm(x);
        Matrix h1 = x;
        h1 += attend(b.self_attn, n1, n1, true, t != nullptr ? &t->self : nullptr);
        Matrix n2 = rms_norm(h1);
        Matrix h2 = h1;
        h2 += attend(b.cross_attn, n2, memory, false, t != nullptr ? &t->cross : nullptr);
        Matrix n3 = rms_norm(h2);
        Matrix out = h2;
        out += run_ffn(b.ffn, n3, row, Side::Decoder, moe_index, observer, t != nullptr ? &t->ffn : nullptr);
        if (std::holds_alternative<MoELayerParams>(b.ffn)) {
            ++moe_index;
        }
        if (t != nullptr) {
            t->x_in = std::move(x);
            t->n1 = std::move(n1);
            t->h1 = std::move(h1);
            t->n2 = std::move(n2);
            t->h2 = std::move(h2);
            t->n3 = std::move(n3);
        }
        x = std::move(out);
    }
    Matrix final_n = rms_norm(x);
    Matrix logits = matmul_nt(final_n, embedding_.value);
    if (trace != nullptr) {
        trace->dec_final_in = std::move(x);
        trace->dec_final_n = std::move(final_n);
    }
    return logits;
}

Matrix Seq2SeqModel::encode(std::span<const std::size_t> tokens, const TaskKey& task,
                            RoutingObserver* observer) const {
    if (tokens.empty() || tokens[0] != config_.task_token(task.target_lang)) {
        throw ValidationError("encode: input must start with the task token for target language " +
                              std::to_string(task.target_lang));
    }
    return run_encoder(tokens, task, observer, nullptr);
}

Matrix Seq2SeqModel::decoder_logits(const Matrix& memory, std::span<const std::size_t> dec_input,
                                    const TaskKey& task, RoutingObserver* observer) const {
    return run_decoder(memory, dec_input, task, observer, nullptr);
}

std::vector<std::size_t> Seq2SeqModel::greedy_decode(std::span<const std::size_t> src, const TaskKey& task,
                                                     std::size_t max_len, RoutingObserver* observer,
                                                     std::vector<std::vector<double>>* step_logits) const {
    std::vector<std::size_t> out;
    if (max_len == 0) {
        return out;
    }
    const Matrix memory = encode(encoder_input(src, task), task, observer);

    const std::size_t limit = std::min(max_len, config_.max_len - 1);
    std::vector<std::size_t> prefix{config_.bos()};
    for (std::size_t step = 0; step < limit; ++step) {
        const Matrix logits = run_decoder(memory, prefix, task, observer, nullptr);
        auto last = logits.row(logits.rows() - 1);
        if (step_logits != nullptr) {
            step_logits->emplace_back(last.begin(), last.end());
        }
        const auto best = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
        if (best == config_.eos()) {
            break;
        }
        out.push_back(best);
        prefix.push_back(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss and backward

namespace {

void collect_top1(const FfnTrace& t, std::vector<std::size_t>& top1, std::vector<std::vector<double>>& probs) {
    for (const auto& d : t.moe.plan.decisions) {
        top1.push_back(d.expert_ids.front());
        probs.push_back(d.full_probs);
    }
}

bool has_aux(const FfnSlot& slot) {
    const auto* moe = std::get_if<MoELayerParams>(&slot);
    return moe != nullptr && !moe->frozen && moe->strategy.kind != RoutingKind::StaticPartition;
}

} // namespace

LossBreakdown Seq2SeqModel::forward_loss(std::span<const Sample> batch, bool accumulate_grad,
                                         RoutingObserver* observer) {
    if (batch.empty()) {
        throw ValidationError("forward_loss: empty batch");
    }
    std::vector<Trace> traces(batch.size());
    std::vector<Matrix> logits(batch.size());
    std::vector<std::vector<std::size_t>> targets(batch.size());
    std::size_t total_tokens = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const Sample& s = batch[b];
        const std::vector<std::size_t> enc_in = encoder_input(s);
        std::vector<std::size_t> dec_in{config_.bos()};
        dec_in.insert(dec_in.end(), s.tgt.begin(), s.tgt.end());
        targets[b] = s.tgt;
        targets[b].push_back(config_.eos());
        const Matrix memory = run_encoder(enc_in, s.task, observer, &traces[b]);
        logits[b] = run_decoder(memory, dec_in, s.task, observer, &traces[b]);
        total_tokens += targets[b].size();
    }

    LossBreakdown result;
    result.target_tokens = total_tokens;
    std::vector<Matrix> dlogits(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        Matrix g;
        const double ce = cross_entropy(logits[b], targets[b], accumulate_grad ? &g : nullptr);
        const double share = static_cast<double>(targets[b].size()) / static_cast<double>(total_tokens);
        result.cross_entropy += ce * share;
        if (accumulate_grad) {
            g *= share;
            dlogits[b] = std::move(g);
        }
        for (std::size_t t = 0; t < targets[b].size(); ++t) {
            auto row = logits[b].row(t);
            const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            result.correct_tokens += best == targets[b][t] ? 1 : 0;
        }
    }

    auto relu_margin = [&result](const FfnTrace& f) {
        auto scan = [&result](const Matrix& pre) {
            for (double z : pre.data()) {
                result.min_relu_margin = std::min(result.min_relu_margin, std::abs(z));
            }
        };
        if (!f.is_moe) {
            scan(f.pre);
            return;
        }
        for (const Matrix& pre : f.moe.expert_pre) {
            scan(pre);
        }
    };
    for (const Trace& tr : traces) {
        for (const auto& e : tr.enc) {
            relu_margin(e.ffn);
        }
        for (const auto& d : tr.dec) {
            relu_margin(d.ffn);
        }
    }

    // Load-balance loss per MoE block, over all positions in the batch.
    const double lambda = config_.moe.aux_loss_weight;
    const std::size_t experts = config_.moe.num_experts;
    std::vector<std::vector<double>> enc_aux(encoder_.size()), dec_aux(decoder_.size());
    auto aux_for = [&](auto pick) {
        std::vector<std::size_t> top1;
        std::vector<std::vector<double>> probs;
        for (const Trace& tr : traces) {
            collect_top1(pick(tr), top1, probs);
        }
        Matrix pm(probs.size(), experts);
        for (std::size_t r = 0; r < probs.size(); ++r) {
            std::copy(probs[r].begin(), probs[r].end(), pm.row(r).begin());
        }
        result.aux += load_balance_loss(pm, top1);
        return load_balance_prob_grad(top1, top1.size(), experts, lambda);
    };
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        if (has_aux(encoder_[i].ffn)) {
            enc_aux[i] = aux_for([i](const Trace& tr) -> const FfnTrace& { return tr.enc[i].ffn; });
        }
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        if (has_aux(decoder_[i].ffn)) {
            dec_aux[i] = aux_for([i](const Trace& tr) -> const FfnTrace& { return tr.dec[i].ffn; });
        }
    }
    result.total = result.cross_entropy + lambda * result.aux;

    if (accumulate_grad) {
        for (std::size_t b = 0; b < batch.size(); ++b) {
            backward(traces[b], dlogits[b], enc_aux, dec_aux);
        }
    }
    return result;
}

void Seq2SeqModel::backward(Trace& tr, const Matrix& dlogits, const std::vector<std::vector<double>>& enc_aux,
                            const std::vector<std::vector<double>>& dec_aux) {
    const std::size_t d = config_.d_model;
    const double scale = std::sqrt(static_cast<double>(d));

    // logits = final_n · Eᵀ
    Matrix dfinal_n = affine(dlogits, embedding_.value);
    embedding_.grad += affine(dlogits.transposed(), tr.dec_final_n);
    Matrix dx(tr.dec_final_in.rows(), d);
    rms_norm_backward(tr.dec_final_in, tr.dec_final_n, dfinal_n, dx);

    Matrix dmemory(tr.memory.rows(), d);
    for (std::size_t i = decoder_.size(); i-- > 0;) {
        DecoderBlock& b = decoder_[i];
        DecTrace& t = tr.dec[i];
        // out = h2 + ffn(n3)
        Matrix dn3 = ffn_backward(b.ffn, t.ffn, dx, dec_aux[i]);
        Matrix dh2 = dx;
        rms_norm_backward(t.h2, t.n3, dn3, dh2);
        // h2 = h1 + cross(n2, memory)
        Matrix dn2(t.n2.rows(), d);
        attend_backward(b.cross_attn, t.cross, dh2, dn2, dmemory);
        Matrix dh1 = dh2;
        rms_norm_backward(t.h1, t.n2, dn2, dh1);
        // h1 = x + self(n1)
        Matrix dn1(t.n1.rows(), d);
        attend_backward(b.self_attn, t.self, dh1, dn1, dn1);
        Matrix dxin = dh1;
        rms_norm_backward(t.x_in, t.n1, dn1, dxin);
        dx = std::move(dxin);
    }
    for (std::size_t t = 0; t < tr.dec_tokens.size(); ++t) {
        auto g = embedding_.grad.row(tr.dec_tokens[t]);
        auto src = dx.row(t);
        for (std::size_t c = 0; c < d; ++c) {
            g[c] += scale * src[c];
        }
    }

    Matrix denc(tr.enc_final_in.rows(), d);
    rms_norm_backward(tr.enc_final_in, tr.memory, dmemory, denc);
    for (std::size_t i = encoder_.size(); i-- > 0;) {
        EncoderBlock& b = encoder_[i];
        EncTrace& t = tr.enc[i];
        Matrix dn2 = ffn_backward(b.ffn, t.ffn, denc, enc_aux[i]);
        Matrix dh = denc;
        rms_norm_backward(t.h, t.n2, dn2, dh);
        Matrix dn1(t.n1.rows(), d);
        attend_backward(b.self_attn, t.self, dh, dn1, dn1);
        Matrix dxin = dh;
        rms_norm_backward(t.x_in, t.n1, dn1, dxin);
        denc = std::move(dxin);
    }
    for (std::size_t t = 0; t < tr.enc_tokens.size(); ++t) {
        auto g = embedding_.grad.row(tr.enc_tokens[t]);
        auto src = denc.row(t);
        for (std::size_t c = 0; c < d; ++c) {
            g[c] += scale * src[c];
        }
    }
}

} // namespace taskmoe
