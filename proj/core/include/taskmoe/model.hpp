#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "taskmoe/matrix.hpp"
#include "taskmoe/moe_layer.hpp"

namespace taskmoe {

/// A translation direction. Language ids are small integers.
struct TaskKey {
    std::size_t source_lang = 0;
    std::size_t target_lang = 0;

    friend auto operator<=>(const TaskKey&, const TaskKey&) = default;
};

std::string to_string(const TaskKey& t);
/// "SRC:TGT", e.g. "0:3".
TaskKey parse_task_key(const std::string& text);

enum class Side { Encoder, Decoder };

struct ModelConfig {
    std::size_t num_symbols = 64;   // content symbols occupy token ids [0, num_symbols)
    std::size_t vocab_size = 70;    // symbols + BOS + EOS + one task token per target language
    std::size_t d_model = 32;
    std::size_t d_ff = 64;
    std::size_t enc_layers = 4;
    std::size_t dec_layers = 4;
    std::size_t moe_every = 2;      // block i is MoE iff (i + 1) % moe_every == 0
    std::size_t max_len = 32;       // longest sequence the positional table covers
    MoEConfig moe;
    RoutingStrategy enc_strategy = RoutingStrategy::token();
    RoutingStrategy dec_strategy = RoutingStrategy::token();
    std::vector<TaskKey> tasks;     // registered translation directions
    std::vector<std::vector<std::size_t>> enc_static_map;   // optional StaticPartition tables
    std::vector<std::vector<std::size_t>> dec_static_map;
    bool zero_shot_fallback = false;   // unknown pair → a registered pair with the same target
    double embed_init_std = 0.1;

    std::size_t bos() const noexcept { return num_symbols; }
    std::size_t eos() const noexcept { return num_symbols + 1; }
    std::size_t task_token(std::size_t target_lang) const noexcept { return num_symbols + 2 + target_lang; }
    bool is_moe_block(std::size_t index) const noexcept { return (index + 1) % moe_every == 0; }
    const RoutingStrategy& strategy(Side side) const noexcept {
        return side == Side::Encoder ? enc_strategy : dec_strategy;
    }
    /// Number of task-gate rows for a boundary.
    std::size_t routing_rows(TaskBoundary boundary) const;
    std::size_t moe_layers(Side side) const;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AttentionParams {
    Parameter wq, wk, wv, wo;
};

struct DenseFfnParams {
    Parameter w1, w2;
};

using FfnSlot = std::variant<DenseFfnParams, MoELayerParams>;

struct EncoderBlock {
    AttentionParams self_attn;
    FfnSlot ffn;
};

struct DecoderBlock {
    AttentionParams self_attn;
    AttentionParams cross_attn;
    FfnSlot ffn;
};

struct NamedParameter {
    std::string name;
    Parameter* param;
};

/// Receives every MoE dispatch during a forward pass.
class RoutingObserver {
public:
    virtual ~RoutingObserver() = default;
    /// `moe_index` counts MoE blocks within a side; expert ids in `plan` are
    /// local to `layer` (use global_expert_id for frozen layers).
    virtual void on_dispatch(Side side, std::size_t moe_index, const MoELayerParams& layer,
                             const DispatchPlan& plan) = 0;
};

std::size_t global_expert_id(const MoELayerParams& layer, std::size_t local_id);

/// One training or evaluation pair. src/tgt hold content symbols only; the
/// model adds the task token, BOS and EOS.
struct Sample {
    TaskKey task;
    std::vector<std::size_t> src;
    std::vector<std::size_t> tgt;
};

struct LossBreakdown {
    double total = 0.0;
    double cross_entropy = 0.0;
    double aux = 0.0;             // Σ over MoE layers, unweighted
    std::size_t target_tokens = 0;
    std::size_t correct_tokens = 0;   // teacher-forced argmax hits
    double min_relu_margin = std::numeric_limits<double>::infinity();   // smallest |FFN pre-activation|
};

/// Scaled dot-product single-head attention softmax(q·kᵀ/√d)·v; with
/// `causal`, query i sees keys j <= i.
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, bool causal);

/// Fixed sinusoidal positions, [length×d_model].
Matrix sinusoidal_positions(std::size_t length, std::size_t d_model);

/// Miniature encoder-decoder transformer with pre-norm residual blocks,
/// fixed RMS normalization, a tied embedding/softmax matrix, and MoE FFNs on
/// every `moe_every`-th block. Inference methods are const and thread-safe;
/// forward_loss accumulates into parameter gradients.
class Seq2SeqModel {
public:
    static Seq2SeqModel initialize(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }

    /// Canonical order used by checkpoints and the optimizer.
    std::vector<NamedParameter> named_parameters();
    std::vector<Parameter*> parameters();
    void zero_grad();

    /// Gate row for `task` on one side. Throws UnknownTaskError.
    std::size_t routing_row(Side side, const TaskKey& task) const;

    /// [task token] + src + [EOS].
    std::vector<std::size_t> encoder_input(std::span<const std::size_t> src, const TaskKey& task) const;
    std::vector<std::size_t> encoder_input(const Sample& sample) const;

    /// Encoder states (final RMS-normalized), one row per input token.
    Matrix encode(std::span<const std::size_t> tokens, const TaskKey& task,
                  RoutingObserver* observer = nullptr) const;

    /// Logits [len×V] for decoder input tokens (starting with BOS) given encoder memory.
    Matrix decoder_logits(const Matrix& memory, std::span<const std::size_t> dec_input, const TaskKey& task,
                          RoutingObserver* observer = nullptr) const;

    /// Mean CE over all target tokens (including EOS) + λ·Σ per-layer aux
    /// losses, each computed over the whole batch. Accumulates gradients
    /// when `accumulate_grad` is set. Token routing uses the training capacity.
    LossBreakdown forward_loss(std::span<const Sample> batch, bool accumulate_grad,
                               RoutingObserver* observer = nullptr);

    /// Argmax decoding until EOS or `max_len` tokens. The decoder is re-run
    /// over the whole prefix each step. `step_logits` receives each step's
    /// final-position logits.
    std::vector<std::size_t> greedy_decode(std::span<const std::size_t> src, const TaskKey& task,
                                           std::size_t max_len, RoutingObserver* observer = nullptr,
                                           std::vector<std::vector<double>>* step_logits = nullptr) const;

    Parameter& embedding() noexcept { return embedding_; }
    const Parameter& embedding() const noexcept { return embedding_; }
    std::vector<EncoderBlock>& encoder_blocks() noexcept { return encoder_; }
    const std::vector<EncoderBlock>& encoder_blocks() const noexcept { return encoder_; }
    std::vector<DecoderBlock>& decoder_blocks() noexcept { return decoder_; }
    const std::vector<DecoderBlock>& decoder_blocks() const noexcept { return decoder_; }

    /// Set on extracted sub-networks: the only task they can serve.
    const std::optional<TaskKey>& extracted_task() const noexcept { return extracted_task_; }
    void set_extracted_task(std::optional<TaskKey> task) { extracted_task_ = task; }

    /// Constructs blocks with the right shapes and zero weights.
    explicit Seq2SeqModel(const ModelConfig& config);

private:
    struct Trace;
    Matrix embed(std::span<const std::size_t> tokens) const;
    std::optional<std::size_t> side_row(Side side, const TaskKey& task) const;
    Matrix run_encoder(std::span<const std::size_t> tokens, const TaskKey& task, RoutingObserver* observer,
                       Trace* trace) const;
    Matrix run_decoder(const Matrix& memory, std::span<const std::size_t> dec_input, const TaskKey& task,
                       RoutingObserver* observer, Trace* trace) const;
    void backward(Trace& trace, const Matrix& dlogits, const std::vector<std::vector<double>>& enc_aux,
                  const std::vector<std::vector<double>>& dec_aux);

    ModelConfig config_;
    Parameter embedding_;   // [V×d_model], also the output projection
    std::vector<EncoderBlock> encoder_;
    std::vector<DecoderBlock> decoder_;
    Matrix positions_;
    std::optional<TaskKey> extracted_task_;
};

} // namespace taskmoe
