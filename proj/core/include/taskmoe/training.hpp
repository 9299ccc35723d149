#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "taskmoe/model.hpp"

namespace taskmoe {

/// A synthetic translation task: sources are random symbol strings over a
/// symbol range, targets their image under a per-task substitution cipher
/// (a permutation of that range), rotated by `target_offset` and reversed
/// when the target language index is odd.
struct TaskSpec {
    std::size_t source_lang = 0;
    std::size_t target_lang = 0;
    std::uint64_t cipher_seed = 0;   // 0 is the identity cipher
    std::size_t dataset_size = 1;
    std::uint64_t data_seed = 0;     // drives source sentences only
    std::size_t num_symbols = 64;
    std::size_t symbol_offset = 0;   // sources draw from [offset, offset + count)
    std::size_t symbol_count = 0;    // 0 means the whole alphabet
    std::size_t target_offset = 0;   // cipher images are shifted by this (mod num_symbols)
    std::size_t min_len = 4;
    std::size_t max_len = 12;

    TaskKey key() const noexcept { return {source_lang, target_lang}; }
    void validate() const;
    friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

/// Permutation of [0, num_symbols) that shuffles [lo, lo + count) and fixes
/// every other symbol (count 0: the whole alphabet). Seed 0 gives the identity.
std::vector<std::size_t> make_cipher(std::uint64_t cipher_seed, std::size_t num_symbols, std::size_t lo = 0,
                                     std::size_t count = 0);

/// The whole-alphabet bijection a task applies: its cipher followed by the offset.
std::vector<std::size_t> task_symbol_map(const TaskSpec& spec);

/// Target for `src` under the task's cipher and order rule.
std::vector<std::size_t> apply_task(const TaskSpec& spec, std::span<const std::size_t> src);

std::vector<Sample> make_task_corpus(const TaskSpec& spec);

struct Corpus {
    TaskSpec spec;
    std::vector<Sample> samples;
};

struct SamplerConfig {
    double temperature = 5.0;
    void validate() const;
    friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;
};

/// p_L ∝ (size_L / Σ size)^(1/T).
std::vector<double> temperature_sample(std::span<const std::size_t> sizes, double temperature);

struct TrainConfig {
    std::size_t steps = 3000;
    std::size_t batch_size = 16;
    double lr = 3e-3;
    double final_lr_ratio = 1.0;   // lr decays linearly to lr·ratio over the run
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    SamplerConfig sampler;
    std::uint64_t seed = 1;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct StepMetrics {
    std::size_t step = 0;
    std::size_t task_index = 0;
    double loss = 0.0;
    double cross_entropy = 0.0;
    double aux = 0.0;
    double grad_norm = 0.0;     // before clipping
    double batch_accuracy = 0.0;   // teacher-forced
};

using StepCallback = std::function<void(const StepMetrics&)>;

/// Temperature-sampled task per step, uniform minibatch from that task,
/// global gradient-norm clipping, Adam. Deterministic for a given seed.
/// Throws TrainingError on a non-finite loss.
std::vector<StepMetrics> train(Seq2SeqModel& model, std::span<const Corpus> corpora, const TrainConfig& config,
                               const StepCallback& callback = {});

struct EvalMetrics {
    double token_accuracy = 0.0;
    double exact_match = 0.0;
    double bleu = 0.0;
    std::size_t sentences = 0;
    std::size_t reference_tokens = 0;
};

/// Greedy-decodes every sample's source as `task` (at most |src| + 4 tokens)
/// and scores against the sample targets.
EvalMetrics evaluate(const Seq2SeqModel& model, std::span<const Sample> corpus, const TaskKey& task);

/// Corpus BLEU-4 in [0, 100] with floor smoothing and brevity penalty.
double corpus_bleu(std::span<const std::vector<std::size_t>> hyps, std::span<const std::vector<std::size_t>> refs);

/// First line: TaskSpec JSON. Then one sample per line: src ids, a tab, tgt ids.
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);

} // namespace taskmoe
