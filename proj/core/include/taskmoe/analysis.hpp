#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "taskmoe/matrix.hpp"
#include "taskmoe/model.hpp"
#include "taskmoe/training.hpp"

namespace taskmoe {

/// Per-token routing statistics. Layers are the model's MoE blocks in
/// order, encoder first; tasks follow the corpus order given to
/// log_decisions.
struct RoutingLog {
    std::vector<TaskKey> tasks;
    std::size_t num_experts = 0;
    std::size_t encoder_layers = 0;   // leading layers that belong to the encoder
    std::vector<std::vector<std::vector<std::uint64_t>>> counts;   // [layer][task][expert], top-1
    std::vector<std::vector<std::vector<double>>> weighted;        // [layer][task][expert], combine weights
    std::vector<std::vector<std::uint64_t>> token_totals;          // [layer][task]

    std::size_t num_layers() const noexcept { return counts.size(); }
    /// Zero-filled log with the given shape.
    static RoutingLog empty(std::vector<TaskKey> tasks, std::size_t layers, std::size_t experts,
                            std::size_t encoder_layers);
    /// Checks the count/total and weight/total conservation laws.
    void validate() const;
    friend bool operator==(const RoutingLog&, const RoutingLog&) = default;
};

/// Teacher-forced pass over every sample of every corpus (as that corpus's
/// task), recording each MoE decision per token. Uses inference capacity.
RoutingLog log_decisions(const Seq2SeqModel& model, std::span<const Corpus> corpora);

/// Row-normalized top-1 frequencies [tasks×E] for one layer.
/// Throws EvaluationError when a task has no tokens on that layer.
Matrix expert_distribution(const RoutingLog& log, std::size_t layer);

/// Cosine similarity of two distribution rows. Throws EvaluationError on a zero row.
double task_similarity(const Matrix& dist, std::size_t task_a, std::size_t task_b);

/// Mean over experts of the (population) variance of frequencies across tasks.
double between_task_variance(const Matrix& dist);

/// Coefficient of variation (population std / mean) of top-1 counts per
/// expert on one layer, pooled over tasks.
double load_cv(const RoutingLog& log, std::size_t layer);

/// Header `layer,task,expert,count,weighted,frequency`; rows ordered by
/// layer, task, expert. Reals are written with 17 significant digits.
void export_csv(const RoutingLog& log, const std::filesystem::path& path);
std::string to_csv(const RoutingLog& log);
/// Inverse of export_csv. The CSV does not record the encoder/decoder split,
/// so `encoder_layers` is supplied by the caller.
RoutingLog import_csv(const std::filesystem::path& path, std::size_t encoder_layers = 0);
RoutingLog parse_csv(const std::string& text, std::size_t encoder_layers = 0);

} // namespace taskmoe
