#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "taskmoe/model.hpp"
#include "taskmoe/training.hpp"

namespace taskmoe {

/// Everything needed to reproduce one training run.
struct ExperimentConfig {
    ModelConfig model;
    std::vector<TaskSpec> tasks;
    TrainConfig train;
    std::size_t eval_size = 200;   // held-out sentences per task

    /// Checks every component plus cross-references: each task is registered
    /// in the model, uses the model's alphabet, and has a task token.
    void validate() const;
    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Held-out variant of a task: same cipher, independent sources.
TaskSpec heldout_spec(const TaskSpec& spec, std::size_t size);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);
std::string task_spec_to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const std::string& text);
std::string experiment_to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const std::string& text);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);
ExperimentConfig load_experiment(const std::filesystem::path& path);

} // namespace taskmoe
