#pragma once

#include <filesystem>
#include <string>

#include "taskmoe/model.hpp"

namespace taskmoe {

/// File layout: the 8 bytes "TMOECKPT", a little-endian u64 header length,
/// a JSON header {config, tensors: [{name, rows, cols}], task_expert_map?},
/// then every tensor's values as little-endian f64 in header order.
/// Sub-networks carry their task expert map and no gate tensors for the
/// frozen blocks.
std::string serialize_checkpoint(const Seq2SeqModel& model);
Seq2SeqModel deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Seq2SeqModel& model, const std::filesystem::path& path);
/// Throws IoError for unreadable or malformed files.
Seq2SeqModel load_checkpoint(const std::filesystem::path& path);

} // namespace taskmoe
