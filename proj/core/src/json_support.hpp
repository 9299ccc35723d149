#pragma once

// nlohmann::json bindings for the library's configuration types. Private to
// the library; the public surface exchanges JSON as text.

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "taskmoe/config_io.hpp"
#include "taskmoe/error.hpp"
#include "taskmoe/model.hpp"
#include "taskmoe/moe_layer.hpp"
#include "taskmoe/training.hpp"

namespace taskmoe {

using nlohmann::json;

/// Rejects keys outside `allowed` so that typos in config files surface.
void require_known_keys(const json& j, std::initializer_list<const char*> allowed, const char* what);

template <typename T>
void read_optional(const json& j, const char* key, T& out) {
    if (const auto it = j.find(key); it != j.end()) {
        it->get_to(out);
    }
}

void to_json(json& j, const TaskKey& t);
void from_json(const json& j, TaskKey& t);
void to_json(json& j, const RoutingStrategy& s);
void from_json(const json& j, RoutingStrategy& s);
void to_json(json& j, const MoEConfig& c);
void from_json(const json& j, MoEConfig& c);
void to_json(json& j, const ModelConfig& c);
void from_json(const json& j, ModelConfig& c);
void to_json(json& j, const TaskSpec& s);
void from_json(const json& j, TaskSpec& s);
void to_json(json& j, const SamplerConfig& s);
void from_json(const json& j, SamplerConfig& s);
void to_json(json& j, const TrainConfig& c);
void from_json(const json& j, TrainConfig& c);
void to_json(json& j, const ExperimentConfig& c);
void from_json(const json& j, ExperimentConfig& c);
void to_json(json& j, const FrozenRoute& r);
void from_json(const json& j, FrozenRoute& r);

/// Parses text, converting library exceptions into ValidationError with context.
template <typename T>
T parse_json_as(const std::string& text, const char* what) {
    try {
        return json::parse(text).get<T>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string(what) + ": " + e.what());
    }
}

} // namespace taskmoe
