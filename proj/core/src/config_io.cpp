#include "taskmoe/config_io.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json_support.hpp"
#include "taskmoe/rng.hpp"

namespace taskmoe {

void require_known_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
    if (!j.is_object()) {
        throw ValidationError(std::string(what) + ": expected a JSON object");
    }
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : allowed) {
            known = known || item.key() == k;
        }
        if (!known) {
            throw ValidationError(std::string(what) + ": unknown key '" + item.key() + "'");
        }
    }
}

void to_json(json& j, const TaskKey& t) { j = to_string(t); }
void from_json(const json& j, TaskKey& t) { t = parse_task_key(j.get<std::string>()); }

void to_json(json& j, const RoutingStrategy& s) { j = to_string(s); }
void from_json(const json& j, RoutingStrategy& s) { s = parse_routing_strategy(j.get<std::string>()); }

void to_json(json& j, const MoEConfig& c) {
    j = json{{"num_experts", c.num_experts}, {"top_k", c.top_k},
             {"d_model", c.d_model},         {"d_ff", c.d_ff},
             {"capacity_factor", c.capacity_factor}, {"eval_capacity_factor", c.eval_capacity_factor},
             {"aux_loss_weight", c.aux_loss_weight}};
}

void from_json(const json& j, MoEConfig& c) {
    require_known_keys(j, {"num_experts", "top_k", "d_model", "d_ff", "capacity_factor", "eval_capacity_factor",
                           "aux_loss_weight"}, "moe");
    read_optional(j, "num_experts", c.num_experts);
    read_optional(j, "top_k", c.top_k);
    read_optional(j, "d_model", c.d_model);
    read_optional(j, "d_ff", c.d_ff);
    read_optional(j, "capacity_factor", c.capacity_factor);
    read_optional(j, "eval_capacity_factor", c.eval_capacity_factor);
    read_optional(j, "aux_loss_weight", c.aux_loss_weight);
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"num_symbols", c.num_symbols},
             {"vocab_size", c.vocab_size},
             {"d_model", c.d_model},
             {"d_ff", c.d_ff},
             {"enc_layers", c.enc_layers},
             {"dec_layers", c.dec_layers},
             {"moe_every", c.moe_every},
             {"max_len", c.max_len},
             {"moe", c.moe},
             {"enc_strategy", c.enc_strategy},
             {"dec_strategy", c.dec_strategy},
             {"tasks", c.tasks},
             {"enc_static_map", c.enc_static_map},
             {"dec_static_map", c.dec_static_map},
             {"zero_shot_fallback", c.zero_shot_fallback},
             {"embed_init_std", c.embed_init_std}};
}

void from_json(const json& j, ModelConfig& c) {
    require_known_keys(j,
                       {"num_symbols", "vocab_size", "d_model", "d_ff", "enc_layers", "dec_layers", "moe_every",
                        "max_len", "moe", "enc_strategy", "dec_strategy", "tasks", "enc_static_map",
                        "dec_static_map", "zero_shot_fallback", "embed_init_std"},
                       "model");
    read_optional(j, "num_symbols", c.num_symbols);
    read_optional(j, "vocab_size", c.vocab_size);
    read_optional(j, "d_model", c.d_model);
    read_optional(j, "d_ff", c.d_ff);
    read_optional(j, "enc_layers", c.enc_layers);
    read_optional(j, "dec_layers", c.dec_layers);
    read_optional(j, "moe_every", c.moe_every);
    read_optional(j, "max_len", c.max_len);
    read_optional(j, "moe", c.moe);
    read_optional(j, "enc_strategy", c.enc_strategy);
    read_optional(j, "dec_strategy", c.dec_strategy);
    read_optional(j, "tasks", c.tasks);
    read_optional(j, "enc_static_map", c.enc_static_map);
    read_optional(j, "dec_static_map", c.dec_static_map);
    read_optional(j, "zero_shot_fallback", c.zero_shot_fallback);
    read_optional(j, "embed_init_std", c.embed_init_std);
}

void to_json(json& j, const TaskSpec& s) {
    j = json{{"source_lang", s.source_lang},   {"target_lang", s.target_lang}, {"cipher_seed", s.cipher_seed},
             {"dataset_size", s.dataset_size}, {"data_seed", s.data_seed},     {"num_symbols", s.num_symbols},
             {"symbol_offset", s.symbol_offset}, {"symbol_count", s.symbol_count}, {"target_offset", s.target_offset}, {"min_len", s.min_len},
             {"max_len", s.max_len}};
}

void from_json(const json& j, TaskSpec& s) {
    require_known_keys(j,
                       {"source_lang", "target_lang", "cipher_seed", "dataset_size", "data_seed", "num_symbols",
                        "symbol_offset", "symbol_count", "target_offset", "min_len", "max_len"},
                       "task");
    read_optional(j, "source_lang", s.source_lang);
    read_optional(j, "target_lang", s.target_lang);
    read_optional(j, "cipher_seed", s.cipher_seed);
    read_optional(j, "dataset_size", s.dataset_size);
    read_optional(j, "data_seed", s.data_seed);
    read_optional(j, "num_symbols", s.num_symbols);
    read_optional(j, "symbol_offset", s.symbol_offset);
    read_optional(j, "symbol_count", s.symbol_count);
    read_optional(j, "target_offset", s.target_offset);
    read_optional(j, "min_len", s.min_len);
    read_optional(j, "max_len", s.max_len);
}

void to_json(json& j, const SamplerConfig& s) { j = json{{"temperature", s.temperature}}; }

void from_json(const json& j, SamplerConfig& s) {
    require_known_keys(j, {"temperature"}, "sampler");
    read_optional(j, "temperature", s.temperature);
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"steps", c.steps},       {"batch_size", c.batch_size}, {"lr", c.lr}, {"final_lr_ratio", c.final_lr_ratio},
             {"beta1", c.beta1},       {"beta2", c.beta2},           {"adam_eps", c.adam_eps},
             {"clip_norm", c.clip_norm}, {"sampler", c.sampler},     {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
    require_known_keys(j, {"steps", "batch_size", "lr", "final_lr_ratio", "beta1", "beta2", "adam_eps", "clip_norm", "sampler", "seed"},
                       "train");
    read_optional(j, "steps", c.steps);
    read_optional(j, "batch_size", c.batch_size);
    read_optional(j, "lr", c.lr);
    read_optional(j, "final_lr_ratio", c.final_lr_ratio);
    read_optional(j, "beta1", c.beta1);
    read_optional(j, "beta2", c.beta2);
    read_optional(j, "adam_eps", c.adam_eps);
    read_optional(j, "clip_norm", c.clip_norm);
    read_optional(j, "sampler", c.sampler);
    read_optional(j, "seed", c.seed);
}

void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"model", c.model}, {"tasks", c.tasks}, {"train", c.train}, {"eval_size", c.eval_size}};
}

void from_json(const json& j, ExperimentConfig& c) {
    require_known_keys(j, {"model", "tasks", "train", "eval_size"}, "experiment");
    read_optional(j, "model", c.model);
    read_optional(j, "tasks", c.tasks);
    read_optional(j, "train", c.train);
    read_optional(j, "eval_size", c.eval_size);
}

void to_json(json& j, const FrozenRoute& r) { j = json{{"experts", r.expert_ids}, {"weights", r.weights}}; }

void from_json(const json& j, FrozenRoute& r) {
    require_known_keys(j, {"experts", "weights"}, "frozen route");
    j.at("experts").get_to(r.expert_ids);
    j.at("weights").get_to(r.weights);
}

void ExperimentConfig::validate() const {
    model.validate();
    train.validate();
    if (tasks.empty()) {
        throw ValidationError("experiment: no tasks");
    }
    const std::size_t task_tokens = model.vocab_size - model.num_symbols - 2;
    std::set<TaskKey> seen;
    for (const auto& t : tasks) {
        t.validate();
        if (!seen.insert(t.key()).second) {
            throw ValidationError("experiment: duplicate task " + to_string(t.key()));
        }
        if (t.num_symbols != model.num_symbols) {
            throw ValidationError("experiment: task " + to_string(t.key()) + " alphabet differs from the model");
        }
        if (t.target_lang >= task_tokens) {
            throw ValidationError("experiment: no task token for target language " + std::to_string(t.target_lang));
        }
        if (t.max_len + 2 > model.max_len) {
            throw ValidationError("experiment: task " + to_string(t.key()) + " sentences exceed model max_len");
        }
        bool registered = false;
        for (const auto& k : model.tasks) {
            registered = registered || k == t.key();
        }
        if (!registered) {
            throw ValidationError("experiment: task " + to_string(t.key()) + " is not registered in the model");
        }
    }
}

TaskSpec heldout_spec(const TaskSpec& spec, std::size_t size) {
    TaskSpec out = spec;
    out.dataset_size = size;
    out.data_seed = derive_seed(spec.data_seed, 0x4e1d);
    return out;
}

std::string model_config_to_json(const ModelConfig& config) { return json(config).dump(2); }
ModelConfig model_config_from_json(const std::string& text) {
    return parse_json_as<ModelConfig>(text, "model config");
}
std::string task_spec_to_json(const TaskSpec& spec) { return json(spec).dump(); }
TaskSpec task_spec_from_json(const std::string& text) { return parse_json_as<TaskSpec>(text, "task spec"); }
std::string experiment_to_json(const ExperimentConfig& config) { return json(config).dump(2); }
ExperimentConfig experiment_from_json(const std::string& text) {
    return parse_json_as<ExperimentConfig>(text, "experiment config");
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << text;
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    return experiment_from_json(read_text_file(path));
}

} // namespace taskmoe
