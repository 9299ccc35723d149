#include "taskmoe/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>

#include "json_support.hpp"
#include "taskmoe/config_io.hpp"
#include "taskmoe/error.hpp"
#include "taskmoe/extraction.hpp"

namespace taskmoe {

namespace {

constexpr char kMagic[8] = {'T', 'M', 'O', 'E', 'C', 'K', 'P', 'T'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    }
    return v;
}

json map_to_json(const TaskExpertMap& map) {
    json layers = json::array();
    for (const LayerRoute& l : map.layers) {
        layers.push_back({{"side", l.side == Side::Encoder ? "encoder" : "decoder"},
                          {"block", l.block},
                          {"route", l.route}});
    }
    return {{"task", map.task}, {"layers", layers}};
}

TaskExpertMap map_from_json(const json& j) {
    require_known_keys(j, {"task", "layers"}, "task_expert_map");
    TaskExpertMap map;
    j.at("task").get_to(map.task);
    for (const json& l : j.at("layers")) {
        require_known_keys(l, {"side", "block", "route"}, "task_expert_map layer");
        LayerRoute r;
        const std::string side = l.at("side").get<std::string>();
        if (side != "encoder" && side != "decoder") {
            throw ValidationError("task_expert_map: unknown side '" + side + "'");
        }
        r.side = side == "encoder" ? Side::Encoder : Side::Decoder;
        l.at("block").get_to(r.block);
        l.at("route").get_to(r.route);
        map.layers.push_back(std::move(r));
    }
    return map;
}

} // namespace

std::string serialize_checkpoint(const Seq2SeqModel& model) {
    // named_parameters() only hands out pointers; nothing is modified here.
    auto params = const_cast<Seq2SeqModel&>(model).named_parameters();
    json header;
    header["config"] = model.config();
    json tensors = json::array();
    for (const auto& np : params) {
        tensors.push_back({{"name", np.name}, {"rows", np.param->value.rows()}, {"cols", np.param->value.cols()}});
    }
    header["tensors"] = tensors;
    const TaskExpertMap frozen = frozen_routes(model);
    if (model.extracted_task()) {
        header["task_expert_map"] = map_to_json(frozen);
    }
    const std::string text = header.dump();

    std::string out(kMagic, sizeof kMagic);
    put_u64(out, text.size());
    out += text;
    for (const auto& np : params) {
        for (double v : np.param->value.data()) {
            put_u64(out, std::bit_cast<std::uint64_t>(v));
        }
    }
    return out;
}

Seq2SeqModel deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw IoError("checkpoint: bad magic");
    }
    const std::uint64_t header_len = get_u64(bytes, 8);
    if (header_len > bytes.size() - 16) {
        throw IoError("checkpoint: truncated header");
    }
    json header;
    ModelConfig config;
    std::optional<TaskExpertMap> map;
    try {
        header = json::parse(bytes.substr(16, header_len));
        require_known_keys(header, {"config", "tensors", "task_expert_map"}, "checkpoint header");
        header.at("config").get_to(config);
        if (const auto it = header.find("task_expert_map"); it != header.end()) {
            map = map_from_json(*it);
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("checkpoint: malformed header: ") + e.what());
    } catch (const ValidationError& e) {
        throw IoError(std::string("checkpoint: ") + e.what());
    }

    Seq2SeqModel model(config);
    if (map) {
        shape_as_subnetwork(model, *map);
    }
    auto params = model.named_parameters();
    const json& tensors = header.at("tensors");
    if (!tensors.is_array() || tensors.size() != params.size()) {
        throw IoError("checkpoint: tensor list does not match the configuration");
    }
    std::size_t at = 16 + header_len;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const json& t = tensors[i];
        Matrix& m = params[i].param->value;
        if (t.value("name", "") != params[i].name || t.value("rows", std::size_t{0}) != m.rows() ||
            t.value("cols", std::size_t{0}) != m.cols()) {
            throw IoError("checkpoint: tensor " + std::to_string(i) + " does not match '" + params[i].name + "'");
        }
        if (bytes.size() - at < 8 * m.size()) {
            throw IoError("checkpoint: truncated data in '" + params[i].name + "'");
        }
        for (double& v : m.data()) {
            v = std::bit_cast<double>(get_u64(bytes, at));
            at += 8;
        }
    }
    if (at != bytes.size()) {
        throw IoError("checkpoint: trailing bytes");
    }
    return model;
}

void save_checkpoint(const Seq2SeqModel& model, const std::filesystem::path& path) {
    write_text_file(path, serialize_checkpoint(model));
}

Seq2SeqModel load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_text_file(path));
}

} // namespace taskmoe
