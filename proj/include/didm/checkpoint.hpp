#pragma once

// Checkpoints are one JSON document. Tensors are stored as strings of
// %.17g-formatted numbers, which round-trip doubles exactly.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "didm/config.hpp"
#include "didm/detector.hpp"
#include "didm/error.hpp"
#include "json.hpp"

namespace didm::exp {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    ExperimentConfig config;
    toy::DetectorParams params;
    std::vector<Tensor> velocity;
    std::int64_t epochs_done = 0;
    std::int64_t global_step = 0;

    bool operator==(const Checkpoint&) const = default;
};

[[nodiscard]] inline std::string format_values(const std::vector<double>& v)
{
    std::string out;
    char buf[40];
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", v[i]);
        if (i) out += ' ';
        out += buf;
    }
    return out;
}

[[nodiscard]] inline std::vector<double> parse_values(const std::string& s, std::size_t expected)
{
    std::vector<double> v;
    v.reserve(expected);
    const char* p = s.c_str();
    char* end = nullptr;
    while (true) {
        while (*p == ' ') ++p;
        if (*p == '\0') break;
        const double x = std::strtod(p, &end);
        if (end == p) {
            throw Error("checkpoint: malformed number near '" + std::string(p).substr(0, 20) + "'");
        }
        v.push_back(x);
        p = end;
    }
    if (v.size() != expected) {
        throw Error("checkpoint: expected " + std::to_string(expected) + " values, found " + std::to_string(v.size()));
    }
    return v;
}

[[nodiscard]] inline nlohmann::ordered_json tensor_json(const std::string& name, const Tensor& t)
{
    return {{"name", name}, {"shape", {t.rows, t.cols}}, {"values", format_values(t.values)}};
}

[[nodiscard]] inline Tensor tensor_from_json(const nlohmann::json& j)
{
    const auto rows = j.at("shape").at(0).get<std::size_t>();
    const auto cols = j.at("shape").at(1).get<std::size_t>();
    return Tensor(rows, cols, parse_values(j.at("values").get<std::string>(), rows * cols));
}

[[nodiscard]] inline std::string serialize_checkpoint(const Checkpoint& ck)
{
    nlohmann::ordered_json j;
    j["format"] = "didm-checkpoint";
    j["version"] = kCheckpointVersion;
    j["config_hash"] = config_hash(ck.config);
    j["epochs_done"] = ck.epochs_done;
    j["global_step"] = ck.global_step;
    j["config"] = to_json(ck.config);
    j["params"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < toy::kNumParams; ++i) {
        j["params"].push_back(tensor_json(std::string(toy::kParamNames[i]), ck.params[i]));
    }
    j["velocity"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ck.velocity.size(); ++i) {
        j["velocity"].push_back(tensor_json(std::string(toy::kParamNames[i]), ck.velocity[i]));
    }
    return j.dump(1) + "\n";
}

[[nodiscard]] inline Checkpoint deserialize_checkpoint(const std::string& text)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(std::string("checkpoint: ") + e.what());
    }
    if (j.value("format", "") != "didm-checkpoint" || j.value("version", 0) != kCheckpointVersion) {
        throw Error("checkpoint: unrecognized format or version");
    }
    Checkpoint ck;
    ck.config = config_from_json(j.at("config"));
    if (j.at("config_hash").get<std::uint64_t>() != config_hash(ck.config)) {
        throw Error("checkpoint: config hash does not match the embedded config");
    }
    ck.epochs_done = j.at("epochs_done").get<std::int64_t>();
    ck.global_step = j.at("global_step").get<std::int64_t>();
    const auto& params = j.at("params");
    if (params.size() != toy::kNumParams) {
        throw Error("checkpoint: expected " + std::to_string(toy::kNumParams) + " parameter tensors");
    }
    for (std::size_t i = 0; i < toy::kNumParams; ++i) {
        if (params[i].at("name").get<std::string>() != toy::kParamNames[i]) {
            throw Error("checkpoint: parameter " + std::to_string(i) + " is not " + std::string(toy::kParamNames[i]));
        }
        ck.params[i] = tensor_from_json(params[i]);
    }
    for (const auto& v : j.at("velocity")) {
        ck.velocity.push_back(tensor_from_json(v));
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("checkpoint: cannot write " + path);
    }
    out << serialize_checkpoint(ck);
}

[[nodiscard]] inline Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("checkpoint: cannot open " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

}  // namespace didm::exp
