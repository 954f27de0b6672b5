#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "didm/error.hpp"
#include "didm/rng.hpp"
#include "didm/scene.hpp"
#include "json.hpp"

namespace didm::exp {

inline constexpr int kConfigSchemaVersion = 1;

struct Toggles {
    bool use_lc_lh = true;
    bool use_lfd = true;
    bool use_wam = true;
    bool use_beta = true;
    /// L_C trains only the auxiliary classifier, L_H only the features.
    bool split_gradients = true;

    bool operator==(const Toggles&) const = default;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::uint64_t data_seed = 2024;
    std::int64_t epochs = 10;
    std::int64_t batch_size = 8;
    double lr = 0.02;
    double momentum = 0.9;
    double lr_decay_factor = 0.1;
    std::int64_t lr_decay_every = 3;
    double alpha = 0.45;
    double tau = 0.1;
    double lambda2 = 0.1;
    double lambda1_start = 0.5;
    double lambda1_end = 0.9;
    double lambda1_cap = 0.95;
    std::int64_t k_max = 16;
    double objectness_threshold = 0.5;
    std::int64_t feature_dim = 32;
    std::int64_t num_classes = 3;
    std::int64_t train_scenes = 2000;
    std::int64_t eval_scenes = 500;
    std::vector<std::string> domains{"clear", "night", "fog", "rain"};
    Toggles toggles;
    double crop_scale_min = 0.8;
    double grayscale_p = 0.3;
    double jitter = 0.2;
    double grid_step = 0.1;
    std::int64_t proxy_folds = 5;
    std::int64_t diag_max_samples = 600;

    bool operator==(const ExperimentConfig&) const = default;
};

/// Every violated constraint, one message per field.
[[nodiscard]] inline std::vector<std::string> validation_errors(const ExperimentConfig& c)
{
    std::vector<std::string> e;
    const auto need = [&](bool ok, const char* field, const char* rule) {
        if (!ok) e.push_back(std::string(field) + ": " + rule);
    };
    need(c.epochs > 0, "epochs", "must be positive");
    need(c.batch_size > 0, "batch_size", "must be positive");
    need(c.lr > 0.0, "lr", "must be positive");
    need(c.momentum >= 0.0 && c.momentum < 1.0, "momentum", "must lie in [0, 1)");
    need(c.lr_decay_factor > 0.0 && c.lr_decay_factor <= 1.0, "lr_decay_factor", "must lie in (0, 1]");
    need(c.lr_decay_every > 0, "lr_decay_every", "must be positive");
    need(c.alpha >= 0.0, "alpha", "must be non-negative");
    need(c.tau > 0.0, "tau", "must be positive");
    need(c.lambda2 >= 0.0, "lambda2", "must be non-negative");
    need(c.lambda1_start > 0.0 && c.lambda1_start < 1.0, "lambda1.start", "must lie in (0, 1)");
    need(c.lambda1_end > 0.0 && c.lambda1_end < 1.0, "lambda1.end", "must lie in (0, 1)");
    need(c.lambda1_start <= c.lambda1_end, "lambda1.end", "must not be below lambda1.start");
    need(c.lambda1_end <= c.lambda1_cap && c.lambda1_cap < 1.0, "lambda1.cap", "must satisfy end <= cap < 1");
    need(c.k_max > 0 && c.k_max <= static_cast<std::int64_t>(toy::kNumCells), "k_max", "must lie in [1, 64]");
    need(c.objectness_threshold >= 0.0 && c.objectness_threshold <= 1.0, "objectness_threshold",
         "must lie in [0, 1]");
    need(c.feature_dim > 0, "feature_dim", "must be positive");
    need(c.num_classes > 0 && c.num_classes <= 3, "num_classes", "must lie in [1, 3]");
    need(c.train_scenes > 0, "train_scenes", "must be positive");
    need(c.eval_scenes > 0, "eval_scenes", "must be positive");
    need(!c.domains.empty(), "domains", "must not be empty");
    for (const auto& d : c.domains) {
        bool known = false;
        for (auto n : toy::kDomainNames) known = known || n == d;
        if (!known) e.push_back("domains: unknown domain '" + d + "'");
    }
    need(c.crop_scale_min > 0.0 && c.crop_scale_min <= 1.0, "augment.crop_scale_min", "must lie in (0, 1]");
    need(c.grayscale_p >= 0.0 && c.grayscale_p <= 1.0, "augment.grayscale_p", "must lie in [0, 1]");
    need(c.jitter >= 0.0 && c.jitter < 1.0, "augment.jitter", "must lie in [0, 1)");
    need(c.grid_step >= 0.05 && c.grid_step <= 0.5, "diagnostics.grid_step", "must lie in [0.05, 0.5]");
    need(c.proxy_folds > 0, "diagnostics.folds", "must be positive");
    need(c.diag_max_samples >= 20, "diagnostics.max_samples", "must be at least 20");
    return e;
}

inline void validate(const ExperimentConfig& c)
{
    const auto errs = validation_errors(c);
    if (!errs.empty()) {
        std::string msg = "invalid config:";
        for (const auto& s : errs) msg += "\n  " + s;
        throw ConfigError(msg);
    }
}

[[nodiscard]] inline nlohmann::ordered_json to_json(const ExperimentConfig& c)
{
    nlohmann::ordered_json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["seed"] = c.seed;
    j["data_seed"] = c.data_seed;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["momentum"] = c.momentum;
    j["lr_decay_factor"] = c.lr_decay_factor;
    j["lr_decay_every"] = c.lr_decay_every;
    j["alpha"] = c.alpha;
    j["tau"] = c.tau;
    j["lambda2"] = c.lambda2;
    j["lambda1"] = {{"start", c.lambda1_start}, {"end", c.lambda1_end}, {"cap", c.lambda1_cap}};
    j["k_max"] = c.k_max;
    j["objectness_threshold"] = c.objectness_threshold;
    j["feature_dim"] = c.feature_dim;
    j["num_classes"] = c.num_classes;
    j["train_scenes"] = c.train_scenes;
    j["eval_scenes"] = c.eval_scenes;
    j["domains"] = c.domains;
    j["toggles"] = {{"use_lc_lh", c.toggles.use_lc_lh},
                    {"use_lfd", c.toggles.use_lfd},
                    {"use_wam", c.toggles.use_wam},
                    {"use_beta", c.toggles.use_beta},
                    {"split_gradients", c.toggles.split_gradients}};
    j["augment"] = {{"crop_scale_min", c.crop_scale_min}, {"grayscale_p", c.grayscale_p}, {"jitter", c.jitter}};
    j["diagnostics"] = {
        {"grid_step", c.grid_step}, {"folds", c.proxy_folds}, {"max_samples", c.diag_max_samples}};
    return j;
}

namespace detail {

template <typename T>
void read(const nlohmann::json& obj, const char* key, const std::string& path, T& out, std::vector<std::string>& errs)
{
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        errs.push_back(path + key + ": wrong type");
    }
}

inline void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> known, const std::string& path,
                           std::vector<std::string>& errs)
{
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) errs.push_back(path + key + ": unknown field");
    }
}

}  // namespace detail

/// Missing fields keep their defaults; unknown fields and wrong types are errors.
[[nodiscard]] inline ExperimentConfig config_from_json(const nlohmann::json& j)
{
    using detail::read;
    std::vector<std::string> errs;
    if (!j.is_object()) {
        throw ConfigError("invalid config: top level must be a JSON object");
    }
    ExperimentConfig c;
    int version = kConfigSchemaVersion;
    read(j, "schema_version", "", version, errs);
    if (version != kConfigSchemaVersion) {
        errs.push_back("schema_version: unsupported version " + std::to_string(version));
    }
    detail::reject_unknown(j,
                           {"schema_version", "seed", "data_seed", "epochs", "batch_size", "lr", "momentum",
                            "lr_decay_factor", "lr_decay_every", "alpha", "tau", "lambda2", "lambda1", "k_max",
                            "objectness_threshold", "feature_dim", "num_classes", "train_scenes", "eval_scenes",
                            "domains", "toggles", "augment", "diagnostics"},
                           "", errs);
    read(j, "seed", "", c.seed, errs);
    read(j, "data_seed", "", c.data_seed, errs);
    read(j, "epochs", "", c.epochs, errs);
    read(j, "batch_size", "", c.batch_size, errs);
    read(j, "lr", "", c.lr, errs);
    read(j, "momentum", "", c.momentum, errs);
    read(j, "lr_decay_factor", "", c.lr_decay_factor, errs);
    read(j, "lr_decay_every", "", c.lr_decay_every, errs);
    read(j, "alpha", "", c.alpha, errs);
    read(j, "tau", "", c.tau, errs);
    read(j, "lambda2", "", c.lambda2, errs);
    read(j, "k_max", "", c.k_max, errs);
    read(j, "objectness_threshold", "", c.objectness_threshold, errs);
    read(j, "feature_dim", "", c.feature_dim, errs);
    read(j, "num_classes", "", c.num_classes, errs);
    read(j, "train_scenes", "", c.train_scenes, errs);
    read(j, "eval_scenes", "", c.eval_scenes, errs);
    read(j, "domains", "", c.domains, errs);
    if (j.contains("lambda1")) {
        const auto& l = j["lambda1"];
        detail::reject_unknown(l, {"start", "end", "cap"}, "lambda1.", errs);
        read(l, "start", "lambda1.", c.lambda1_start, errs);
        read(l, "end", "lambda1.", c.lambda1_end, errs);
        read(l, "cap", "lambda1.", c.lambda1_cap, errs);
    }
    if (j.contains("toggles")) {
        const auto& t = j["toggles"];
        detail::reject_unknown(t, {"use_lc_lh", "use_lfd", "use_wam", "use_beta", "split_gradients"}, "toggles.", errs);
        read(t, "use_lc_lh", "toggles.", c.toggles.use_lc_lh, errs);
        read(t, "use_lfd", "toggles.", c.toggles.use_lfd, errs);
        read(t, "use_wam", "toggles.", c.toggles.use_wam, errs);
        read(t, "use_beta", "toggles.", c.toggles.use_beta, errs);
        read(t, "split_gradients", "toggles.", c.toggles.split_gradients, errs);
    }
    if (j.contains("augment")) {
        const auto& a = j["augment"];
        detail::reject_unknown(a, {"crop_scale_min", "grayscale_p", "jitter"}, "augment.", errs);
        read(a, "crop_scale_min", "augment.", c.crop_scale_min, errs);
        read(a, "grayscale_p", "augment.", c.grayscale_p, errs);
        read(a, "jitter", "augment.", c.jitter, errs);
    }
    if (j.contains("diagnostics")) {
        const auto& d = j["diagnostics"];
        detail::reject_unknown(d, {"grid_step", "folds", "max_samples"}, "diagnostics.", errs);
        read(d, "grid_step", "diagnostics.", c.grid_step, errs);
        read(d, "folds", "diagnostics.", c.proxy_folds, errs);
        read(d, "max_samples", "diagnostics.", c.diag_max_samples, errs);
    }
    for (const auto& e : validation_errors(c)) errs.push_back(e);
    if (!errs.empty()) {
        std::string msg = "invalid config:";
        for (const auto& s : errs) msg += "\n  " + s;
        throw ConfigError(msg);
    }
    return c;
}

[[nodiscard]] inline ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("invalid config: cannot open " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("invalid config: " + path + ": " + e.what());
    }
    return config_from_json(j);
}

/// FNV-1a over the canonical snapshot text.
[[nodiscard]] inline std::uint64_t config_hash(const ExperimentConfig& c)
{
    return hash_string(to_json(c).dump());
}

}  // namespace didm::exp
