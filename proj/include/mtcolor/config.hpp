#pragma once

// Key/value configuration files and JSON echoes of the model, schedule,
// training and sampling settings.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mtcolor/diffusion.hpp"

namespace mtcolor {

struct ScheduleConfig {
    int timesteps = 200;
    double beta_start = 5e-4;
    double beta_end = 0.1;

    NoiseSchedule make() const { return make_schedule(timesteps, beta_start, beta_end); }
};

struct TrainConfig {
    int stage = 1;
    double lr = 5e-5;
    int warmup = 500;
    double dropout = 0.5;
    int batch_size = 8;
    int iterations = 1000;
    std::uint64_t seed = 0;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int checkpoint_every = 0; // 0 = only at the end
    int log_every = 50;
    int threads = 1;
    bool stage2_train_backbone = true;
    double grad_clip = 1.0; // global-norm clip; 0 disables
    double ema_decay = 0.0; // exported weights are an exponential average when > 0

    void validate() const {
        if (stage != 1 && stage != 2) throw InvalidArgument("stage must be 1 or 2, got " + std::to_string(stage));
        if (!(lr > 0)) throw InvalidArgument("lr must be positive");
        if (warmup < 0) throw InvalidArgument("warmup must be >= 0");
        if (!(dropout >= 0 && dropout <= 1)) throw InvalidArgument("dropout must be in [0,1]");
        if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
        if (iterations < 0) throw InvalidArgument("iterations must be >= 0");
        if (threads < 1) throw InvalidArgument("threads must be >= 1");
        if (weight_decay < 0) throw InvalidArgument("weight_decay must be >= 0");
        if (!(ema_decay >= 0 && ema_decay < 1)) throw InvalidArgument("ema_decay must be in [0,1)");
    }
};

struct RunConfig {
    DenoiserConfig model;
    ScheduleConfig schedule;
    TrainConfig train;
    SamplerConfig sampler;
};

// ---------------------------------------------------------------- key/value text

// "key = value" per line; '#' starts a comment. Duplicate keys are an error.
inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& source = "config") {
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw InvalidArgument(source + ":" + std::to_string(lineno) + ": empty key");
        if (!kv.emplace(key, value).second)
            throw InvalidArgument(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    return kv;
}

namespace detail {

template <typename V>
V parse_value(const std::string& key, const std::string& s) {
    std::istringstream in(s);
    V v{};
    if constexpr (std::is_same_v<V, bool>) {
        if (s == "1" || s == "true" || s == "on") return true;
        if (s == "0" || s == "false" || s == "off") return false;
        throw InvalidArgument("config key '" + key + "': expected a boolean, got '" + s + "'");
    } else {
        in >> v;
        if (!in || !(in >> std::ws).eof())
            throw InvalidArgument("config key '" + key + "': cannot parse '" + s + "'");
        return v;
    }
}

inline MaskPolicy::Background background_from_string(const std::string& s) {
    if (s == "self_only") return MaskPolicy::Background::self_only;
    if (s == "background_region") return MaskPolicy::Background::background_region;
    if (s == "all_ones") return MaskPolicy::Background::all_ones;
    throw InvalidArgument("unknown background policy '" + s + "'");
}

inline const char* to_string(MaskPolicy::Background b) {
    switch (b) {
    case MaskPolicy::Background::self_only: return "self_only";
    case MaskPolicy::Background::background_region: return "background_region";
    case MaskPolicy::Background::all_ones: return "all_ones";
    }
    return "?";
}

inline MaskPolicy::Overlap overlap_from_string(const std::string& s) {
    if (s == "union_all") return MaskPolicy::Overlap::union_all;
    if (s == "first_match") return MaskPolicy::Overlap::first_match;
    throw InvalidArgument("unknown overlap policy '" + s + "'");
}

inline const char* to_string(MaskPolicy::Overlap o) {
    return o == MaskPolicy::Overlap::union_all ? "union_all" : "first_match";
}

} // namespace detail

// Applies every key to the matching field; unknown keys are rejected.
inline void apply_key_values(RunConfig& rc, const std::map<std::string, std::string>& kv) {
    using detail::parse_value;
    auto& m = rc.model;
    auto& s = rc.schedule;
    auto& t = rc.train;
    auto& p = rc.sampler;
    for (const auto& [k, v] : kv) {
        // model
        if (k == "image_size") m.image_size = parse_value<int>(k, v);
        else if (k == "base_channels") m.base_channels = parse_value<int>(k, v);
        else if (k == "time_dim") m.time_dim = parse_value<int>(k, v);
        else if (k == "groups") m.groups = parse_value<int>(k, v);
        else if (k == "heads") m.heads = parse_value<int>(k, v);
        else if (k == "mask_mode") m.mode = mask_mode_from_string(v);
        else if (k == "background") m.policy.background = detail::background_from_string(v);
        else if (k == "overlap") m.policy.overlap = detail::overlap_from_string(v);
        else if (k == "guidance_first") m.guidance_first = parse_value<bool>(k, v);
        else if (k == "text_encoder") m.text_encoder = v;
        else if (k == "text_sidecar") m.text_sidecar = v;
        else if (k == "mask_resolution") m.guidance.mask_resolution = parse_value<int>(k, v);
        else if (k == "guidance_hidden") m.guidance.hidden = parse_value<int>(k, v);
        else if (k == "max_tokens") m.guidance.max_tokens = parse_value<int>(k, v);
        // schedule
        else if (k == "timesteps") s.timesteps = parse_value<int>(k, v);
        else if (k == "beta_start") s.beta_start = parse_value<double>(k, v);
        else if (k == "beta_end") s.beta_end = parse_value<double>(k, v);
        // training
        else if (k == "stage") t.stage = parse_value<int>(k, v);
        else if (k == "lr") t.lr = parse_value<double>(k, v);
        else if (k == "warmup") t.warmup = parse_value<int>(k, v);
        else if (k == "dropout") t.dropout = parse_value<double>(k, v);
        else if (k == "batch_size") t.batch_size = parse_value<int>(k, v);
        else if (k == "iterations") t.iterations = parse_value<int>(k, v);
        else if (k == "seed") t.seed = parse_value<std::uint64_t>(k, v);
        else if (k == "weight_decay") t.weight_decay = parse_value<double>(k, v);
        else if (k == "adam_beta1") t.adam_beta1 = parse_value<double>(k, v);
        else if (k == "adam_beta2") t.adam_beta2 = parse_value<double>(k, v);
        else if (k == "checkpoint_every") t.checkpoint_every = parse_value<int>(k, v);
        else if (k == "log_every") t.log_every = parse_value<int>(k, v);
        else if (k == "threads") t.threads = parse_value<int>(k, v);
        else if (k == "stage2_train_backbone") t.stage2_train_backbone = parse_value<bool>(k, v);
        else if (k == "grad_clip") t.grad_clip = parse_value<double>(k, v);
        else if (k == "ema_decay") t.ema_decay = parse_value<double>(k, v);
        // sampling
        else if (k == "ddim_steps") p.ddim_steps = parse_value<int>(k, v);
        else if (k == "eta") p.eta = parse_value<double>(k, v);
        else if (k == "guidance") p.guidance = parse_value<double>(k, v);
        else if (k == "alpha") p.alpha = parse_value<double>(k, v);
        else if (k == "beta") p.beta = parse_value<double>(k, v);
        else if (k == "sample_seed") p.seed = parse_value<std::uint64_t>(k, v);
        else if (k == "fuse_mode") p.fuse_mode = fuse_mode_from_string(v);
        else if (k == "fuse_first_match") p.fuse_first_match = parse_value<bool>(k, v);
        else if (k == "luma_lock") p.luma_lock = parse_value<bool>(k, v);
        else if (k == "clip_x0") p.clip_x0 = parse_value<bool>(k, v);
        else if (k == "sample_threads") p.threads = parse_value<int>(k, v);
        else throw InvalidArgument("unknown config key '" + k + "'");
    }
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open config file '" + path + "'");
    RunConfig rc;
    apply_key_values(rc, parse_key_values(in, path));
    rc.model.validate();
    rc.train.validate();
    return rc;
}

// ---------------------------------------------------------------- JSON echo

inline nlohmann::json to_json(const DenoiserConfig& m) {
    return {{"image_size", m.image_size},
            {"channels", m.channels},
            {"base_channels", m.base_channels},
            {"mults", m.mults},
            {"time_dim", m.time_dim},
            {"groups", m.groups},
            {"heads", m.heads},
            {"mask_mode", to_string(m.mode)},
            {"background", detail::to_string(m.policy.background)},
            {"overlap", detail::to_string(m.policy.overlap)},
            {"guidance_first", m.guidance_first},
            {"text_encoder", m.text_encoder},
            {"text_sidecar", m.text_sidecar},
            {"mask_resolution", m.guidance.mask_resolution},
            {"mask_channels", m.guidance.mask_channels},
            {"guidance_hidden", m.guidance.hidden},
            {"max_tokens", m.guidance.max_tokens}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
    DenoiserConfig m;
    try {
        m.image_size = j.at("image_size");
        m.channels = j.at("channels");
        m.base_channels = j.at("base_channels");
        m.mults = j.at("mults").get<std::array<int, 3>>();
        m.time_dim = j.at("time_dim");
        m.groups = j.at("groups");
        m.heads = j.at("heads");
        m.mode = mask_mode_from_string(j.at("mask_mode"));
        m.policy.background = detail::background_from_string(j.at("background"));
        m.policy.overlap = detail::overlap_from_string(j.at("overlap"));
        m.guidance_first = j.at("guidance_first");
        m.text_encoder = j.at("text_encoder");
        m.text_sidecar = j.value("text_sidecar", "");
        m.guidance.mask_resolution = j.at("mask_resolution");
        m.guidance.mask_channels = j.at("mask_channels").get<std::array<int, 3>>();
        m.guidance.hidden = j.at("guidance_hidden");
        m.guidance.max_tokens = j.at("max_tokens");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("model config echo is invalid: ") + e.what());
    }
    return m;
}

inline nlohmann::json to_json(const ScheduleConfig& s) {
    return {{"timesteps", s.timesteps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline ScheduleConfig schedule_config_from_json(const nlohmann::json& j) {
    ScheduleConfig s;
    s.timesteps = j.at("timesteps");
    s.beta_start = j.at("beta_start");
    s.beta_end = j.at("beta_end");
    return s;
}

inline nlohmann::json to_json(const TrainConfig& t) {
    return {{"stage", t.stage},
            {"lr", t.lr},
            {"warmup", t.warmup},
            {"dropout", t.dropout},
            {"batch_size", t.batch_size},
            {"iterations", t.iterations},
            {"seed", t.seed},
            {"weight_decay", t.weight_decay},
            {"adam_beta1", t.adam_beta1},
            {"adam_beta2", t.adam_beta2},
            {"stage2_train_backbone", t.stage2_train_backbone},
            {"grad_clip", t.grad_clip}, {"ema_decay", t.ema_decay}};
}

inline nlohmann::json to_json(const SamplerConfig& p) {
    return {{"ddim_steps", p.ddim_steps}, {"eta", p.eta},
            {"guidance", p.guidance},     {"alpha", p.alpha},
            {"beta", p.beta},             {"seed", p.seed},
            {"fuse_mode", to_string(p.fuse_mode)}, {"fuse_first_match", p.fuse_first_match},
            {"luma_lock", p.luma_lock}, {"clip_x0", p.clip_x0}};
}

} // namespace mtcolor
