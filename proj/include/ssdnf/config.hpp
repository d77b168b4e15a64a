#pragma once

#include "sampler.hpp"
#include "trainer.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <string>

namespace ssdnf {

using nlohmann::json;

namespace detail {

inline void check_keys(const json& obj, const std::string& section, const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError(strcat_msg("config: section '", section, "' must be an object"));
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError(strcat_msg("config: unknown key '", it.key(), "' in section '", section, "'"));
}

template <class T>
T req(const json& obj, const std::string& section, const std::string& key) {
    if (!obj.contains(key))
        throw ConfigError(strcat_msg("config: missing key '", key, "' in section '", section, "'"));
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(strcat_msg("config: key '", key, "' in section '", section, "' has the wrong type"));
    }
}

template <class T>
T opt(const json& obj, const std::string& section, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(strcat_msg("config: key '", key, "' in section '", section, "' has the wrong type"));
    }
}

template <class T>
StepSchedule<T> parse_schedule(const json& arr, const std::string& name) {
    if (!arr.is_array() || arr.empty())
        throw ConfigError(strcat_msg("config: '", name, "' must be a non-empty array"));
    StepSchedule<T> sch;
    int64_t prev_until = 0;
    for (size_t i = 0; i < arr.size(); ++i) {
        const json& p = arr[i];
        check_keys(p, name, {"until", "value"});
        int64_t until = p.contains("until") ? p.at("until").get<int64_t>() : INT64_MAX;
        if (i + 1 == arr.size()) until = p.contains("until") ? until : INT64_MAX;
        else if (!p.contains("until"))
            throw ConfigError(strcat_msg("config: '", name, "' entries before the last need 'until'"));
        if (until <= prev_until)
            throw ConfigError(strcat_msg("config: '", name, "' bounds must be strictly increasing"));
        prev_until = until == INT64_MAX ? prev_until : until;
        sch.pieces.push_back({until, req<T>(p, name, "value")});
    }
    return sch;
}

template <class T>
json schedule_to_json(const StepSchedule<T>& sch) {
    json arr = json::array();
    for (const auto& p : sch.pieces) {
        json e;
        if (p.until != INT64_MAX) e["until"] = p.until;
        e["value"] = p.value;
        arr.push_back(e);
    }
    return arr;
}

} // namespace detail

struct DataConfig {
    int n_train_scenes = 16;
    int n_test_scenes = 4;
    int n_views = 16;
    int height = 32;
    int width = 32;
    int sparse_view_subset = 0; // 0: keep all train views
};

struct RunConfig {
    uint64_t seed = 0;
    bool deterministic = true;
    DataConfig data;
    TrainConfig train;
    SampleConfig sample;
};

inline RunConfig parse_run_config(const json& root) {
    detail::check_keys(root, "(root)", {"seed", "deterministic", "data", "model", "schedule", "train", "sample"});
    RunConfig rc;
    rc.seed = detail::req<uint64_t>(root, "(root)", "seed");
    rc.deterministic = detail::req<bool>(root, "(root)", "deterministic");

    const json& data = root.contains("data") ? root.at("data") : json::object();
    detail::check_keys(data, "data",
                       {"n_train_scenes", "n_test_scenes", "n_views", "height", "width", "sparse_view_subset"});
    rc.data.n_train_scenes = detail::req<int>(data, "data", "n_train_scenes");
    rc.data.n_test_scenes = detail::req<int>(data, "data", "n_test_scenes");
    rc.data.n_views = detail::req<int>(data, "data", "n_views");
    rc.data.height = detail::req<int>(data, "data", "height");
    rc.data.width = detail::req<int>(data, "data", "width");
    rc.data.sparse_view_subset = detail::opt<int>(data, "data", "sparse_view_subset", 0);
    if (rc.data.n_train_scenes < 1 || rc.data.n_views < 1 || rc.data.height < 1 || rc.data.width < 1)
        throw ConfigError("config: data sizes must be positive");
    if (rc.data.sparse_view_subset < 0 || rc.data.sparse_view_subset > rc.data.n_views)
        throw ConfigError("config: sparse_view_subset out of range");

    TrainConfig& t = rc.train;
    const json& model = root.at("model");
    detail::check_keys(model, "model",
                       {"channels", "resolution", "bound_s", "tanh_enabled", "decoder_hidden", "dir_bands",
                        "unet_base", "temb_dim"});
    t.channels = detail::req<int>(model, "model", "channels");
    t.resolution = detail::req<int>(model, "model", "resolution");
    t.bound_s = real(detail::req<double>(model, "model", "bound_s"));
    t.tanh_enabled = detail::opt<bool>(model, "model", "tanh_enabled", true);
    t.decoder_hidden = detail::req<int>(model, "model", "decoder_hidden");
    t.dir_bands = detail::opt<int>(model, "model", "dir_bands", 4);
    t.unet_base = detail::req<int>(model, "model", "unet_base");
    t.temb_dim = detail::opt<int>(model, "model", "temb_dim", 64);
    if (t.bound_s <= 0) throw ConfigError("config: bound_s must be positive");

    const json& sched = root.at("schedule");
    detail::check_keys(sched, "schedule", {"diffusion_steps", "beta_start", "beta_end"});
    t.diffusion_steps = detail::req<int>(sched, "schedule", "diffusion_steps");
    t.beta_start = detail::req<double>(sched, "schedule", "beta_start");
    t.beta_end = detail::req<double>(sched, "schedule", "beta_end");

    const json& train = root.at("train");
    detail::check_keys(train, "train",
                       {"c_rend", "c_diff", "lambda_reg", "l2_reg_enabled", "ema_decay", "ema_floor", "omega",
                        "scene_batch", "ray_batch", "outer_iterations", "inner_schedule", "lr_mult_schedule",
                        "lr_codes", "lr_decoder", "lr_denoiser", "reset_codes_at", "n_samples", "near",
                        "far", "checkpoint_every", "log_every"});
    t.c_rend = detail::req<double>(train, "train", "c_rend");
    t.c_diff = detail::req<double>(train, "train", "c_diff");
    t.lambda_reg = detail::req<double>(train, "train", "lambda_reg");
    t.l2_reg_enabled = detail::opt<bool>(train, "train", "l2_reg_enabled", true);
    t.ema_decay = detail::req<double>(train, "train", "ema_decay");
    t.ema_floor = detail::opt<double>(train, "train", "ema_floor", 1e-3);
    t.omega = detail::req<double>(train, "train", "omega");
    t.scene_batch = detail::req<int>(train, "train", "scene_batch");
    t.ray_batch = detail::req<int>(train, "train", "ray_batch");
    t.outer_iterations = detail::req<int64_t>(train, "train", "outer_iterations");
    t.inner_schedule = detail::parse_schedule<int>(train.at("inner_schedule"), "inner_schedule");
    t.lr_mult_schedule = detail::parse_schedule<double>(train.at("lr_mult_schedule"), "lr_mult_schedule");
    t.lr_codes = detail::req<double>(train, "train", "lr_codes");
    t.lr_decoder = detail::req<double>(train, "train", "lr_decoder");
    t.lr_denoiser = detail::req<double>(train, "train", "lr_denoiser");
    t.reset_codes_at = detail::opt<int64_t>(train, "train", "reset_codes_at", 0);
    t.n_samples = detail::req<int>(train, "train", "n_samples");
    t.near = detail::opt<double>(train, "train", "near", 0.8);
    t.far = detail::opt<double>(train, "train", "far", 4.2);
    t.checkpoint_every = detail::opt<int64_t>(train, "train", "checkpoint_every", 0);
    t.log_every = detail::opt<int64_t>(train, "train", "log_every", 1);
    if (t.ema_decay < 0 || t.ema_decay >= 1) throw ConfigError("config: ema_decay must be in [0,1)");
    t.deterministic = rc.deterministic;
    t.seed = rc.seed;
    t.validate();

    SampleConfig& s = rc.sample;
    const json& sample = root.at("sample");
    detail::check_keys(sample, "sample",
                       {"ddim_steps", "langevin_inner_iterations", "langevin_delta", "guidance_scale",
                        "omega", "guidance_ray_batch", "finetune"});
    s.ddim_steps = detail::req<int>(sample, "sample", "ddim_steps");
    s.langevin_inner_iterations = detail::req<int>(sample, "sample", "langevin_inner_iterations");
    s.langevin_delta = detail::req<double>(sample, "sample", "langevin_delta");
    s.guidance_scale = detail::req<double>(sample, "sample", "guidance_scale");
    s.omega = detail::req<double>(sample, "sample", "omega");
    s.guidance_ray_batch = detail::opt<int>(sample, "sample", "guidance_ray_batch", 256);
    const json& ft = sample.at("finetune");
    detail::check_keys(ft, "sample.finetune", {"outer", "inner", "c_diff", "lr", "lr_decay", "ray_batch"});
    s.ft_outer = detail::req<int>(ft, "sample.finetune", "outer");
    s.ft_inner = detail::req<int>(ft, "sample.finetune", "inner");
    s.ft_c_diff = detail::req<double>(ft, "sample.finetune", "c_diff");
    s.ft_lr = detail::req<double>(ft, "sample.finetune", "lr");
    s.ft_lr_decay = detail::req<double>(ft, "sample.finetune", "lr_decay");
    s.ft_ray_batch = detail::opt<int>(ft, "sample.finetune", "ray_batch", 256);
    s.c_rend = t.c_rend;
    s.lambda_reg = t.lambda_reg;
    s.l2_reg_enabled = t.l2_reg_enabled;
    s.ema_floor = t.ema_floor;
    s.seed = rc.seed;
    s.validate();
    return rc;
}

inline json run_config_to_json(const RunConfig& rc) {
    json root;
    root["seed"] = rc.seed;
    root["deterministic"] = rc.deterministic;
    root["data"] = {{"n_train_scenes", rc.data.n_train_scenes}, {"n_test_scenes", rc.data.n_test_scenes},
                    {"n_views", rc.data.n_views},               {"height", rc.data.height},
                    {"width", rc.data.width},                   {"sparse_view_subset", rc.data.sparse_view_subset}};
    const TrainConfig& t = rc.train;
    root["model"] = {{"channels", t.channels},
                     {"resolution", t.resolution},
                     {"bound_s", double(t.bound_s)},
                     {"tanh_enabled", t.tanh_enabled},
                     {"decoder_hidden", t.decoder_hidden},
                     {"dir_bands", t.dir_bands},
                     {"unet_base", t.unet_base},
                     {"temb_dim", t.temb_dim}};
    root["schedule"] = {{"diffusion_steps", t.diffusion_steps},
                        {"beta_start", t.beta_start},
                        {"beta_end", t.beta_end}};
    root["train"] = {{"c_rend", t.c_rend},
                     {"c_diff", t.c_diff},
                     {"lambda_reg", t.lambda_reg},
                     {"l2_reg_enabled", t.l2_reg_enabled},
                     {"ema_decay", t.ema_decay},
                     {"ema_floor", t.ema_floor},
                     {"omega", t.omega},
                     {"scene_batch", t.scene_batch},
                     {"ray_batch", t.ray_batch},
                     {"outer_iterations", t.outer_iterations},
                     {"inner_schedule", detail::schedule_to_json(t.inner_schedule)},
                     {"lr_mult_schedule", detail::schedule_to_json(t.lr_mult_schedule)},
                     {"lr_codes", t.lr_codes},
                     {"lr_decoder", t.lr_decoder},
                     {"lr_denoiser", t.lr_denoiser},
                     {"reset_codes_at", t.reset_codes_at},
                     {"n_samples", t.n_samples},
                     {"near", t.near},
                     {"far", t.far},
                     {"checkpoint_every", t.checkpoint_every},
                     {"log_every", t.log_every}};
    const SampleConfig& s = rc.sample;
    root["sample"] = {{"ddim_steps", s.ddim_steps},
                      {"langevin_inner_iterations", s.langevin_inner_iterations},
                      {"langevin_delta", s.langevin_delta},
                      {"guidance_scale", s.guidance_scale},
                      {"omega", s.omega},
                      {"guidance_ray_batch", s.guidance_ray_batch},
                      {"finetune",
                       {{"outer", s.ft_outer},
                        {"inner", s.ft_inner},
                        {"c_diff", s.ft_c_diff},
                        {"lr", s.ft_lr},
                        {"lr_decay", s.ft_lr_decay},
                        {"ray_batch", s.ft_ray_batch}}}};
    return root;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError(strcat_msg("config: cannot open '", path, "'"));
    json root;
    try {
        f >> root;
    } catch (const json::exception& e) {
        throw ConfigError(strcat_msg("config: '", path, "' is not valid JSON: ", e.what()));
    }
    return parse_run_config(root);
}

// Per-view-count finetuning settings for the evaluation sweep; more input
// views warrant more iterations and a higher code learning rate, both capped
// for stability and runtime.
inline SampleConfig eval_sample_config(const SampleConfig& base, int view_count) {
    SampleConfig s = base;
    s.ft_outer = int(std::min<int64_t>(200, int64_t(base.ft_outer) * view_count));
    s.ft_lr = base.ft_lr * std::min(view_count, 8);
    s.ft_inner = view_count <= 4 ? base.ft_inner : (view_count <= 8 ? base.ft_inner + 1 : base.ft_inner * 2);
    return s;
}

} // namespace ssdnf
