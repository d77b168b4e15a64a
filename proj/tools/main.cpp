// ssdnf: single-stage diffusion neural field engine.
// Subcommands: make-data, train, sample, reconstruct, interpolate, eval.

#include "ssdnf/checkpoint.hpp"
#include "ssdnf/config.hpp"
#include "ssdnf/dataset_io.hpp"
#include "ssdnf/image.hpp"
#include "ssdnf/sampler.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

namespace fs = std::filesystem;
using namespace ssdnf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError(strcat_msg("cannot parse integer list entry '", tok, "'"));
        }
    }
    if (out.empty()) throw ConfigError(strcat_msg("empty integer list '", csv, "'"));
    return out;
}

// Chunked no-grad render of one full view.
Tensor render_view(const Tensor& bounded_code, DecoderParams& decoder, const Pose& pose,
                   const Intrinsics& intr, int H, int W, const RenderOptions& opt) {
    auto rays = rays_for_pose(pose, intr, H, W, opt.near, opt.far);
    Tensor img({H, W, 3});
    const int64_t chunk = 4096;
    for (int64_t off = 0; off < int64_t(rays.size()); off += chunk) {
        int64_t n = std::min<int64_t>(chunk, int64_t(rays.size()) - off);
        std::vector<SceneRayBatch> batch(1);
        batch[0].bounded_code = bounded_code;
        batch[0].rays.assign(rays.begin() + off, rays.begin() + off + n);
        Tensor colors = render_scenes(batch, decoder, opt, 0)[0];
        std::memcpy(img.data().data() + off * 3, colors.data().data(), size_t(n * 3) * sizeof(real));
    }
    return img;
}

// 8-pose turntable strip (elevation 30 deg, radius 2.5), concatenated along
// the width.
Tensor turntable_strip(const Tensor& bounded_code, DecoderParams& decoder, const Intrinsics& intr, int H,
                       int W, const RenderOptions& opt) {
    auto ring = turntable_ring(8, 30.0, 2.5);
    Tensor strip({H, W * 8, 3});
    for (size_t p = 0; p < ring.size(); ++p) {
        Tensor view = render_view(bounded_code, decoder, ring[p], intr, H, W, opt);
        for (int y = 0; y < H; ++y)
            std::memcpy(strip.data().data() + (int64_t(y) * W * 8 + int64_t(p) * W) * 3,
                        view.data().data() + int64_t(y) * W * 3, size_t(W) * 3 * sizeof(real));
    }
    return strip;
}

RenderOptions render_options_from(const TrainConfig& t) {
    RenderOptions opt;
    opt.n_samples = t.n_samples;
    opt.deterministic = t.deterministic;
    opt.near = t.near;
    opt.far = t.far;
    return opt;
}

std::vector<ObservationSet> build_train_observations(const SynthDataset& ds, const TrainConfig& cfg) {
    std::vector<ObservationSet> obs;
    for (size_t i = 0; i < ds.train_ids.size(); ++i) {
        int id = ds.train_ids[i];
        obs.push_back(make_observations(ds.scenes[size_t(id)], id, cfg.near, cfg.far));
    }
    return obs;
}

void check_dataset_matches(const SynthDataset& ds, const RunConfig& rc) {
    if (ds.height != rc.data.height || ds.width != rc.data.width)
        throw ConfigError(strcat_msg("dataset is ", ds.width, "x", ds.height, " but the config expects ",
                                     rc.data.width, "x", rc.data.height));
    if (int(ds.train_ids.size()) != rc.data.n_train_scenes)
        throw ConfigError(strcat_msg("dataset has ", ds.train_ids.size(), " train scenes, config expects ",
                                     rc.data.n_train_scenes));
}

int cmd_make_data(const std::string& config_path, const std::string& out_dir) {
    RunConfig rc = load_run_config(config_path);
    SynthDataset ds = make_dataset(rc.data.n_train_scenes, rc.data.n_test_scenes, rc.data.n_views,
                                   rc.data.height, rc.data.width, rc.seed, rc.data.sparse_view_subset);
    save_dataset(ds, out_dir);
    int64_t views = 0;
    for (const auto& s : ds.scenes) views += int64_t(s.images.size());
    std::cout << "dataset: " << ds.train_ids.size() << " train scenes, " << ds.test_ids.size()
              << " test scenes, " << views << " views at " << ds.width << "x" << ds.height << " -> "
              << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir) {
    RunConfig rc = load_run_config(config_path);
    SynthDataset ds = load_dataset(data_dir);
    check_dataset_matches(ds, rc);
    fs::create_directories(out_dir);

    std::vector<ObservationSet> obs = build_train_observations(ds, rc.train);
    TrainState st = TrainState::init(rc.train, int(obs.size()));

    std::ofstream log((fs::path(out_dir) / "train_log.jsonl").string());
    if (!log) throw IoError(strcat_msg("cannot open train log in '", out_dir, "'"));
    json header = {{"type", "header"},
                   {"fields", {"k_out", "lambda_rend", "lambda_diff", "loss_rend", "loss_diff",
                               "ema_norm", "wall_seconds"}},
                   {"outer_iterations", rc.train.outer_iterations},
                   {"seed", rc.seed}};
    log << header.dump() << "\n";
    log.flush();

    TrainHooks hooks;
    hooks.on_log = [&](TrainState&, const StepLog& l) {
        json line = {{"k_out", l.k_out},         {"lambda_rend", l.lambda_rend},
                     {"lambda_diff", l.lambda_diff}, {"loss_rend", l.loss_rend},
                     {"loss_diff", l.loss_diff},     {"ema_norm", l.ema_norm},
                     {"wall_seconds", l.wall_seconds}};
        log << line.dump() << "\n";
        log.flush();
    };
    hooks.on_checkpoint = [&](TrainState& s, bool final) {
        std::string name = final ? "checkpoint.ntc" : strcat_msg("checkpoint_", s.k_out, ".ntc");
        save_checkpoint((fs::path(out_dir) / name).string(), s, rc);
    };
    train(st, obs, hooks);
    std::cout << "trained " << st.k_out << " outer iterations -> " << out_dir << "/checkpoint.ntc\n";
    return kExitOk;
}

int cmd_sample(const std::string& ckpt_path, int n, const std::string& out_dir) {
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    fs::create_directories(out_dir);
    const TrainConfig& t = ck.run.train;
    Rng rng(ck.run.seed ^ 0x5A30135ULL);
    std::vector<Tensor> codes = sample_unconditional(ck.state.denoiser, t.channels, t.resolution,
                                                     t.bound_s, n, ck.run.sample, ck.state.sched, rng);
    NtcFile f;
    for (size_t i = 0; i < codes.size(); ++i) f.add_tensor(strcat_msg("sample/", i), codes[i]);
    f.write((fs::path(out_dir) / "samples.ntc").string());

    RenderOptions opt = render_options_from(t);
    Intrinsics intr = Intrinsics::from_fov(50.0, ck.run.data.width, ck.run.data.height);
    for (size_t i = 0; i < codes.size(); ++i) {
        Tensor strip = turntable_strip(codes[i], ck.state.decoder, intr, ck.run.data.height,
                                       ck.run.data.width, opt);
        write_ppm((fs::path(out_dir) / strcat_msg("sample_", i, "_turntable.ppm")).string(), strip);
    }
    std::cout << "sampled " << n << " scenes -> " << out_dir << "\n";
    return kExitOk;
}

int cmd_reconstruct(const std::string& ckpt_path, const std::string& data_dir, int scene_id,
                    const std::string& views_csv, const std::string& out_dir) {
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    SynthDataset ds = load_dataset(data_dir);
    if (scene_id < 0 || scene_id >= int(ds.scenes.size()))
        throw ConfigError(strcat_msg("scene ", scene_id, " out of range; dataset has ", ds.scenes.size(),
                                     " scenes"));
    std::vector<int> input_views = parse_int_list(views_csv);
    const TrainConfig& t = ck.run.train;
    RenderOptions opt = render_options_from(t);
    fs::create_directories(out_dir);

    ObservationSet obs = make_observations(ds.scenes[size_t(scene_id)], scene_id, t.near, t.far,
                                            input_views);
    Rng rng(ck.run.seed ^ (0x4EC0ULL + uint64_t(scene_id)));
    Tensor code = reconstruct(obs, ck.state.denoiser, ck.state.decoder, t.channels, t.resolution,
                              t.bound_s, t.tanh_enabled, ck.run.sample, ck.state.sched, opt, rng);

    NtcFile f;
    f.add_tensor("code", code);
    f.write((fs::path(out_dir) / "code.ntc").string());

    // novel-view renders and metrics over the held-out poses
    const SceneViews& sv = ds.scenes[size_t(scene_id)];
    std::set<int> used(input_views.begin(), input_views.end());
    json per_view = json::array();
    double psnr_sum = 0, ssim_sum = 0;
    int held_out = 0;
    for (int v = 0; v < int(sv.poses.size()); ++v) {
        if (used.count(v)) continue;
        Tensor render = render_view(code, ck.state.decoder, sv.poses[size_t(v)], sv.intrinsics,
                                    ds.height, ds.width, opt);
        write_ppm((fs::path(out_dir) / strcat_msg("view_", v, ".ppm")).string(), render);
        double p = psnr(render, sv.images[size_t(v)]);
        double s = ssim(render, sv.images[size_t(v)]);
        per_view.push_back({{"view", v}, {"psnr", p}, {"ssim", s}});
        psnr_sum += p;
        ssim_sum += s;
        ++held_out;
    }
    json metrics = {{"scene", scene_id},
                    {"input_views", input_views},
                    {"held_out_views", held_out},
                    {"mean_psnr", held_out ? psnr_sum / held_out : 0.0},
                    {"mean_ssim", held_out ? ssim_sum / held_out : 0.0},
                    {"per_view", per_view}};
    std::ofstream mf((fs::path(out_dir) / "metrics.json").string());
    mf << metrics.dump(2) << "\n";
    std::cout << "reconstructed scene " << scene_id << ": mean held-out PSNR "
              << (held_out ? psnr_sum / held_out : 0.0) << " dB -> " << out_dir << "\n";
    return kExitOk;
}

int cmd_interpolate(const std::string& ckpt_path, int n_steps, const std::string& out_dir) {
    if (n_steps < 2) throw ConfigError("interpolate: need at least 2 steps");
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    fs::create_directories(out_dir);
    const TrainConfig& t = ck.run.train;
    Shape flat{3 * t.channels, t.resolution, t.resolution};
    Rng r0(ck.run.seed ^ 0x1A7E47ULL);
    Rng r1(ck.run.seed ^ 0x1A7E48ULL);
    Tensor xT0 = randn(flat, r0);
    Tensor xT1 = randn(flat, r1);

    RenderOptions opt = render_options_from(t);
    Intrinsics intr = Intrinsics::from_fov(50.0, ck.run.data.width, ck.run.data.height);
    Pose pose = turntable_ring(8, 30.0, 2.5)[0];
    for (int i = 0; i < n_steps; ++i) {
        double u = double(i) / double(n_steps - 1);
        Tensor xT = slerp(xT0, xT1, u);
        Tensor code = sample_from_noise(ck.state.denoiser, xT, t.bound_s, ck.run.sample, ck.state.sched);
        Tensor code4 = reshape(code, {3, t.channels, t.resolution, t.resolution});
        Tensor view = render_view(code4, ck.state.decoder, pose, intr, ck.run.data.height,
                                  ck.run.data.width, opt);
        write_ppm((fs::path(out_dir) / strcat_msg("interp_", i, ".ppm")).string(), view);
    }
    std::cout << "interpolated " << n_steps << " samples -> " << out_dir << "\n";
    return kExitOk;
}

// evenly spread k input view indices over the available views
std::vector<int> spread_views(int available, int k) {
    std::vector<int> out;
    if (k >= available) {
        for (int i = 0; i < available; ++i) out.push_back(i);
        return out;
    }
    for (int i = 0; i < k; ++i) out.push_back(int(std::lround(double(i) * double(available - 1) /
                                                             double(std::max(k - 1, 1)))));
    if (k == 1) out[0] = available / 2;
    return out;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& counts_csv,
             const std::string& out_dir) {
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    SynthDataset ds = load_dataset(data_dir);
    if (ds.test_ids.empty()) throw ConfigError("eval: dataset has no test scenes");
    std::vector<int> counts = parse_int_list(counts_csv);
    const TrainConfig& t = ck.run.train;
    RenderOptions opt = render_options_from(t);
    fs::create_directories(out_dir);

    json table = json::array();
    std::cout << "views  mean_psnr  mean_ssim\n";
    for (int k : counts) {
        double psnr_acc = 0, ssim_acc = 0;
        int n_metrics = 0;
        SampleConfig scfg = eval_sample_config(ck.run.sample, k);
        for (int scene_id : ds.test_ids) {
            const SceneViews& sv = ds.scenes[size_t(scene_id)];
            std::vector<int> input_views = spread_views(int(sv.poses.size()), k);
            ObservationSet obs = make_observations(sv, scene_id, t.near, t.far, input_views);
            Rng rng(ck.run.seed ^ (uint64_t(k) * 7919 + uint64_t(scene_id)));
            Tensor code = reconstruct(obs, ck.state.denoiser, ck.state.decoder, t.channels, t.resolution,
                                      t.bound_s, t.tanh_enabled, scfg, ck.state.sched, opt, rng);
            std::set<int> used(input_views.begin(), input_views.end());
            for (int v = 0; v < int(sv.poses.size()); ++v) {
                if (used.count(v)) continue;
                Tensor render = render_view(code, ck.state.decoder, sv.poses[size_t(v)], sv.intrinsics,
                                            ds.height, ds.width, opt);
                psnr_acc += psnr(render, sv.images[size_t(v)]);
                ssim_acc += ssim(render, sv.images[size_t(v)]);
                ++n_metrics;
            }
        }
        double mp = n_metrics ? psnr_acc / n_metrics : 0.0;
        double ms = n_metrics ? ssim_acc / n_metrics : 0.0;
        table.push_back({{"views", k}, {"mean_psnr", mp}, {"mean_ssim", ms}});
        std::cout << k << "  " << mp << "  " << ms << "\n";
    }
    std::ofstream tf((fs::path(out_dir) / "eval.json").string());
    tf << table.dump(2) << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-stage diffusion neural fields"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, ckpt_path, views_csv = "0";
    std::string counts_csv = "1,2,4,8,16";
    int n_samples = 4, scene_id = 0, n_steps = 5;

    auto* mk = app.add_subcommand("make-data", "generate the synthetic multi-view dataset");
    mk->add_option("--config", config_path)->required();
    mk->add_option("--out", out_dir)->required();

    auto* tr = app.add_subcommand("train", "run single-stage training");
    tr->add_option("--config", config_path)->required();
    tr->add_option("--data", data_dir)->required();
    tr->add_option("--out", out_dir)->required();

    auto* sp = app.add_subcommand("sample", "unconditional scene sampling");
    sp->add_option("--checkpoint", ckpt_path)->required();
    sp->add_option("--n", n_samples);
    sp->add_option("--out", out_dir)->required();

    auto* rc = app.add_subcommand("reconstruct", "image-guided reconstruction of one scene");
    rc->add_option("--checkpoint", ckpt_path)->required();
    rc->add_option("--data", data_dir)->required();
    rc->add_option("--scene", scene_id)->required();
    rc->add_option("--views", views_csv)->required();
    rc->add_option("--out", out_dir)->required();

    auto* ip = app.add_subcommand("interpolate", "latent slerp interpolation");
    ip->add_option("--checkpoint", ckpt_path)->required();
    ip->add_option("--n-steps", n_steps);
    ip->add_option("--out", out_dir)->required();

    auto* ev = app.add_subcommand("eval", "sparse-to-dense reconstruction sweep over the test split");
    ev->add_option("--checkpoint", ckpt_path)->required();
    ev->add_option("--data", data_dir)->required();
    ev->add_option("--views", counts_csv, "comma-separated input view counts");
    ev->add_option("--out", out_dir)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (mk->parsed()) return cmd_make_data(config_path, out_dir);
        if (tr->parsed()) return cmd_train(config_path, data_dir, out_dir);
        if (sp->parsed()) return cmd_sample(ckpt_path, n_samples, out_dir);
        if (rc->parsed()) return cmd_reconstruct(ckpt_path, data_dir, scene_id, views_csv, out_dir);
        if (ip->parsed()) return cmd_interpolate(ckpt_path, n_steps, out_dir);
        if (ev->parsed()) return cmd_eval(ckpt_path, data_dir, counts_csv, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ShapeError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}
