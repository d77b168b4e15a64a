#pragma once

#include "adam.hpp"
#include "diffusion.hpp"
#include "field.hpp"
#include "observations.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ssdnf {

// ---- loss weight balancing ----------------------------------------------------

// Render/prior weight balancing: the diffusion weight is normalized by an
// EMA of the scene codes' squared Frobenius norms, the rendering weight by
// the number of available views.
struct WeightBalancer {
    double c_rend = 40.0 / 16384.0; // 40 * 2^-14
    double c_diff = 4.0;
    double ema_decay = 0.999;
    double lambda_reg = 0.003;
    int64_t dim_x = 0;
    double ema_norm = 0;
    bool ema_initialized = false;

    double lambda_diff() const {
        if (ema_norm <= 0) throw NumericError("balance_weights: ema_norm is zero");
        return c_diff / ema_norm;
    }

    // n_views may be fractional: guided sampling uses the batch-effective
    // view count |B_ray| / N_ray * N_v.
    double lambda_rend(double n_views) const {
        if (n_views <= 0) throw ConfigError(strcat_msg("balance_weights: N_v must be positive, got ", n_views));
        return c_rend * (1.0 - std::exp(-0.1 * n_views)) / n_views;
    }

    // ema <- decay * ema + (1 - decay) * mean_i ||x_i||_F^2
    void ema_update(std::span<const double> squared_norms) {
        if (squared_norms.empty()) throw ConfigError("ema_update: empty batch");
        double mean = 0;
        for (double v : squared_norms) mean += v;
        mean /= double(squared_norms.size());
        ema_norm = ema_decay * ema_norm + (1.0 - ema_decay) * mean;
    }

    // First-batch initialization; the floor guards the zero-init codes whose
    // norms start at exactly zero.
    void ema_init(std::span<const double> squared_norms, double floor_value) {
        double mean = 0;
        for (double v : squared_norms) mean += v;
        mean /= double(squared_norms.size());
        ema_norm = std::max(mean, floor_value);
        ema_initialized = true;
    }
};

inline double squared_frobenius(const Tensor& t) {
    double acc = 0;
    for (real v : t.data()) acc += double(v) * double(v);
    return acc;
}

// L2 latent regularization (lambda_reg / dim_X) * E_i ||x_i||_F^2 on the
// bounded codes; differentiable.
inline Tensor l2_reg_term(const std::vector<Tensor>& bounded_codes, double lambda_reg, int64_t dim_x) {
    if (bounded_codes.empty()) throw ConfigError("l2_reg_term: no codes");
    Tensor acc;
    for (size_t i = 0; i < bounded_codes.size(); ++i) {
        Tensor s = sum(square(bounded_codes[i]));
        acc = i == 0 ? s : acc + s;
    }
    return acc * real(lambda_reg / (double(dim_x) * double(bounded_codes.size())));
}

// ---- schedules ------------------------------------------------------------------

// Step function of the outer iteration: value of the first entry whose
// `until` bound is >= k_out; the last entry is open-ended.
template <class T>
struct StepSchedule {
    struct Piece {
        int64_t until;
        T value;
    };
    std::vector<Piece> pieces;

    T at(int64_t k_out) const {
        if (pieces.empty()) throw ConfigError("schedule: empty");
        for (const auto& p : pieces)
            if (k_out <= p.until) return p.value;
        return pieces.back().value;
    }
};

// ---- named parameter groups -------------------------------------------------------

// Adam states keyed by parameter name, so structured parameter sets
// (decoder, denoiser) can be stepped and checkpointed uniformly.
struct NamedAdam {
    double lr = 1e-3;
    std::map<std::string, AdamState> states;

    template <class Params>
    void step(Params& params, Tape& tape, double lr_mult) {
        params.for_each_param([&](const std::string& name, Tensor& t) {
            apply(name, t, tape.grad(t), lr_mult);
        });
    }

    template <class Params>
    void step_with(Params& params, const std::map<std::string, Tensor>& grads, double lr_mult) {
        params.for_each_param([&](const std::string& name, Tensor& t) {
            auto it = grads.find(name);
            if (it == grads.end()) throw Error(strcat_msg("adam: no stored gradient for ", name));
            apply(name, t, it->second, lr_mult);
        });
    }

    void apply(const std::string& name, Tensor& t, const Tensor& g, double lr_mult) {
        auto it = states.find(name);
        if (it == states.end()) it = states.emplace(name, AdamState(t.shape(), real(lr))).first;
        it->second.lr = real(lr);
        it->second.lr_mult = real(lr_mult);
        adam_step(t, g, it->second, name);
    }
};

// ---- trainer --------------------------------------------------------------------

struct TrainConfig {
    // model
    int channels = 4;
    int resolution = 16;
    real bound_s = 2;
    bool tanh_enabled = true;
    int decoder_hidden = 64;
    int dir_bands = 4;
    int unet_base = 32;
    int temb_dim = 64;
    // schedule
    int diffusion_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double omega = 0.5;
    // loss balancing
    double c_rend = 40.0 / 16384.0;
    double c_diff = 4.0;
    double ema_decay = 0.999;
    double ema_floor = 1e-3;
    bool l2_reg_enabled = true;
    double lambda_reg = 0.003;
    // loop
    int scene_batch = 4;
    int ray_batch = 256;
    int64_t outer_iterations = 2000;
    StepSchedule<int> inner_schedule{{{50, 16}, {INT64_MAX, 4}}};
    StepSchedule<double> lr_mult_schedule{{{INT64_MAX, 1.0}}};
    double lr_codes = 0.01;
    double lr_decoder = 0.001;
    double lr_denoiser = 1e-4;
    int64_t reset_codes_at = 0; // 0 disables the mean-reset trick
    // rendering
    int n_samples = 16;
    double near = 0.8;
    double far = 4.2;
    // run control
    bool deterministic = true;
    uint64_t seed = 0;
    bool cache_prior_grad = true;
    int64_t checkpoint_every = 0; // 0: only final
    int64_t log_every = 1;

    int64_t dim_x() const { return 3LL * channels * resolution * resolution; }

    void validate() const {
        if (resolution % 4 != 0)
            throw ConfigError(strcat_msg("train config: resolution ", resolution, " not divisible by 4"));
        if (channels < 1) throw ConfigError("train config: channels must be >= 1");
        if (scene_batch < 1 || ray_batch < 1) throw ConfigError("train config: batch sizes must be >= 1");
        if (n_samples < 2) throw ConfigError("train config: n_samples must be >= 2");
        if (!(near < far)) throw ConfigError("train config: near must be < far");
        if (outer_iterations < 0) throw ConfigError("train config: negative outer_iterations");
    }
};

struct StepLog {
    int64_t k_out = 0;
    double lambda_rend = 0, lambda_diff = 0;
    double loss_rend = 0, loss_diff = 0;
    double ema_norm = 0;
    double wall_seconds = 0;
};

struct TrainState {
    TrainConfig cfg;
    NoiseSchedule sched;
    std::vector<SceneCode> codes;     // one per train scene
    std::vector<AdamState> code_opt;  // one Adam state per code, persists across batches
    DecoderParams decoder;
    DenoiserParams denoiser;
    NamedAdam decoder_opt;
    NamedAdam denoiser_opt;
    WeightBalancer balancer;
    int64_t k_out = 0;
    Rng rng;

    // cached prior gradients (w.r.t. raw codes) for the current outer step
    std::vector<Tensor> cached_code_grads;
    std::vector<int> cached_batch;

    static TrainState init(const TrainConfig& cfg, int n_scenes) {
        cfg.validate();
        TrainState st;
        st.cfg = cfg;
        st.sched = make_linear_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
        Rng init_rng(cfg.seed ^ 0xA11CE5EEDULL);
        st.decoder = DecoderParams::init(cfg.channels, cfg.decoder_hidden, cfg.dir_bands, init_rng);
        st.denoiser = DenoiserParams::init(3 * cfg.channels, cfg.unet_base, cfg.temb_dim, init_rng);
        st.decoder_opt.lr = cfg.lr_decoder;
        st.denoiser_opt.lr = cfg.lr_denoiser;
        st.codes.reserve(size_t(n_scenes));
        st.code_opt.reserve(size_t(n_scenes));
        for (int i = 0; i < n_scenes; ++i) {
            st.codes.emplace_back(cfg.channels, cfg.resolution, cfg.bound_s); // raw zeros: mean init
            st.code_opt.emplace_back(st.codes.back().raw.shape(), real(cfg.lr_codes));
        }
        st.balancer.c_rend = cfg.c_rend;
        st.balancer.c_diff = cfg.c_diff;
        st.balancer.ema_decay = cfg.ema_decay;
        st.balancer.lambda_reg = cfg.lambda_reg;
        st.balancer.dim_x = cfg.dim_x();
        st.rng = Rng(cfg.seed);
        return st;
    }

    Tensor bounded_code(int scene) const {
        const SceneCode& c = codes[size_t(scene)];
        return cfg.tanh_enabled ? tanh_map(c.raw, c.bound_s) : Tensor(c.raw);
    }

    RenderOptions render_options() const {
        RenderOptions opt;
        opt.n_samples = cfg.n_samples;
        opt.deterministic = cfg.deterministic;
        opt.near = cfg.near;
        opt.far = cfg.far;
        return opt;
    }
};

namespace detail {

inline std::vector<int> sample_scene_batch(Rng& rng, int n_scenes, int batch) {
    std::vector<int> ids;
    if (batch >= n_scenes) {
        for (int i = 0; i < n_scenes; ++i) ids.push_back(i);
        return ids;
    }
    // rejection-sampled distinct ids, deterministic under the seeded rng
    std::vector<bool> used(size_t(n_scenes), false);
    while (int(ids.size()) < batch) {
        int id = rng.uniform_int(0, n_scenes - 1);
        if (!used[size_t(id)]) {
            used[size_t(id)] = true;
            ids.push_back(id);
        }
    }
    return ids;
}

inline std::vector<int64_t> sample_ray_indices(Rng& rng, int64_t n_rays, int count) {
    std::vector<int64_t> idx(static_cast<size_t>(count));
    for (auto& v : idx) v = int64_t(rng.uniform_int(0, int(n_rays - 1)));
    return idx;
}

} // namespace detail

// One outer iteration of the single-stage objective. Gradient flow:
//   diffusion tape:   lambda_diff * L_diff + L2   ->  g_phi, g_x^diff (cached)
//   K_in render tapes: lambda_rend * L_rend       ->  g_x^rend, codes stepped
//                                                     with g_x^rend + g_x^diff
//   last inner iteration: fresh pass on the same ray batch at the updated
//   codes -> g_psi, decoder stepped.
// With cache_prior_grad off, g_x^diff is recomputed at the current codes in
// every inner iteration and the denoiser update moves after the inner loop
// (the denoiser is untouched by rendering, so at K_in=1 both orderings give
// bitwise identical trajectories).
inline StepLog outer_step(TrainState& st, const std::vector<ObservationSet>& train_obs) {
    auto t_start = std::chrono::steady_clock::now();
    const TrainConfig& cfg = st.cfg;
    if (int(train_obs.size()) != int(st.codes.size()))
        throw ConfigError(strcat_msg("outer_step: ", train_obs.size(), " observation sets for ",
                                     st.codes.size(), " codes"));
    st.k_out += 1;
    const int k_in_total = cfg.inner_schedule.at(st.k_out);
    const double lr_mult = cfg.lr_mult_schedule.at(st.k_out);

    // (1) scene batch
    std::vector<int> batch = detail::sample_scene_batch(st.rng, int(st.codes.size()), cfg.scene_batch);

    if (!st.balancer.ema_initialized) {
        std::vector<double> norms;
        for (int id : batch) {
            Tensor b = st.bounded_code(id);
            norms.push_back(squared_frobenius(b));
        }
        st.balancer.ema_init(norms, cfg.ema_floor);
    }
    const double lambda_diff = st.balancer.lambda_diff();

    // one (t, eps) draw per scene in the batch
    std::vector<DiffusionDraw> draws;
    Shape stacked{3 * cfg.channels, cfg.resolution, cfg.resolution};
    for (size_t i = 0; i < batch.size(); ++i) draws.push_back(draw_diffusion_sample(st.rng, stacked, st.sched));

    StepLog log;
    log.k_out = st.k_out;
    log.lambda_diff = lambda_diff;

    // (2)-(4) diffusion gradients; denoiser step; prior gradient cache
    std::map<std::string, Tensor> deferred_phi_grads;
    auto diffusion_pass = [&](bool first) {
        Tape tape;
        std::vector<Tensor> bounded;
        for (int id : batch) bounded.push_back(st.bounded_code(id));
        Tensor l_diff = diffusion_loss(st.denoiser, bounded, draws, cfg.omega, st.sched);
        Tensor loss = l_diff * real(lambda_diff);
        if (cfg.l2_reg_enabled) loss = loss + l2_reg_term(bounded, cfg.lambda_reg, cfg.dim_x());
        tape.backward(loss);
        st.cached_code_grads.clear();
        for (int id : batch) st.cached_code_grads.push_back(tape.grad(st.codes[size_t(id)].raw));
        st.cached_batch = batch;
        if (first) {
            log.loss_diff = double(l_diff.item());
            if (cfg.cache_prior_grad) {
                st.denoiser_opt.step(st.denoiser, tape, lr_mult);
            } else {
                // denoiser step deferred past the inner loop; rendering never
                // touches these weights, so the K_in=1 trajectory is unchanged
                st.denoiser.for_each_param([&](const std::string& name, Tensor& t) {
                    deferred_phi_grads.emplace(name, tape.grad(t));
                });
            }
        }
    };

    const bool cache = cfg.cache_prior_grad;
    diffusion_pass(true);

    // (5)-(6) inner loop on codes, decoder stepped from the last ray batch
    RenderOptions opt = st.render_options();
    for (int k_in = 1; k_in <= k_in_total; ++k_in) {
        if (!cache && k_in > 1) diffusion_pass(false); // refresh at current codes

        std::vector<std::vector<int64_t>> ray_ids;
        std::vector<double> lambda_rends;
        for (int id : batch) {
            ray_ids.push_back(detail::sample_ray_indices(st.rng, train_obs[size_t(id)].n_rays(), cfg.ray_batch));
            lambda_rends.push_back(st.balancer.lambda_rend(double(train_obs[size_t(id)].n_views)));
        }
        uint64_t jitter = st.rng.next_u64();

        double weighted_rend = 0;
        {
            Tape tape;
            std::vector<SceneRayBatch> rbatch;
            for (size_t i = 0; i < batch.size(); ++i)
                rbatch.push_back(ray_batch_from(train_obs[size_t(batch[i])], st.bounded_code(batch[i]),
                                                ray_ids[i], lambda_rends[i]));
            Tensor loss = rendering_loss(rbatch, st.decoder, opt, jitter);
            tape.backward(loss);
            weighted_rend = double(loss.item());
            for (size_t i = 0; i < batch.size(); ++i) {
                int id = batch[i];
                Tensor g = tape.grad(st.codes[size_t(id)].raw);
                const Tensor& cached = st.cached_code_grads[i];
                real* gv = g.data().data();
                const real* cv = cached.data().data();
                for (int64_t j = 0; j < g.size(); ++j) gv[j] += cv[j];
                st.code_opt[size_t(id)].lr = real(cfg.lr_codes);
                st.code_opt[size_t(id)].lr_mult = real(lr_mult);
                adam_step(st.codes[size_t(id)].raw, g, st.code_opt[size_t(id)],
                          strcat_msg("code[", id, "]"));
            }
        }

        if (k_in == k_in_total) {
            // decoder gradient from the same ray batch at the updated codes
            Tape tape;
            std::vector<SceneRayBatch> rbatch;
            for (size_t i = 0; i < batch.size(); ++i) {
                Tensor frozen = st.bounded_code(batch[i]).clone(); // codes frozen for the psi pass
                rbatch.push_back(ray_batch_from(train_obs[size_t(batch[i])], frozen, ray_ids[i],
                                                lambda_rends[i]));
            }
            Tensor loss = rendering_loss(rbatch, st.decoder, opt, jitter);
            tape.backward(loss);
            st.decoder_opt.step(st.decoder, tape, lr_mult);

            double mean_lambda = 0;
            for (double l : lambda_rends) mean_lambda += l;
            mean_lambda /= double(lambda_rends.size());
            log.lambda_rend = mean_lambda;
            log.loss_rend = weighted_rend / mean_lambda;
        }
    }

    if (!cache) st.denoiser_opt.step_with(st.denoiser, deferred_phi_grads, lr_mult);

    // (7) EMA of the batch codes' squared Frobenius norms
    std::vector<double> norms;
    for (int id : batch) norms.push_back(squared_frobenius(st.bounded_code(id)));
    st.balancer.ema_update(norms);
    log.ema_norm = st.balancer.ema_norm;

    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return log;
}

// Replaces every raw code so its bounded image equals the elementwise mean
// of all scenes' bounded codes, and resets the code optimizer states. Used
// halfway through sparse-view training to escape per-scene geometry
// overfitting.
inline void reset_codes_to_mean(TrainState& st) {
    if (st.codes.empty()) throw ConfigError("reset_codes_to_mean: no codes");
    Tensor mean_bounded(st.codes[0].raw.shape());
    std::vector<double> acc(static_cast<size_t>(mean_bounded.size()));
    for (const SceneCode& c : st.codes) {
        Tensor b = st.cfg.tanh_enabled ? tanh_map(c.raw, c.bound_s) : c.raw;
        for (int64_t i = 0; i < b.size(); ++i) acc[size_t(i)] += double(b.data()[size_t(i)]);
    }
    for (int64_t i = 0; i < mean_bounded.size(); ++i)
        mean_bounded.data()[size_t(i)] = real(acc[size_t(i)] / double(st.codes.size()));
    for (size_t s = 0; s < st.codes.size(); ++s) {
        SceneCode& c = st.codes[s];
        for (int64_t i = 0; i < c.raw.size(); ++i) {
            real m = mean_bounded.data()[size_t(i)];
            c.raw.data()[size_t(i)] =
                st.cfg.tanh_enabled ? SceneCode::raw_from_bounded(m, c.bound_s) : m;
        }
        st.code_opt[s].reset();
    }
}

struct TrainHooks {
    std::function<void(TrainState&, const StepLog&)> on_log;
    std::function<void(TrainState&, bool /*final*/)> on_checkpoint;
};

// Runs the outer loop to cfg.outer_iterations with the step-function
// schedules, the optional halfway code reset, and periodic checkpoints.
inline void train(TrainState& st, const std::vector<ObservationSet>& train_obs,
                  const TrainHooks& hooks = {}) {
    const TrainConfig& cfg = st.cfg;
    cfg.validate();
    while (st.k_out < cfg.outer_iterations) {
        StepLog log = outer_step(st, train_obs);
        if (cfg.reset_codes_at > 0 && st.k_out == cfg.reset_codes_at) reset_codes_to_mean(st);
        if (hooks.on_log && cfg.log_every > 0 && (st.k_out % cfg.log_every == 0)) hooks.on_log(st, log);
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && (st.k_out % cfg.checkpoint_every == 0))
            hooks.on_checkpoint(st, false);
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(st, true);
}

} // namespace ssdnf
