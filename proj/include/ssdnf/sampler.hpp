#pragma once

#include "diffusion.hpp"
#include "field.hpp"
#include "observations.hpp"
#include "trainer.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace ssdnf {

// Test-time machinery: deterministic DDIM predictor, Langevin corrector,
// reconstruction guidance computed through the denoiser, and post-sampling
// guidance-finetuning of the latent code.

struct SampleConfig {
    int ddim_steps = 50;
    int langevin_inner_iterations = 0;
    double langevin_delta = 0.4;
    double guidance_scale = 0; // lambda_gd
    double omega = 0.5;
    int guidance_ray_batch = 256;
    // finetune block (Eq. of the combined code objective, frozen networks)
    int ft_outer = 25;
    int ft_inner = 4;
    double ft_c_diff = 1.0; // c'_diff, lower than the training-time constant
    double ft_lr = 0.005;
    double ft_lr_decay = 0.998; // per inner step: decay^(k_out*K_in + k_in)
    int ft_ray_batch = 256;
    // shared weighting constants
    double c_rend = 40.0 / 16384.0;
    double lambda_reg = 0.003;
    bool l2_reg_enabled = true;
    double ema_floor = 1e-3;
    uint64_t seed = 0;

    void validate() const {
        if (ddim_steps < 1) throw ConfigError("sample config: ddim_steps must be >= 1");
        if (langevin_delta < 0) throw ConfigError("sample config: langevin step size must be >= 0");
        if (guidance_scale < 0) throw ConfigError("sample config: guidance scale must be >= 0");
        if (ft_outer < 0 || ft_inner < 0) throw ConfigError("sample config: negative finetune iterations");
    }
};

namespace detail {

template <class Params>
struct FreezeScope {
    Params& p;
    explicit FreezeScope(Params& params) : p(params) { p.set_requires_grad(false); }
    ~FreezeScope() { p.set_requires_grad(true); }
};

} // namespace detail

// Deterministic (eta = 0) DDIM update: x_{t_prev} = alpha_prev x_hat +
// sigma_prev eps_hat. Stepping to t_prev = 0 returns x_hat exactly.
inline Tensor ddim_step(const Tensor& x_hat, const Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& sched) {
    sched.check_t(t, "ddim_step");
    sched.check_t(t_prev, "ddim_step");
    if (t_prev >= t)
        throw ConfigError(strcat_msg("ddim_step: t_prev ", t_prev, " must be below t ", t));
    if (t_prev == 0) return x_hat.clone();
    return affine(x_hat, real(sched.alpha[size_t(t_prev)]), 0) +
           affine(eps_hat, real(sched.sigma[size_t(t_prev)]), 0);
}

// Langevin correction x <- x - delta/2 sigma eps_hat + sqrt(delta) sigma eps
// with fresh eps ~ N(0, I). delta = 0 is the identity and consumes no
// randomness.
inline Tensor langevin_correct(const Tensor& x_t, int t, double delta, const Tensor& eps_hat, Rng& rng,
                               const NoiseSchedule& sched) {
    sched.check_t(t, "langevin_correct");
    if (delta < 0) throw ConfigError("langevin_correct: delta must be >= 0");
    if (delta == 0) return x_t.clone();
    double sg = sched.sigma[size_t(t)];
    Tensor eps = randn(x_t.shape(), rng);
    Tensor out = x_t.clone();
    real* o = out.data().data();
    const real* eh = eps_hat.data().data();
    const real* e = eps.data().data();
    const real c1 = real(0.5 * delta * sg);
    const real c2 = real(std::sqrt(delta) * sg);
    for (int64_t i = 0; i < out.size(); ++i) o[i] += -c1 * eh[i] + c2 * e[i];
    return out;
}

// Reconstruction-guidance gradient w.r.t. the noisy latent: the SNR-weighted
// rendering loss of the denoised code against a sampled observation batch,
// back-propagated through the denoiser's forward pass. The batch is treated
// as if it were the full observation set, so the rendering weight uses the
// batch-effective view count N_v * |B_ray| / N_ray.
inline Tensor guidance_grad(DenoiserParams& denoiser, DecoderParams& decoder, const Tensor& x_t_flat,
                            int t, int code_channels, const ObservationSet& obs,
                            const std::vector<int64_t>& ray_ids, const SampleConfig& cfg,
                            const NoiseSchedule& sched, const RenderOptions& opt, uint64_t jitter) {
    if (t < 1) throw ConfigError("guidance_grad: t must be >= 1");
    sched.check_t(t, "guidance_grad");
    if (ray_ids.empty()) throw ConfigError("guidance_grad: empty ray batch");
    double n_v_eff = double(obs.n_views) * double(ray_ids.size()) / double(obs.n_rays());
    WeightBalancer wb;
    wb.c_rend = cfg.c_rend;
    double lambda_b = wb.lambda_rend(n_v_eff);
    double snr_w = snr_weight(t, cfg.omega, sched);

    detail::FreezeScope<DenoiserParams> freeze_phi(denoiser);
    detail::FreezeScope<DecoderParams> freeze_psi(decoder);

    Tensor x_t = x_t_flat.clone();
    x_t.set_requires_grad();
    Tape tape;
    int R = x_t.dim(1);
    Tensor x4 = reshape(x_t, {1, x_t.dim(0), R, x_t.dim(2)});
    int ts[1] = {t};
    DenoiseOutput den = denoise(denoiser, x4, ts, sched);
    Tensor code = reshape(den.x_hat, {3, code_channels, R, x_t.dim(2)});

    std::vector<SceneRayBatch> rb = {ray_batch_from(obs, code, ray_ids, 1.0)};
    rb[0].loss_scale = 1.0; // the batch stands in for the full set: plain sum
    Tensor loss = rendering_loss(rb, decoder, opt, jitter) * real(lambda_b * snr_w);
    tape.backward(loss);
    return tape.grad(x_t);
}

// Guidance correction of the denoised output:
//   x_hat <- x_hat - lambda_gd * sigma_t^2 / alpha_t * g.
inline Tensor guided_denoise_correction(const Tensor& x_hat, const Tensor& g, int t, double lambda_gd,
                                        const NoiseSchedule& sched) {
    sched.check_t(t, "guided_denoise");
    double a = sched.alpha[size_t(t)];
    if (a <= 0) throw ConfigError("guided_denoise: alpha = 0 at the requested timestep");
    double sg = sched.sigma[size_t(t)];
    Tensor out = x_hat.clone();
    const real scale = real(lambda_gd * sg * sg / a);
    const real* gv = g.data().data();
    real* o = out.data().data();
    for (int64_t i = 0; i < out.size(); ++i) o[i] -= scale * gv[i];
    return out;
}

// Evenly spaced descending timestep grid over {1..T}; consecutive entries
// form the (t -> t_prev) predictor pairs, ending at 0.
inline std::vector<int> ddim_timesteps(int T, int steps) {
    steps = std::min(steps, T);
    std::vector<int> ts;
    int prev = T + 1;
    for (int i = 0; i < steps; ++i) {
        int t = int(std::lround(double(T) * double(steps - i) / double(steps)));
        t = std::max(1, std::min(t, prev - 1));
        ts.push_back(t);
        prev = t;
    }
    ts.push_back(0);
    return ts;
}

namespace detail {

// Shared predictor-corrector trajectory. Guidance is applied to every
// denoising output, including the ones computed inside Langevin corrections,
// whenever lambda_gd > 0 and observations are present. With guidance off the
// random stream is identical to unconditional sampling.
inline Tensor run_sampler(DenoiserParams& denoiser, DecoderParams* decoder, const ObservationSet* obs,
                          int code_channels, int resolution, const SampleConfig& cfg,
                          const NoiseSchedule& sched, const RenderOptions& opt, Rng& rng) {
    cfg.validate();
    const bool guided = cfg.guidance_scale > 0 && obs != nullptr;
    if (guided && decoder == nullptr) throw ConfigError("sampler: guidance requires a decoder");
    Shape flat{3 * code_channels, resolution, resolution};
    Tensor x = randn(flat, rng);

    auto guided_x_hat = [&](const Tensor& x_cur, int t) {
        int ts[1] = {t};
        Tensor x4 = reshape(x_cur, {1, flat[0], flat[1], flat[2]});
        DenoiseOutput den = denoise(denoiser, x4, ts, sched);
        Tensor x_hat = reshape(den.x_hat, flat);
        if (guided) {
            std::vector<int64_t> ray_ids(size_t(std::min<int64_t>(cfg.guidance_ray_batch, obs->n_rays())));
            for (auto& id : ray_ids) id = int64_t(rng.uniform_int(0, int(obs->n_rays() - 1)));
            uint64_t jitter = rng.next_u64();
            Tensor g = guidance_grad(denoiser, *decoder, x_cur, t, code_channels, *obs, ray_ids, cfg,
                                     sched, opt, jitter);
            x_hat = guided_denoise_correction(x_hat, g, t, cfg.guidance_scale, sched);
        }
        return x_hat;
    };

    std::vector<int> grid = ddim_timesteps(sched.steps, cfg.ddim_steps);
    for (size_t i = 0; i + 1 < grid.size(); ++i) {
        int t = grid[i], t_prev = grid[i + 1];
        Tensor x_hat = guided_x_hat(x, t);
        int ts[1] = {t};
        Tensor eps_hat =
            eps_from_x_hat(reshape(x, {1, flat[0], flat[1], flat[2]}),
                           reshape(x_hat, {1, flat[0], flat[1], flat[2]}), ts, sched);
        x = ddim_step(x_hat, reshape(eps_hat, flat), t, t_prev, sched);
        if (t_prev > 0 && cfg.langevin_inner_iterations > 0 && cfg.langevin_delta > 0) {
            for (int l = 0; l < cfg.langevin_inner_iterations; ++l) {
                Tensor xh = guided_x_hat(x, t_prev);
                int tsp[1] = {t_prev};
                Tensor eh = eps_from_x_hat(reshape(x, {1, flat[0], flat[1], flat[2]}),
                                           reshape(xh, {1, flat[0], flat[1], flat[2]}), tsp, sched);
                x = langevin_correct(x, t_prev, cfg.langevin_delta, reshape(eh, flat), rng, sched);
            }
        }
    }
    return x;
}

} // namespace detail

// Hard clip into [-s, s]; applied to the final denoised latent.
inline Tensor clip_code(const Tensor& x, real s) {
    Tensor out = x.clone();
    for (auto& v : out.data()) v = std::min(std::max(v, -s), s);
    return out;
}

// Unconditional ancestral sampling with the deterministic DDIM predictor
// (optional Langevin corrections); returns bounded [3,C,R,R] codes.
inline std::vector<Tensor> sample_unconditional(DenoiserParams& denoiser, int code_channels,
                                                int resolution, real bound_s, int n,
                                                const SampleConfig& cfg, const NoiseSchedule& sched,
                                                Rng& rng) {
    RenderOptions opt;
    std::vector<Tensor> codes;
    for (int i = 0; i < n; ++i) {
        Tensor flat = detail::run_sampler(denoiser, nullptr, nullptr, code_channels, resolution, cfg,
                                          sched, opt, rng);
        codes.push_back(reshape(clip_code(flat, bound_s), {3, code_channels, resolution, resolution}));
    }
    return codes;
}

// Guidance-finetuning: minimizes
//   lambda_rend L_rend(x) + lambda'_diff L_diff(x) (+ L2 term)
// over the raw code only, with the networks frozen and the trainer's cached
// prior gradient structure. The learning rate decays per inner step.
inline Tensor finetune(const Tensor& bounded_code, const ObservationSet& obs, DenoiserParams& denoiser,
                       DecoderParams& decoder, real bound_s, bool tanh_enabled, const SampleConfig& cfg,
                       const NoiseSchedule& sched, const RenderOptions& opt, Rng& rng) {
    cfg.validate();
    if (cfg.ft_outer == 0 || cfg.ft_inner == 0) return bounded_code.clone();
    detail::FreezeScope<DenoiserParams> freeze_phi(denoiser);
    detail::FreezeScope<DecoderParams> freeze_psi(decoder);

    const int C = bounded_code.dim(1), R = bounded_code.dim(2);
    Tensor raw({3, C, R, R});
    for (int64_t i = 0; i < raw.size(); ++i) {
        real b = bounded_code.data()[size_t(i)];
        raw.data()[size_t(i)] = tanh_enabled ? SceneCode::raw_from_bounded(b, bound_s) : b;
    }
    raw.set_requires_grad();
    AdamState adam(raw.shape(), real(cfg.ft_lr));

    WeightBalancer wb;
    wb.c_rend = cfg.c_rend;
    wb.c_diff = cfg.ft_c_diff;
    wb.lambda_reg = cfg.lambda_reg;
    wb.dim_x = 3LL * C * R * R;
    double lambda_rend = wb.lambda_rend(double(obs.n_views));

    auto bounded = [&]() { return tanh_enabled ? tanh_map(raw, bound_s) : Tensor(raw); };
    {
        double n0 = squared_frobenius(bounded_code);
        std::vector<double> init = {n0};
        wb.ema_init(init, cfg.ema_floor);
    }

    for (int k_out = 0; k_out < cfg.ft_outer; ++k_out) {
        double lambda_diff = wb.lambda_diff();
        DiffusionDraw draw = draw_diffusion_sample(rng, {3 * C, R, R}, sched);
        Tensor cached;
        {
            Tape tape;
            std::vector<Tensor> b = {bounded()};
            Tensor loss = diffusion_loss(denoiser, b, {draw}, cfg.omega, sched) * real(lambda_diff);
            if (cfg.l2_reg_enabled) loss = loss + l2_reg_term(b, cfg.lambda_reg, wb.dim_x);
            tape.backward(loss);
            cached = tape.grad(raw);
        }
        for (int k_in = 1; k_in <= cfg.ft_inner; ++k_in) {
            std::vector<int64_t> ray_ids(size_t(std::min<int64_t>(cfg.ft_ray_batch, obs.n_rays())));
            for (auto& id : ray_ids) id = int64_t(rng.uniform_int(0, int(obs.n_rays() - 1)));
            uint64_t jitter = rng.next_u64();
            Tape tape;
            std::vector<SceneRayBatch> rb = {ray_batch_from(obs, bounded(), ray_ids, lambda_rend)};
            Tensor loss = rendering_loss(rb, decoder, opt, jitter);
            tape.backward(loss);
            Tensor g = tape.grad(raw);
            real* gv = g.data().data();
            const real* cv = cached.data().data();
            for (int64_t i = 0; i < g.size(); ++i) gv[i] += cv[i];
            adam.lr_mult = real(std::pow(cfg.ft_lr_decay, double(k_out) * cfg.ft_inner + double(k_in)));
            adam_step(raw, g, adam, "finetune_code");
        }
        std::vector<double> norms = {squared_frobenius(bounded())};
        wb.ema_update(norms);
    }
    return bounded().clone();
}

// Image-guided reconstruction: guided predictor-corrector sampling followed
// by guidance-finetuning. Networks are frozen throughout.
inline Tensor reconstruct(const ObservationSet& obs, DenoiserParams& denoiser, DecoderParams& decoder,
                          int code_channels, int resolution, real bound_s, bool tanh_enabled,
                          const SampleConfig& cfg, const NoiseSchedule& sched, const RenderOptions& opt,
                          Rng& rng) {
    cfg.validate();
    Tensor flat = detail::run_sampler(denoiser, &decoder, &obs, code_channels, resolution, cfg, sched,
                                      opt, rng);
    Tensor code = reshape(clip_code(flat, bound_s), {3, code_channels, resolution, resolution});
    return finetune(code, obs, denoiser, decoder, bound_s, tanh_enabled, cfg, sched, opt, rng);
}

// Spherical linear interpolation on flattened latents. Parallel endpoints
// fall back to linear interpolation; antipodal endpoints are rejected.
inline Tensor slerp(const Tensor& x0, const Tensor& x1, double u) {
    if (x0.shape() != x1.shape())
        throw ShapeError(strcat_msg("slerp: shape mismatch ", shape_str(x0.shape()), " vs ",
                                    shape_str(x1.shape())));
    double n0 = std::sqrt(squared_frobenius(x0));
    double n1 = std::sqrt(squared_frobenius(x1));
    if (n0 == 0 || n1 == 0) throw ConfigError("slerp: endpoints must be nonzero");
    double dot = 0;
    for (int64_t i = 0; i < x0.size(); ++i)
        dot += double(x0.data()[size_t(i)]) * double(x1.data()[size_t(i)]);
    double c = std::min(1.0, std::max(-1.0, dot / (n0 * n1)));
    double theta = std::acos(c);
    Tensor out(x0.shape());
    if (theta < 1e-7) { // parallel: linear interpolation
        for (int64_t i = 0; i < out.size(); ++i)
            out.data()[size_t(i)] =
                real((1.0 - u) * double(x0.data()[size_t(i)]) + u * double(x1.data()[size_t(i)]));
        return out;
    }
    if (kPi - theta < 1e-7)
        throw ConfigError("slerp: antipodal endpoints, the great-circle path is undefined");
    double s = std::sin(theta);
    double w0 = std::sin((1.0 - u) * theta) / s;
    double w1 = std::sin(u * theta) / s;
    for (int64_t i = 0; i < out.size(); ++i)
        out.data()[size_t(i)] =
            real(w0 * double(x0.data()[size_t(i)]) + w1 * double(x1.data()[size_t(i)]));
    return out;
}

// DDIM trajectory from a provided initial noise (used for latent
// interpolation): fully deterministic, no Langevin, no guidance.
inline Tensor sample_from_noise(DenoiserParams& denoiser, const Tensor& x_T, real bound_s,
                                const SampleConfig& cfg, const NoiseSchedule& sched) {
    Tensor x = x_T.clone();
    Shape flat = x.shape();
    std::vector<int> grid = ddim_timesteps(sched.steps, cfg.ddim_steps);
    for (size_t i = 0; i + 1 < grid.size(); ++i) {
        int t = grid[i], t_prev = grid[i + 1];
        int ts[1] = {t};
        Tensor x4 = reshape(x, {1, flat[0], flat[1], flat[2]});
        DenoiseOutput den = denoise(denoiser, x4, ts, sched);
        Tensor eps_hat = eps_from_x_hat(x4, den.x_hat, ts, sched);
        x = ddim_step(reshape(den.x_hat, flat), reshape(eps_hat, flat), t, t_prev, sched);
    }
    return clip_code(x, bound_s);
}

} // namespace ssdnf
