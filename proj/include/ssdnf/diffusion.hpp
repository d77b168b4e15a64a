#pragma once

#include "rng.hpp"
#include "tensor.hpp"
#include "unet.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace ssdnf {

// Variance-preserving discrete noise schedule: alpha[t]^2 + sigma[t]^2 = 1
// for t in {0..T}, with alpha[0] = 1 and sigma[0] = 0 prepended.
struct NoiseSchedule {
    int steps = 0;                // T
    std::vector<double> alpha;    // size T+1
    std::vector<double> sigma;    // size T+1

    void check_t(int t, const char* op) const {
        if (t < 0 || t > steps)
            throw ConfigError(strcat_msg(op, ": timestep ", t, " outside schedule range [0,", steps, "]"));
    }
};

inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError(strcat_msg("make_linear_schedule: T must be >= 1, got ", T));
    if (!(0 < beta_start && beta_start < beta_end && beta_end < 1))
        throw ConfigError(strcat_msg("make_linear_schedule: need 0 < beta_start < beta_end < 1, got ",
                                     beta_start, ", ", beta_end));
    NoiseSchedule s;
    s.steps = T;
    s.alpha.resize(size_t(T) + 1);
    s.sigma.resize(size_t(T) + 1);
    s.alpha[0] = 1.0;
    s.sigma[0] = 0.0;
    double acum = 1.0;
    for (int t = 1; t <= T; ++t) {
        double beta = T == 1 ? beta_start
                             : beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
        acum *= 1.0 - beta;
        s.alpha[size_t(t)] = std::sqrt(acum);
        s.sigma[size_t(t)] = std::sqrt(1.0 - acum);
    }
    return s;
}

// Forward perturbation kernel: x_t = alpha[t] * x + sigma[t] * eps.
inline Tensor perturb(const Tensor& x, int t, const Tensor& eps, const NoiseSchedule& sched) {
    sched.check_t(t, "perturb");
    if (x.shape() != eps.shape())
        throw ShapeError(strcat_msg("perturb: eps shape ", shape_str(eps.shape()), " does not match x ",
                                    shape_str(x.shape())));
    return affine(x, real(sched.alpha[size_t(t)]), 0) + affine(eps, real(sched.sigma[size_t(t)]), 0);
}

// SNR-based loss weight (alpha / sigma)^(2 * omega). Undefined at t = 0
// where the noise level is zero.
inline double snr_weight(int t, double omega, const NoiseSchedule& sched) {
    sched.check_t(t, "snr_weight");
    double sg = sched.sigma[size_t(t)];
    if (sg <= 0) throw ConfigError("snr_weight: infinite SNR at t=0");
    return std::pow(sched.alpha[size_t(t)] / sg, 2.0 * omega);
}

// v-parameterization conversions for a batch of latents with per-entry
// timesteps. x_hat = alpha * x_t - sigma * v_hat; eps_hat is defined only
// when every sigma is positive.
struct DenoiseOutput {
    Tensor v_hat;
    Tensor x_hat;
    bool has_eps = false;
    Tensor eps_hat_storage;

    const Tensor& eps_hat() const {
        if (!has_eps) throw ConfigError("denoise: eps_hat requested at sigma = 0");
        return eps_hat_storage;
    }
};

namespace detail {

inline Tensor per_batch_const(std::span<const double> vals, int B) {
    Tensor t({B, 1, 1, 1});
    for (int i = 0; i < B; ++i) t.data()[size_t(i)] = real(vals[size_t(i)]);
    return t;
}

inline Tensor schedule_const(std::span<const int> ts, const std::vector<double>& table, int B) {
    Tensor t({B, 1, 1, 1});
    for (int i = 0; i < B; ++i) t.data()[size_t(i)] = real(table[size_t(ts[size_t(i)])]);
    return t;
}

} // namespace detail

// x_hat = alpha[t] * x_t - sigma[t] * v_hat, per batch entry.
inline Tensor vparam_x_hat(const Tensor& x_t, const Tensor& v_hat, std::span<const int> ts,
                           const NoiseSchedule& sched) {
    const int B = x_t.dim(0);
    for (int i = 0; i < B; ++i) sched.check_t(ts[size_t(i)], "vparam_x_hat");
    Tensor alpha_c = detail::schedule_const(ts, sched.alpha, B);
    Tensor sigma_c = detail::schedule_const(ts, sched.sigma, B);
    return alpha_c * x_t - sigma_c * v_hat;
}

// eps_hat = (x_t - alpha[t] * x_hat) / sigma[t]; requires sigma[t] > 0.
inline Tensor eps_from_x_hat(const Tensor& x_t, const Tensor& x_hat, std::span<const int> ts,
                             const NoiseSchedule& sched) {
    const int B = x_t.dim(0);
    std::vector<double> inv(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) {
        sched.check_t(ts[size_t(i)], "eps_from_x_hat");
        double sg = sched.sigma[size_t(ts[size_t(i)])];
        if (sg <= 0) throw ConfigError("eps_from_x_hat: sigma = 0 at the requested timestep");
        inv[size_t(i)] = 1.0 / sg;
    }
    Tensor alpha_c = detail::schedule_const(ts, sched.alpha, B);
    return (x_t - alpha_c * x_hat) * detail::per_batch_const(inv, B);
}

// Runs the denoiser and centralizes every v/x/eps conversion so trainer and
// sampler cannot drift apart. Differentiable w.r.t. both the network
// parameters and x_t.
inline DenoiseOutput denoise(DenoiserParams& net, const Tensor& x_t, std::span<const int> ts,
                             const NoiseSchedule& sched) {
    const int B = x_t.dim(0);
    bool all_sigma_pos = true;
    for (int i = 0; i < B; ++i) {
        sched.check_t(ts[size_t(i)], "denoise");
        if (ts[size_t(i)] < 1) throw ConfigError(strcat_msg("denoise: t must be >= 1, got ", ts[size_t(i)]));
        if (sched.sigma[size_t(ts[size_t(i)])] <= 0) all_sigma_pos = false;
    }
    DenoiseOutput out;
    out.v_hat = unet_forward(net, x_t, ts);
    out.x_hat = vparam_x_hat(x_t, out.v_hat, ts, sched);
    if (all_sigma_pos) {
        out.eps_hat_storage = eps_from_x_hat(x_t, out.x_hat, ts, sched);
        out.has_eps = true;
    }
    return out;
}

// Single-latent convenience wrapper: x_t is [C,R,R] (or [1,C,R,R]).
inline DenoiseOutput denoise_one(DenoiserParams& net, const Tensor& x_t, int t, const NoiseSchedule& sched) {
    Tensor batched = x_t.ndim() == 3
                         ? reshape(x_t, {1, x_t.dim(0), x_t.dim(1), x_t.dim(2)})
                         : x_t;
    int ts[1] = {t};
    return denoise(net, batched, ts, sched);
}

// One (t, eps) draw per scene per outer step.
struct DiffusionDraw {
    int t = 1;
    Tensor eps; // same shape as the stacked latent [3C, R, R]
};

inline DiffusionDraw draw_diffusion_sample(Rng& rng, const Shape& stacked_shape, const NoiseSchedule& sched) {
    DiffusionDraw d;
    d.t = rng.uniform_int(1, sched.steps);
    d.eps = randn(stacked_shape, rng);
    return d;
}

// Stacks a [3,C,R,R] triplane code into the denoiser's [3C,R,R] layout.
inline Tensor stack_code(const Tensor& code) {
    if (code.ndim() != 4 || code.dim(0) != 3)
        throw ShapeError(strcat_msg("stack_code: expected [3,C,R,R], got ", shape_str(code.shape())));
    return reshape(code, {3 * code.dim(1), code.dim(2), code.dim(3)});
}

// Simplified L2 denoising loss with SNR weighting, averaged over scenes:
//   E_i [ 1/2 w(t_i) || x_hat(x_i^(t_i), t_i) - x_i ||^2 ].
// Differentiable w.r.t. the denoiser parameters AND the codes.
inline Tensor diffusion_loss(DenoiserParams& net, const std::vector<Tensor>& bounded_codes,
                             const std::vector<DiffusionDraw>& draws, double omega,
                             const NoiseSchedule& sched) {
    if (bounded_codes.empty()) throw ConfigError("diffusion_loss: no codes");
    if (draws.size() != bounded_codes.size())
        throw ConfigError(strcat_msg("diffusion_loss: ", draws.size(), " draws for ",
                                     bounded_codes.size(), " codes"));
    const int B = int(bounded_codes.size());
    std::vector<Tensor> xs, xts;
    std::vector<int> ts;
    for (int i = 0; i < B; ++i) {
        Tensor x = stack_code(bounded_codes[size_t(i)]);
        Tensor x4 = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
        Tensor eps4 = reshape(draws[size_t(i)].eps, x4.shape());
        xs.push_back(x4);
        xts.push_back(perturb(x4, draws[size_t(i)].t, eps4, sched));
        ts.push_back(draws[size_t(i)].t);
    }
    Tensor x_all = B == 1 ? xs[0] : concat(xs, 0);
    Tensor xt_all = B == 1 ? xts[0] : concat(xts, 0);
    DenoiseOutput out = denoise(net, xt_all, ts, sched);
    Tensor diff = out.x_hat - x_all;
    Tensor per_scene = sum(reshape(square(diff), {B, int(diff.size() / B)}), 1); // [B]
    Tensor weights({B});
    for (int i = 0; i < B; ++i) weights.data()[size_t(i)] = real(0.5 * snr_weight(ts[size_t(i)], omega, sched));
    return mean(per_scene * weights);
}

} // namespace ssdnf
