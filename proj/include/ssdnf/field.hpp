#pragma once

#include "adam.hpp"
#include "camera.hpp"
#include "rng.hpp"
#include "tensor.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace ssdnf {

// ---- bounded scene codes ----------------------------------------------------

// s * tanh(raw): keeps every element of the latent strictly inside (-s, s)
// while optimization runs on the unbounded raw parameter. The saturated tail
// is nudged one ulp inside so the strict bound holds even where the float
// tanh rounds to exactly +-1.
inline Tensor tanh_map(const Tensor& raw, real s) {
    if (s <= 0) throw ConfigError(strcat_msg("tanh_map: bound must be positive, got ", s));
    const real inside = std::nextafter(s, real(0));
    return detail::unary_op(
        raw,
        [s, inside](real x) {
            real y = s * std::tanh(x);
            if (y >= s) return inside;
            if (y <= -s) return -inside;
            return y;
        },
        [s](real, real y) {
            real t = y / s;
            return s * (real(1) - t * t);
        });
}

// Per-scene triplane latent. `raw` is the optimized leaf; the bounded code
// used by renderer and denoiser is tanh_map(raw, s).
struct SceneCode {
    Tensor raw; // [3, C, R, R]
    real bound_s = 2;

    SceneCode() = default;
    SceneCode(int channels, int resolution, real s) : raw({3, channels, resolution, resolution}), bound_s(s) {
        raw.set_requires_grad();
    }

    int channels() const { return raw.dim(1); }
    int resolution() const { return raw.dim(2); }
    Tensor bounded() const { return tanh_map(raw, bound_s); }

    // raw value whose bounded image equals x (x strictly inside (-s, s)).
    static real raw_from_bounded(real x, real s) {
        double u = double(x) / double(s);
        const double lim = 1.0 - 1e-6;
        u = std::min(std::max(u, -lim), lim);
        return real(std::atanh(u));
    }
};

// ---- triplane feature lookup --------------------------------------------------

namespace detail {

// Plane-projected pixel coordinates for each position; align-corners mapping
// of [-1,1] onto [0, R-1].
inline Tensor plane_coords(std::span<const real> positions, int plane, int R) {
    int n = int(positions.size() / 3);
    Tensor coords({n, 2});
    real* c = coords.data().data();
    const real scale = real(0.5) * real(R - 1);
    for (int i = 0; i < n; ++i) {
        real x = positions[size_t(3 * i)], y = positions[size_t(3 * i) + 1], z = positions[size_t(3 * i) + 2];
        real u, v;
        switch (plane) {
        case 0: u = x; v = y; break; // XY
        case 1: u = x; v = z; break; // XZ
        default: u = y; v = z; break; // YZ
        }
        c[2 * i] = (u + 1) * scale;
        c[2 * i + 1] = (v + 1) * scale;
    }
    return coords;
}

} // namespace detail

// Bilinear lookup on the three planes at each position's projections, summed
// into one C-vector per position. positions: [P,3] in the [-1,1]^3 cube
// (clamped by the sampler's border policy otherwise).
inline Tensor triplane_features(const Tensor& code, const Tensor& positions) {
    if (code.ndim() != 4 || code.dim(0) != 3)
        throw ShapeError(strcat_msg("triplane_features: expected [3,C,R,R] code, got ", shape_str(code.shape())));
    if (positions.ndim() != 2 || positions.dim(1) != 3)
        throw ShapeError(strcat_msg("triplane_features: expected [P,3] positions, got ",
                                    shape_str(positions.shape())));
    const int C = code.dim(1), R = code.dim(2);
    Tensor feat;
    for (int plane = 0; plane < 3; ++plane) {
        Tensor map = reshape(slice(code, 0, plane, 1), {C, R, R});
        Tensor coords = detail::plane_coords(positions.data(), plane, R);
        Tensor f = grid_sample(map, coords);
        feat = plane == 0 ? f : feat + f;
    }
    return feat;
}

// ---- shared decoder -----------------------------------------------------------

// View-direction frequency encoding: raw components plus sin/cos at `bands`
// octave frequencies.
inline int dir_encoding_dim(int bands) { return 3 + 6 * bands; }

inline void encode_dir(const Vec3& d, int bands, real* out) {
    const double c[3] = {d.x, d.y, d.z};
    int k = 0;
    for (int i = 0; i < 3; ++i) out[k++] = real(c[i]);
    double freq = 1.0;
    for (int b = 0; b < bands; ++b) {
        for (int i = 0; i < 3; ++i) {
            out[k++] = real(std::sin(freq * c[i]));
            out[k++] = real(std::cos(freq * c[i]));
        }
        freq *= 2.0;
    }
}

// MLP mapping triplane features (+ encoded view direction) to density and
// color. Density is direction-independent; the direction joins only the
// color branch.
struct DecoderParams {
    int feat_dim = 4;
    int hidden = 64;
    int dir_bands = 4;
    Tensor w1, b1;   // feat -> hidden
    Tensor w2, b2;   // hidden -> hidden
    Tensor wd, bd;   // hidden -> density
    Tensor wc1, bc1; // hidden + dir encoding -> hidden
    Tensor wc2, bc2; // hidden -> rgb

    static DecoderParams init(int feat_dim, int hidden, int dir_bands, Rng& rng) {
        DecoderParams p;
        p.feat_dim = feat_dim;
        p.hidden = hidden;
        p.dir_bands = dir_bands;
        int e = dir_encoding_dim(dir_bands);
        auto mk = [&](int in, int out) { return randn({in, out}, rng, real(1.0 / std::sqrt(double(in)))); };
        p.w1 = mk(feat_dim, hidden);
        p.b1 = Tensor::zeros({hidden});
        p.w2 = mk(hidden, hidden);
        p.b2 = Tensor::zeros({hidden});
        p.wd = mk(hidden, 1);
        p.bd = Tensor::zeros({1});
        p.wc1 = mk(hidden + e, hidden);
        p.bc1 = Tensor::zeros({hidden});
        p.wc2 = mk(hidden, 3);
        p.bc2 = Tensor::zeros({3});
        p.set_requires_grad(true);
        return p;
    }

    void set_requires_grad(bool b) {
        for_each_param([b](const std::string&, Tensor& t) { t.set_requires_grad(b); });
    }

    template <class F>
    void for_each_param(F f) {
        f("decoder/w1", w1);
        f("decoder/b1", b1);
        f("decoder/w2", w2);
        f("decoder/b2", b2);
        f("decoder/wd", wd);
        f("decoder/bd", bd);
        f("decoder/wc1", wc1);
        f("decoder/bc1", bc1);
        f("decoder/wc2", wc2);
        f("decoder/bc2", bc2);
    }

    int64_t param_count() {
        int64_t n = 0;
        for_each_param([&n](const std::string&, Tensor& t) { n += t.size(); });
        return n;
    }
};

struct DecodeOut {
    Tensor density; // [P,1], softplus, nonnegative
    Tensor rgb;     // [P,3], sigmoid, in (0,1)
};

inline DecodeOut decode(DecoderParams& dec, const Tensor& features, const Tensor& dir_encoding) {
    Tensor h = silu(matmul(features, dec.w1) + dec.b1);
    h = silu(matmul(h, dec.w2) + dec.b2);
    Tensor density = softplus(matmul(h, dec.wd) + dec.bd);
    Tensor hc = silu(matmul(concat({h, dir_encoding}, 1), dec.wc1) + dec.bc1);
    Tensor rgb = sigmoid(matmul(hc, dec.wc2) + dec.bc2);
    return {density, rgb};
}

// ---- volume rendering -----------------------------------------------------------

struct RenderOptions {
    int n_samples = 16;
    bool deterministic = false; // fixed per-segment midpoints
    Vec3 background{1, 1, 1};
    double near = 0.8;
    double far = 4.2;
};

// One scene's contribution to a render/loss batch. `bounded_code` must be a
// tape expression of the scene's raw code when gradients are wanted.
struct SceneRayBatch {
    Tensor bounded_code;
    std::vector<Ray> rays;
    Tensor targets;    // [N,3] ground-truth colors; may be empty for pure rendering
    double loss_scale = 1; // N_ray / |B_ray| rescale
    double weight = 1;     // per-scene external weight (lambda_rend)
};

namespace detail {

struct SamplePlan {
    Tensor positions; // [N*S, 3]
    Tensor dir_enc;   // [N*S, E]
    Tensor deltas;    // [N, S] segment lengths (0 where the ray misses)
};

// Stratified segment sampling inside the unit cube intersection. Sample k of
// ray n sits in segment k at a jittered (or midpoint) offset; the per-ray
// stream is a pure function of (seed, ray index, sample).
inline SamplePlan plan_samples(std::span<const Ray> rays, const RenderOptions& opt, int dir_bands,
                               uint64_t jitter_seed) {
    const int N = int(rays.size());
    const int S = opt.n_samples;
    const int E = dir_encoding_dim(dir_bands);
    SamplePlan plan{Tensor({std::max(N * S, 1), 3}), Tensor({std::max(N * S, 1), E}),
                    Tensor({std::max(N, 1), S})};
    real* pos = plan.positions.data().data();
    real* de = plan.dir_enc.data().data();
    real* dl = plan.deltas.data().data();
    std::vector<real> enc(static_cast<size_t>(E));
    for (int n = 0; n < N; ++n) {
        const Ray& r = rays[size_t(n)];
        if (!(r.near < r.far)) throw ConfigError(strcat_msg("render: ray near ", r.near, " >= far ", r.far));
        encode_dir(r.dir, dir_bands, enc.data());
        double t0, t1;
        bool hit = clip_to_unit_cube(r, t0, t1);
        double seg = hit ? (t1 - t0) / double(S) : 0.0;
        for (int k = 0; k < S; ++k) {
            double u = opt.deterministic ? 0.5 : hash_uniform(jitter_seed, uint64_t(n), uint64_t(k));
            double t = hit ? t0 + (double(k) + u) * seg : r.near;
            Vec3 p = r.origin + r.dir * t;
            real* prow = pos + (int64_t(n) * S + k) * 3;
            prow[0] = real(p.x);
            prow[1] = real(p.y);
            prow[2] = real(p.z);
            real* erow = de + (int64_t(n) * S + k) * E;
            for (int i = 0; i < E; ++i) erow[i] = enc[size_t(i)];
            dl[int64_t(n) * S + k] = real(seg);
        }
    }
    return plan;
}

} // namespace detail

// Quadrature compositing: w_k = T_k (1 - exp(-density_k * delta_k)) with
// T_k the transmittance of preceding segments; leftover transmittance goes
// to the background color.
inline Tensor composite(const Tensor& density, const Tensor& rgb, const Tensor& deltas, const Vec3& bg) {
    const int N = deltas.dim(0), S = deltas.dim(1);
    Tensor a = reshape(density, {N, S}) * deltas;
    Tensor transmittance = exp(-cumsum_exclusive(a, 1));
    Tensor alpha = real(1) - exp(-a);
    Tensor w = transmittance * alpha; // [N,S]
    Tensor wsum = sum(w, 1);          // [N]
    Tensor color = sum(reshape(w, {N, S, 1}) * reshape(rgb, {N, S, 3}), 1); // [N,3]
    Tensor bg_t = Tensor::from({3}, {real(bg.x), real(bg.y), real(bg.z)});
    return color + reshape(real(1) - wsum, {N, 1}) * bg_t;
}

// Renders every scene's rays through the shared decoder in one fused pass;
// returns one [N_i,3] color tensor per scene.
inline std::vector<Tensor> render_scenes(std::vector<SceneRayBatch>& batch, DecoderParams& dec,
                                         const RenderOptions& opt, uint64_t jitter_seed) {
    if (batch.empty()) throw ConfigError("render_scenes: empty batch");
    if (opt.n_samples < 2) throw ConfigError(strcat_msg("render: n_samples must be >= 2, got ", opt.n_samples));
    std::vector<Tensor> feats, dirs;
    std::vector<Tensor> deltas;
    std::vector<int> counts;
    for (size_t i = 0; i < batch.size(); ++i) {
        auto plan = detail::plan_samples(batch[i].rays, opt, dec.dir_bands, jitter_seed + i * 0x9e37ULL);
        feats.push_back(triplane_features(batch[i].bounded_code, plan.positions));
        dirs.push_back(plan.dir_enc);
        deltas.push_back(plan.deltas);
        counts.push_back(int(batch[i].rays.size()));
    }
    Tensor features = feats.size() == 1 ? feats[0] : concat(feats, 0);
    Tensor dir_enc = dirs.size() == 1 ? dirs[0] : concat(dirs, 0);
    Tensor delta_all = deltas.size() == 1 ? deltas[0] : concat(deltas, 0);
    DecodeOut out = decode(dec, features, dir_enc);
    Tensor colors = composite(out.density, out.rgb, delta_all, opt.background);
    std::vector<Tensor> per_scene;
    int off = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
        per_scene.push_back(counts.size() == 1 ? colors : slice(colors, 0, off, counts[i]));
        off += counts[i];
    }
    return per_scene;
}

// Single-ray convenience wrapper.
inline Vec3 render_ray(const Tensor& bounded_code, DecoderParams& dec, const Ray& ray,
                       const RenderOptions& opt, uint64_t jitter_seed = 0) {
    std::vector<SceneRayBatch> batch(1);
    batch[0].bounded_code = bounded_code;
    batch[0].rays = {ray};
    Tensor rgb = render_scenes(batch, dec, opt, jitter_seed)[0];
    return {double(rgb.data()[0]), double(rgb.data()[1]), double(rgb.data()[2])};
}

// Batch-rescaled L2 rendering loss, averaged over scenes:
//   E_i [ weight_i * (N_ray_i / |B_ray|) * sum_j 1/2 || y_gt - y ||^2 ].
// With the full observation set as the batch the rescale factor is 1 and the
// expression reduces to the plain multi-scene rendering loss.
inline Tensor rendering_loss(std::vector<SceneRayBatch>& batch, DecoderParams& dec,
                             const RenderOptions& opt, uint64_t jitter_seed) {
    std::vector<Tensor> colors = render_scenes(batch, dec, opt, jitter_seed);
    Tensor total;
    for (size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].targets.size() != colors[i].size())
            throw ShapeError(strcat_msg("rendering_loss: targets ", shape_str(batch[i].targets.shape()),
                                        " do not match rendered ", shape_str(colors[i].shape())));
        Tensor err = colors[i] - batch[i].targets;
        Tensor term = sum(square(err)) * real(0.5 * batch[i].loss_scale * batch[i].weight);
        total = i == 0 ? term : total + term;
    }
    return total * (real(1) / real(batch.size()));
}

} // namespace ssdnf
