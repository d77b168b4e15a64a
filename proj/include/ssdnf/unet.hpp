#pragma once

#include "rng.hpp"
#include "tensor.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace ssdnf {

// Small denoising U-Net over stacked triplane channels: two resolution
// levels (one stride-2 downsample, mirrored nearest-upsample with skip
// concatenation), residual blocks with an additive time embedding, no
// attention or normalization at this scale.

struct ResBlockParams {
    int in_ch = 0, out_ch = 0;
    Tensor conv1_w, conv1_b;
    Tensor conv2_w, conv2_b;
    Tensor temb_w, temb_b;
    Tensor skip_w, skip_b; // 1x1 projection, present only when in_ch != out_ch

    static ResBlockParams init(int in_ch, int out_ch, int temb_dim, Rng& rng) {
        ResBlockParams p;
        p.in_ch = in_ch;
        p.out_ch = out_ch;
        auto conv = [&](int ci, int co, int k) {
            return randn({co, ci, k, k}, rng, real(1.0 / std::sqrt(double(ci * k * k))));
        };
        p.conv1_w = conv(in_ch, out_ch, 3);
        p.conv1_b = Tensor::zeros({out_ch});
        p.conv2_w = conv(out_ch, out_ch, 3);
        p.conv2_b = Tensor::zeros({out_ch});
        p.temb_w = randn({temb_dim, out_ch}, rng, real(1.0 / std::sqrt(double(temb_dim))));
        p.temb_b = Tensor::zeros({out_ch});
        if (in_ch != out_ch) {
            p.skip_w = conv(in_ch, out_ch, 1);
            p.skip_b = Tensor::zeros({out_ch});
        }
        return p;
    }

    template <class F>
    void for_each_param(const std::string& prefix, F f) {
        f(prefix + "/conv1_w", conv1_w);
        f(prefix + "/conv1_b", conv1_b);
        f(prefix + "/conv2_w", conv2_w);
        f(prefix + "/conv2_b", conv2_b);
        f(prefix + "/temb_w", temb_w);
        f(prefix + "/temb_b", temb_b);
        if (!skip_w.empty()) {
            f(prefix + "/skip_w", skip_w);
            f(prefix + "/skip_b", skip_b);
        }
    }

    Tensor forward(const Tensor& x, const Tensor& temb) {
        Tensor h = conv2d(silu(x), conv1_w, conv1_b, 1, 1);
        Tensor shift = matmul(temb, temb_w) + temb_b; // [B, out_ch]
        h = h + reshape(shift, {shift.dim(0), out_ch, 1, 1});
        h = conv2d(silu(h), conv2_w, conv2_b, 1, 1);
        Tensor skip = skip_w.empty() ? x : conv2d(x, skip_w, skip_b, 1, 0);
        return h + skip;
    }
};

struct DenoiserParams {
    int channels = 12; // 3*C stacked triplane channels
    int base = 32;
    int temb_dim = 64;
    Tensor temb_w1, temb_b1, temb_w2, temb_b2;
    Tensor in_w, in_b;
    ResBlockParams enc0a, enc0b; // full resolution, base channels
    Tensor down_w, down_b;       // stride-2, base -> 2*base
    ResBlockParams enc1a, enc1b; // half resolution
    ResBlockParams mid;
    Tensor up_w, up_b; // after nearest upsample, 2*base -> base
    ResBlockParams dec0a, dec0b;
    Tensor out_w, out_b; // zero-initialized: the fresh net predicts v = 0

    static DenoiserParams init(int channels, int base, int temb_dim, Rng& rng) {
        DenoiserParams p;
        p.channels = channels;
        p.base = base;
        p.temb_dim = temb_dim;
        auto conv = [&](int ci, int co, int k) {
            return randn({co, ci, k, k}, rng, real(1.0 / std::sqrt(double(ci * k * k))));
        };
        p.temb_w1 = randn({temb_dim, temb_dim}, rng, real(1.0 / std::sqrt(double(temb_dim))));
        p.temb_b1 = Tensor::zeros({temb_dim});
        p.temb_w2 = randn({temb_dim, temb_dim}, rng, real(1.0 / std::sqrt(double(temb_dim))));
        p.temb_b2 = Tensor::zeros({temb_dim});
        p.in_w = conv(channels, base, 3);
        p.in_b = Tensor::zeros({base});
        p.enc0a = ResBlockParams::init(base, base, temb_dim, rng);
        p.enc0b = ResBlockParams::init(base, base, temb_dim, rng);
        p.down_w = conv(base, 2 * base, 3);
        p.down_b = Tensor::zeros({2 * base});
        p.enc1a = ResBlockParams::init(2 * base, 2 * base, temb_dim, rng);
        p.enc1b = ResBlockParams::init(2 * base, 2 * base, temb_dim, rng);
        p.mid = ResBlockParams::init(2 * base, 2 * base, temb_dim, rng);
        p.up_w = conv(2 * base, base, 3);
        p.up_b = Tensor::zeros({base});
        p.dec0a = ResBlockParams::init(2 * base, base, temb_dim, rng);
        p.dec0b = ResBlockParams::init(base, base, temb_dim, rng);
        p.out_w = Tensor::zeros({channels, base, 3, 3});
        p.out_b = Tensor::zeros({channels});
        p.set_requires_grad(true);
        return p;
    }

    void set_requires_grad(bool b) {
        for_each_param([b](const std::string&, Tensor& t) { t.set_requires_grad(b); });
    }

    template <class F>
    void for_each_param(F f) {
        f("denoiser/temb_w1", temb_w1);
        f("denoiser/temb_b1", temb_b1);
        f("denoiser/temb_w2", temb_w2);
        f("denoiser/temb_b2", temb_b2);
        f("denoiser/in_w", in_w);
        f("denoiser/in_b", in_b);
        enc0a.for_each_param("denoiser/enc0a", f);
        enc0b.for_each_param("denoiser/enc0b", f);
        f("denoiser/down_w", down_w);
        f("denoiser/down_b", down_b);
        enc1a.for_each_param("denoiser/enc1a", f);
        enc1b.for_each_param("denoiser/enc1b", f);
        mid.for_each_param("denoiser/mid", f);
        f("denoiser/up_w", up_w);
        f("denoiser/up_b", up_b);
        dec0a.for_each_param("denoiser/dec0a", f);
        dec0b.for_each_param("denoiser/dec0b", f);
        f("denoiser/out_w", out_w);
        f("denoiser/out_b", out_b);
    }

    int64_t param_count() {
        int64_t n = 0;
        for_each_param([&n](const std::string&, Tensor& t) { n += t.size(); });
        return n;
    }
};

// Sinusoidal embedding of integer timesteps, one row per batch entry.
inline Tensor sinusoidal_time_embedding(std::span<const int> ts, int dim) {
    int half = dim / 2;
    Tensor emb({int(ts.size()), dim});
    real* e = emb.data().data();
    for (size_t b = 0; b < ts.size(); ++b) {
        double t = double(ts[b]);
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * double(i) / double(std::max(half - 1, 1)));
            e[b * size_t(dim) + size_t(i)] = real(std::sin(t * freq));
            e[b * size_t(dim) + size_t(half + i)] = real(std::cos(t * freq));
        }
    }
    return emb;
}

// Predicts v for a batch of noisy latents. x: [B, channels, R, R] with R
// even; ts: one timestep per batch entry.
inline Tensor unet_forward(DenoiserParams& net, const Tensor& x, std::span<const int> ts) {
    if (x.ndim() != 4 || x.dim(1) != net.channels)
        throw ShapeError(strcat_msg("unet: expected [B,", net.channels, ",R,R] input, got ",
                                    shape_str(x.shape())));
    if (x.dim(2) % 2 != 0 || x.dim(2) != x.dim(3))
        throw ShapeError(strcat_msg("unet: spatial size must be square and even, got ",
                                    shape_str(x.shape())));
    if (int(ts.size()) != x.dim(0))
        throw ShapeError(strcat_msg("unet: ", ts.size(), " timesteps for batch of ", x.dim(0)));

    Tensor temb = sinusoidal_time_embedding(ts, net.temb_dim);
    temb = silu(matmul(temb, net.temb_w1) + net.temb_b1);
    temb = matmul(temb, net.temb_w2) + net.temb_b2;

    Tensor h0 = conv2d(x, net.in_w, net.in_b, 1, 1);
    Tensor e0 = net.enc0b.forward(net.enc0a.forward(h0, temb), temb);
    Tensor dn = conv2d(e0, net.down_w, net.down_b, 2, 1);
    Tensor e1 = net.enc1b.forward(net.enc1a.forward(dn, temb), temb);
    Tensor m = net.mid.forward(e1, temb);
    Tensor up = conv2d(upsample_nearest2(m), net.up_w, net.up_b, 1, 1);
    Tensor d0 = net.dec0b.forward(net.dec0a.forward(concat({up, e0}, 1), temb), temb);
    return conv2d(silu(d0), net.out_w, net.out_b, 1, 1);
}

} // namespace ssdnf
