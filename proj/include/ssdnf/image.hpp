#pragma once

#include "core.hpp"
#include "tensor.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace ssdnf {

// Binary PPM (P6) encoding of an [H,W,3] image in [0,1]. Out-of-range values
// are clamped; the caller can count them through `clamped`.
inline std::vector<uint8_t> encode_ppm(const Tensor& image, int64_t* clamped = nullptr) {
    if (image.ndim() != 3 || image.dim(2) != 3)
        throw ShapeError(strcat_msg("encode_ppm: expected [H,W,3] image, got ", shape_str(image.shape())));
    const int H = image.dim(0), W = image.dim(1);
    std::string header = strcat_msg("P6\n", W, " ", H, "\n255\n");
    std::vector<uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + size_t(image.size()));
    int64_t clipped = 0;
    for (real v : image.data()) {
        double x = double(v);
        if (x < 0.0 || x > 1.0) {
            ++clipped;
            x = x < 0.0 ? 0.0 : 1.0;
        }
        long b = std::lround(x * 255.0);
        out.push_back(uint8_t(b < 0 ? 0 : b > 255 ? 255 : b));
    }
    if (clamped) *clamped = clipped;
    return out;
}

inline void write_ppm(const std::string& path, const Tensor& image, int64_t* clamped = nullptr) {
    auto bytes = encode_ppm(image, clamped);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(strcat_msg("ppm: cannot open '", path, "' for writing"));
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw IoError(strcat_msg("ppm: short write to '", path, "'"));
}

// Peak signal-to-noise ratio on unit dynamic range; identical inputs report
// the 99 dB cap instead of infinity.
inline double psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(strcat_msg("psnr: shape mismatch ", shape_str(a.shape()), " vs ",
                                    shape_str(b.shape())));
    double mse = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = double(a.data()[size_t(i)]) - double(b.data()[size_t(i)]);
        mse += d * d;
    }
    mse /= double(a.size());
    constexpr double cap = 99.0;
    if (mse <= 0) return cap;
    double v = 10.0 * std::log10(1.0 / mse);
    return v > cap ? cap : v;
}

namespace detail {

inline std::vector<double> gaussian_window_11(double sigma = 1.5) {
    std::vector<double> w(11);
    double norm = 0;
    for (int i = 0; i < 11; ++i) {
        double d = double(i - 5);
        w[size_t(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        norm += w[size_t(i)];
    }
    for (auto& v : w) v /= norm;
    return w;
}

// Channel-mean grayscale of [H,W,3] (or passthrough for [H,W]).
inline std::vector<double> to_gray(const Tensor& img, int& H, int& W) {
    if (img.ndim() == 3 && img.dim(2) == 3) {
        H = img.dim(0);
        W = img.dim(1);
        std::vector<double> g(size_t(H) * size_t(W));
        const real* p = img.data().data();
        for (int64_t i = 0; i < int64_t(H) * W; ++i)
            g[size_t(i)] = (double(p[3 * i]) + double(p[3 * i + 1]) + double(p[3 * i + 2])) / 3.0;
        return g;
    }
    if (img.ndim() == 2) {
        H = img.dim(0);
        W = img.dim(1);
        std::vector<double> g(size_t(H) * size_t(W));
        for (int64_t i = 0; i < int64_t(H) * W; ++i) g[size_t(i)] = double(img.data()[size_t(i)]);
        return g;
    }
    throw ShapeError(strcat_msg("ssim: expected [H,W,3] or [H,W] image, got ", shape_str(img.shape())));
}

// Separable 11x11 Gaussian filtering, valid region only.
inline std::vector<double> filter_valid(const std::vector<double>& img, int H, int W,
                                        const std::vector<double>& win, int& Hv, int& Wv) {
    const int k = 11, r = 5;
    Hv = H - k + 1;
    Wv = W - k + 1;
    std::vector<double> tmp(size_t(H) * size_t(Wv));
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < Wv; ++x) {
            double acc = 0;
            for (int i = 0; i < k; ++i) acc += win[size_t(i)] * img[size_t(y) * W + size_t(x + i)];
            tmp[size_t(y) * size_t(Wv) + size_t(x)] = acc;
        }
    std::vector<double> out(size_t(Hv) * size_t(Wv));
    for (int y = 0; y < Hv; ++y)
        for (int x = 0; x < Wv; ++x) {
            double acc = 0;
            for (int i = 0; i < k; ++i) acc += win[size_t(i)] * tmp[size_t(y + i) * size_t(Wv) + size_t(x)];
            out[size_t(y) * size_t(Wv) + size_t(x)] = acc;
        }
    (void)r;
    return out;
}

} // namespace detail

// Mean local SSIM with the reference constants: 11x11 Gaussian window
// (sigma 1.5), C1=0.01^2, C2=0.03^2 on unit dynamic range, channel-mean
// grayscale conversion.
inline double ssim(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(strcat_msg("ssim: shape mismatch ", shape_str(a.shape()), " vs ",
                                    shape_str(b.shape())));
    int H = 0, W = 0;
    std::vector<double> x = detail::to_gray(a, H, W);
    int H2 = 0, W2 = 0;
    std::vector<double> y = detail::to_gray(b, H2, W2);
    if (H < 11 || W < 11)
        throw ShapeError(strcat_msg("ssim: image ", H, "x", W, " smaller than the 11x11 window"));

    auto win = detail::gaussian_window_11();
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    int Hv = 0, Wv = 0;
    auto mu_x = detail::filter_valid(x, H, W, win, Hv, Wv);
    auto mu_y = detail::filter_valid(y, H, W, win, Hv, Wv);
    auto m_xx = detail::filter_valid(xx, H, W, win, Hv, Wv);
    auto m_yy = detail::filter_valid(yy, H, W, win, Hv, Wv);
    auto m_xy = detail::filter_valid(xy, H, W, win, Hv, Wv);

    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double acc = 0;
    for (size_t i = 0; i < mu_x.size(); ++i) {
        double mx = mu_x[i], my = mu_y[i];
        double vx = m_xx[i] - mx * mx;
        double vy = m_yy[i] - my * my;
        double cxy = m_xy[i] - mx * my;
        double s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        acc += s;
    }
    return acc / double(mu_x.size());
}

} // namespace ssdnf
