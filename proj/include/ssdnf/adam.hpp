#pragma once

#include "tensor.hpp"

#include <cmath>
#include <string>

namespace ssdnf {

// Bias-corrected Adam state for one parameter tensor.
struct AdamState {
    Tensor m, v;
    int64_t step = 0;
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real eps = real(1e-8);
    real lr = real(1e-3);
    real lr_mult = real(1);

    AdamState() = default;
    explicit AdamState(const Shape& shape, real learning_rate) : m(shape), v(shape), lr(learning_rate) {}

    void reset() {
        for (auto& x : m.data()) x = 0;
        for (auto& x : v.data()) x = 0;
        step = 0;
    }
};

// In-place Adam update. Throws NumericError on NaN/Inf gradients so training
// halts with a diagnostic instead of silently corrupting parameters.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state,
                      const std::string& name = "param") {
    if (param.shape() != grad.shape())
        throw ShapeError(strcat_msg("adam_step(", name, "): grad shape ", shape_str(grad.shape()),
                                    " does not match param ", shape_str(param.shape())));
    if (state.m.shape() != param.shape())
        throw ShapeError(strcat_msg("adam_step(", name, "): state shape ", shape_str(state.m.shape()),
                                    " does not match param ", shape_str(param.shape())));
    const real* g = grad.data().data();
    for (int64_t i = 0; i < grad.size(); ++i)
        if (!std::isfinite(double(g[i])))
            throw NumericError(strcat_msg("adam_step(", name, "): non-finite gradient at flat index ", i));

    state.step += 1;
    const real b1 = state.beta1, b2 = state.beta2;
    const real corr1 = real(1) - real(std::pow(double(b1), double(state.step)));
    const real corr2 = real(1) - real(std::pow(double(b2), double(state.step)));
    const real step_size = state.lr * state.lr_mult;
    real* __restrict p = param.data().data();
    real* __restrict m = state.m.data().data();
    real* __restrict v = state.v.data().data();
    for (int64_t i = 0; i < param.size(); ++i) {
        m[i] = b1 * m[i] + (real(1) - b1) * g[i];
        v[i] = b2 * v[i] + (real(1) - b2) * g[i] * g[i];
        real mhat = m[i] / corr1;
        real vhat = v[i] / corr2;
        p[i] -= step_size * mhat / (std::sqrt(vhat) + state.eps);
    }
}

} // namespace ssdnf
