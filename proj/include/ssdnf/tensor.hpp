#pragma once

#include "core.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace ssdnf {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

class Tape;

namespace detail {

struct TensorData {
    Shape shape;
    std::vector<real> values;
    bool requires_grad = false;
    // Node id on the tape whose epoch matches; stale ids are ignored.
    int node = -1;
    uint64_t epoch = 0;
};

} // namespace detail

// Dense multi-dimensional array with value semantics on the handle and
// shared storage underneath. Ops on tensors record onto the active Tape
// whenever any input participates in differentiation.
class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}

    explicit Tensor(Shape shape) : d_(std::make_shared<detail::TensorData>()) {
        validate_shape(shape);
        d_->shape = std::move(shape);
        d_->values.assign(size_t(shape_numel(d_->shape)), real(0));
    }

    Tensor(Shape shape, std::vector<real> values) : d_(std::make_shared<detail::TensorData>()) {
        validate_shape(shape);
        if (int64_t(values.size()) != shape_numel(shape))
            throw ShapeError(strcat_msg("tensor: ", values.size(), " values do not fill shape ", shape_str(shape)));
        d_->shape = std::move(shape);
        d_->values = std::move(values);
    }

    static Tensor scalar(real v) { return Tensor({1}, {v}); }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, real v) {
        Tensor t(std::move(shape));
        for (auto& x : t.d_->values) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::initializer_list<real> vals) {
        return Tensor(std::move(shape), std::vector<real>(vals));
    }

    const Shape& shape() const { return d_->shape; }
    int ndim() const { return int(d_->shape.size()); }
    int dim(int i) const { return d_->shape[size_t(i)]; }
    int64_t size() const { return int64_t(d_->values.size()); }
    bool empty() const { return d_->values.empty(); }

    std::span<const real> data() const { return {d_->values.data(), d_->values.size()}; }
    std::span<real> data() { return {d_->values.data(), d_->values.size()}; }

    real item() const {
        if (size() != 1) throw ShapeError(strcat_msg("item: tensor ", shape_str(shape()), " is not scalar"));
        return d_->values[0];
    }

    real at(std::initializer_list<int> idx) const {
        int64_t flat = 0;
        size_t k = 0;
        for (int i : idx) flat = flat * d_->shape[k++] + i;
        return d_->values[size_t(flat)];
    }

    Tensor& set_requires_grad(bool b = true) {
        d_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return d_->requires_grad; }

    // Deep copy; the copy is detached and non-differentiable.
    Tensor clone() const {
        Tensor t;
        t.d_->shape = d_->shape;
        t.d_->values = d_->values;
        return t;
    }

    detail::TensorData* impl() const { return d_.get(); }
    std::shared_ptr<detail::TensorData> storage() const { return d_; }

private:
    static void validate_shape(const Shape& s) {
        for (int d : s)
            if (d <= 0) throw ShapeError(strcat_msg("tensor: non-positive dim in shape ", shape_str(s)));
    }

    std::shared_ptr<detail::TensorData> d_;
};

inline Tensor randn(Shape shape, Rng& rng, real scale = 1) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = real(rng.gaussian()) * scale;
    return t;
}

inline Tensor rand_uniform(Shape shape, Rng& rng, real lo, real hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = real(rng.uniform(lo, hi));
    return t;
}

// Reverse-mode gradient tape. Constructing a Tape makes it the active
// recorder for the current thread; destruction restores the previous one.
// Recording order is program order, so walking entries backwards is a valid
// reverse topological order.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::span<const real>)>;

    Tape() : epoch_(next_epoch()++), prev_(active_ref()) { active_ref() = this; }
    ~Tape() { active_ref() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    uint64_t epoch() const { return epoch_; }

    int node_of(const Tensor& t) const {
        auto* d = t.impl();
        return d->epoch == epoch_ ? d->node : -1;
    }

    // Registers t as a differentiable leaf if it asks for gradients.
    int ensure_leaf(const Tensor& t) {
        int existing = node_of(t);
        if (existing >= 0) return existing;
        if (!t.requires_grad()) return -1;
        int id = int(nodes_.size());
        nodes_.push_back(Node{t.size(), nullptr});
        grads_.emplace_back();
        t.impl()->node = id;
        t.impl()->epoch = epoch_;
        return id;
    }

    int record(const Tensor& out, BackwardFn fn) {
        int id = int(nodes_.size());
        nodes_.push_back(Node{out.size(), std::move(fn)});
        grads_.emplace_back();
        out.impl()->node = id;
        out.impl()->epoch = epoch_;
        return id;
    }

    // Zero-initialized gradient buffer of a node, allocated on first touch.
    std::vector<real>& grad_buffer(int node) {
        auto& g = grads_[size_t(node)];
        if (g.empty()) g.assign(size_t(nodes_[size_t(node)].size), real(0));
        return g;
    }

    void backward(const Tensor& loss) {
        if (loss.size() != 1)
            throw ShapeError(strcat_msg("backward: loss must be scalar, got ", shape_str(loss.shape())));
        int n = node_of(loss);
        if (n < 0) throw Error("backward: loss is not recorded on the active tape");
        if (backward_done_) throw Error("backward: tape already traversed; re-record before calling again");
        backward_done_ = true;
        grad_buffer(n)[0] = real(1);
        for (int i = n; i >= 0; --i) {
            auto& g = grads_[size_t(i)];
            if (g.empty()) continue;
            if (nodes_[size_t(i)].backward) nodes_[size_t(i)].backward(*this, {g.data(), g.size()});
        }
    }

    bool backward_done() const { return backward_done_; }

    // Accumulated gradient of t; zeros when t is unreachable from the loss.
    Tensor grad(const Tensor& t) const {
        Tensor g(t.shape());
        int n = node_of(t);
        if (n >= 0 && !grads_[size_t(n)].empty()) {
            const auto& src = grads_[size_t(n)];
            std::memcpy(g.data().data(), src.data(), src.size() * sizeof(real));
        }
        return g;
    }

private:
    struct Node {
        int64_t size;
        BackwardFn backward;
    };

    static uint64_t& next_epoch() {
        static uint64_t e = 1;
        return e;
    }
    static Tape*& active_ref() {
        thread_local Tape* a = nullptr;
        return a;
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<real>> grads_;
    uint64_t epoch_;
    Tape* prev_;
    bool backward_done_ = false;
};

namespace detail {

inline bool want_grad2(const Tensor& a, const Tensor& b) {
    Tape* tp = Tape::active();
    if (!tp) return false;
    return a.requires_grad() || b.requires_grad() || tp->node_of(a) >= 0 || tp->node_of(b) >= 0;
}

inline bool want_grad1(const Tensor& a) {
    Tape* tp = Tape::active();
    if (!tp) return false;
    return a.requires_grad() || tp->node_of(a) >= 0;
}

inline void axpy(std::vector<real>& acc, std::span<const real> x, real a) {
    real* __restrict o = acc.data();
    const real* __restrict v = x.data();
    for (size_t i = 0; i < x.size(); ++i) o[i] += a * v[i];
}

// ---- broadcasting -------------------------------------------------------

struct BcPlan {
    Shape out;
    std::vector<int64_t> sa, sb; // per-dim strides into a and b, 0 where broadcast
    int64_t n = 0;
};

inline BcPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    BcPlan p;
    int nd = int(std::max(a.size(), b.size()));
    p.out.resize(size_t(nd));
    std::vector<int> da(size_t(nd), 1), db(size_t(nd), 1);
    for (size_t i = 0; i < a.size(); ++i) da[size_t(nd) - a.size() + i] = a[i];
    for (size_t i = 0; i < b.size(); ++i) db[size_t(nd) - b.size() + i] = b[i];
    for (int i = 0; i < nd; ++i) {
        int x = da[size_t(i)], y = db[size_t(i)];
        if (x != y && x != 1 && y != 1)
            throw ShapeError(strcat_msg(op, ": shapes ", shape_str(a), " and ", shape_str(b), " do not broadcast"));
        p.out[size_t(i)] = std::max(x, y);
    }
    p.sa.assign(size_t(nd), 0);
    p.sb.assign(size_t(nd), 0);
    int64_t ra = 1, rb = 1;
    for (int i = nd - 1; i >= 0; --i) {
        p.sa[size_t(i)] = da[size_t(i)] == 1 ? 0 : ra;
        p.sb[size_t(i)] = db[size_t(i)] == 1 ? 0 : rb;
        ra *= da[size_t(i)];
        rb *= db[size_t(i)];
    }
    p.n = shape_numel(p.out);
    return p;
}

template <class F>
void bc_apply_rec(const BcPlan& p, int d, const real* a, const real* b, real*& o, F& f) {
    int nd = int(p.out.size());
    if (d == nd - 1) {
        int len = p.out[size_t(d)];
        int64_t sa = p.sa[size_t(d)], sb = p.sb[size_t(d)];
        for (int i = 0; i < len; ++i) *o++ = f(a[i * sa], b[i * sb]);
        return;
    }
    for (int i = 0; i < p.out[size_t(d)]; ++i)
        bc_apply_rec(p, d + 1, a + i * p.sa[size_t(d)], b + i * p.sb[size_t(d)], o, f);
}

template <class F>
void bc_apply(const BcPlan& p, const real* a, const real* b, real* out, F f) {
    if (p.out.empty()) {
        *out = f(*a, *b);
        return;
    }
    real* o = out;
    bc_apply_rec(p, 0, a, b, o, f);
}

// target[idx_target] += f(g[idx_out], a[idx_a], b[idx_b]) over every output
// position; `a` is always indexed with plan.sa and `b` with plan.sb, while the
// scatter target uses its own stride set (sa when accumulating into a's grad,
// sb when into b's). Backward of broadcast binaries.
template <class F>
void bc_accum_rec(const BcPlan& p, int d, real* t, const int64_t* st, const real* g, const real* a,
                  const real* b, F& f) {
    int nd = int(p.out.size());
    if (d == nd - 1) {
        int len = p.out[size_t(d)];
        int64_t s = st[d], sa = p.sa[size_t(d)], sb = p.sb[size_t(d)];
        for (int i = 0; i < len; ++i) t[i * s] += f(g[i], a[i * sa], b[i * sb]);
        return;
    }
    int64_t stride_out = 1;
    for (int k = d + 1; k < nd; ++k) stride_out *= p.out[size_t(k)];
    for (int i = 0; i < p.out[size_t(d)]; ++i)
        bc_accum_rec(p, d + 1, t + i * st[d], st, g + i * stride_out, a + i * p.sa[size_t(d)],
                     b + i * p.sb[size_t(d)], f);
}

template <class F>
void bc_accum(const BcPlan& p, const std::vector<int64_t>& target_strides, real* target, const real* g,
              const real* a, const real* b, F f) {
    if (p.out.empty()) {
        *target += f(*g, *a, *b);
        return;
    }
    bc_accum_rec(p, 0, target, target_strides.data(), g, a, b, f);
}

} // namespace detail

// ---- elementwise binaries ------------------------------------------------

namespace detail {

template <class FwdF, class DaF, class DbF>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, FwdF f, DaF da, DbF db) {
    BcPlan plan = broadcast_plan(a.shape(), b.shape(), name);
    Tensor out(plan.out);
    bc_apply(plan, a.data().data(), b.data().data(), out.data().data(), f);
    if (want_grad2(a, b)) {
        Tape& tp = *Tape::active();
        int pa = tp.ensure_leaf(a);
        int pb = tp.ensure_leaf(b);
        if (pa >= 0 || pb >= 0) {
            auto sa = a.storage();
            auto sb = b.storage();
            tp.record(out, [plan, pa, pb, sa, sb, da, db](Tape& t, std::span<const real> g) {
                if (pa >= 0) {
                    auto& buf = t.grad_buffer(pa);
                    bc_accum(plan, plan.sa, buf.data(), g.data(), sa->values.data(), sb->values.data(),
                             [da](real gv, real av, real bv) { return gv * da(av, bv); });
                }
                if (pb >= 0) {
                    auto& buf = t.grad_buffer(pb);
                    bc_accum(plan, plan.sb, buf.data(), g.data(), sa->values.data(), sb->values.data(),
                             [db](real gv, real av, real bv) { return gv * db(av, bv); });
                }
            });
        }
    }
    return out;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "add", [](real x, real y) { return x + y; }, [](real, real) { return real(1); },
        [](real, real) { return real(1); });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "sub", [](real x, real y) { return x - y; }, [](real, real) { return real(1); },
        [](real, real) { return real(-1); });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "mul", [](real x, real y) { return x * y; }, [](real, real y) { return y; },
        [](real x, real) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "div", [](real x, real y) { return x / y; }, [](real, real y) { return real(1) / y; },
        [](real x, real y) { return -x / (y * y); });
}

// out = scale * t + shift, the one primitive behind all scalar arithmetic.
inline Tensor affine(const Tensor& t, real scale, real shift) {
    Tensor out(t.shape());
    const real* __restrict in = t.data().data();
    real* __restrict o = out.data().data();
    for (int64_t i = 0; i < t.size(); ++i) o[i] = scale * in[i] + shift;
    if (detail::want_grad1(t)) {
        Tape& tp = *Tape::active();
        int p = tp.ensure_leaf(t);
        if (p >= 0)
            tp.record(out, [p, scale](Tape& tape, std::span<const real> g) {
                detail::axpy(tape.grad_buffer(p), g, scale);
            });
    }
    return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, real s) { return affine(a, 1, s); }
inline Tensor operator+(real s, const Tensor& a) { return affine(a, 1, s); }
inline Tensor operator-(const Tensor& a, real s) { return affine(a, 1, -s); }
inline Tensor operator-(real s, const Tensor& a) { return affine(a, -1, s); }
inline Tensor operator-(const Tensor& a) { return affine(a, -1, 0); }
inline Tensor operator*(const Tensor& a, real s) { return affine(a, s, 0); }
inline Tensor operator*(real s, const Tensor& a) { return affine(a, s, 0); }
inline Tensor operator/(const Tensor& a, real s) { return affine(a, real(1) / s, 0); }

// ---- elementwise unaries --------------------------------------------------

namespace detail {

// dfn receives (input value, output value) so each op can use the cheaper one.
template <class FwdF, class DF>
Tensor unary_op(const Tensor& t, FwdF f, DF dfn) {
    Tensor out(t.shape());
    const real* __restrict in = t.data().data();
    real* __restrict o = out.data().data();
    for (int64_t i = 0; i < t.size(); ++i) o[i] = f(in[i]);
    if (want_grad1(t)) {
        Tape& tp = *Tape::active();
        int p = tp.ensure_leaf(t);
        if (p >= 0) {
            auto sin_ = t.storage();
            auto sout = out.storage();
            tp.record(out, [p, sin_, sout, dfn](Tape& tape, std::span<const real> g) {
                auto& buf = tape.grad_buffer(p);
                const real* x = sin_->values.data();
                const real* y = sout->values.data();
                real* __restrict acc = buf.data();
                for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * dfn(x[i], y[i]);
            });
        }
    }
    return out;
}

} // namespace detail

inline Tensor exp(const Tensor& t) {
    return detail::unary_op(t, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

inline Tensor log(const Tensor& t) {
    return detail::unary_op(t, [](real x) { return std::log(x); }, [](real x, real) { return real(1) / x; });
}

inline Tensor sqrt(const Tensor& t) {
    return detail::unary_op(t, [](real x) { return std::sqrt(x); },
                            [](real, real y) { return real(0.5) / y; });
}

inline Tensor tanh(const Tensor& t) {
    return detail::unary_op(t, [](real x) { return std::tanh(x); },
                            [](real, real y) { return real(1) - y * y; });
}

inline Tensor sigmoid(const Tensor& t) {
    return detail::unary_op(
        t, [](real x) { return real(1) / (real(1) + std::exp(-x)); },
        [](real, real y) { return y * (real(1) - y); });
}

inline Tensor softplus(const Tensor& t) {
    return detail::unary_op(
        t,
        [](real x) {
            if (x > real(20)) return x;
            if (x < real(-20)) return std::exp(x);
            return std::log1p(std::exp(x));
        },
        [](real x, real) { return real(1) / (real(1) + std::exp(-x)); });
}

inline Tensor sin(const Tensor& t) {
    return detail::unary_op(t, [](real x) { return std::sin(x); }, [](real x, real) { return std::cos(x); });
}

inline Tensor cos(const Tensor& t) {
    return detail::unary_op(t, [](real x) { return std::cos(x); }, [](real x, real) { return -std::sin(x); });
}

inline Tensor relu(const Tensor& t) {
    return detail::unary_op(t, [](real x) { return x > 0 ? x : real(0); },
                            [](real x, real) { return x > 0 ? real(1) : real(0); });
}

inline Tensor silu(const Tensor& t) {
    return detail::unary_op(
        t,
        [](real x) { return x / (real(1) + std::exp(-x)); },
        [](real x, real) {
            real s = real(1) / (real(1) + std::exp(-x));
            return s * (real(1) + x * (real(1) - s));
        });
}

inline Tensor pow(const Tensor& t, real e) {
    return detail::unary_op(
        t, [e](real x) { return std::pow(x, e); },
        [e](real x, real y) { return x == 0 ? real(0) : e * y / x; });
}

inline Tensor square(const Tensor& t) {
    return detail::unary_op(t, [](real x) { return x * x; }, [](real x, real) { return 2 * x; });
}

// ---- reductions -----------------------------------------------------------

inline Tensor sum(const Tensor& t) {
    double acc = 0;
    for (real v : t.data()) acc += double(v);
    Tensor out = Tensor::scalar(real(acc));
    if (detail::want_grad1(t)) {
        Tape& tp = *Tape::active();
        int p = tp.ensure_leaf(t);
        if (p >= 0)
            tp.record(out, [p](Tape& tape, std::span<const real> g) {
                auto& buf = tape.grad_buffer(p);
                real gv = g[0];
                for (auto& v : buf) v += gv;
            });
    }
    return out;
}

inline Tensor mean(const Tensor& t) { return sum(t) * (real(1) / real(t.size())); }

namespace detail {

inline void axis_extents(const Shape& s, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[size_t(i)];
    len = s[size_t(axis)];
    for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

} // namespace detail

inline Tensor sum(const Tensor& t, int axis) {
    if (axis < 0 || axis >= t.ndim())
        throw ShapeError(strcat_msg("sum: axis ", axis, " out of range for ", shape_str(t.shape())));
    int64_t outer, len, inner;
    detail::axis_extents(t.shape(), axis, outer, len, inner);
    Shape os;
    for (int i = 0; i < t.ndim(); ++i)
        if (i != axis) os.push_back(t.dim(i));
    if (os.empty()) os = {1};
    Tensor out(os);
    const real* in = t.data().data();
    real* o = out.data().data();
    std::vector<double> acc(static_cast<size_t>(inner));
    for (int64_t a = 0; a < outer; ++a) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t l = 0; l < len; ++l) {
            const real* row = in + (a * len + l) * inner;
            for (int64_t i = 0; i < inner; ++i) acc[size_t(i)] += double(row[i]);
        }
        for (int64_t i = 0; i < inner; ++i) o[a * inner + i] = real(acc[size_t(i)]);
    }
    if (detail::want_grad1(t)) {
        Tape& tp = *Tape::active();
        int p = tp.ensure_leaf(t);
        if (p >= 0)
            tp.record(out, [p, outer, len, inner](Tape& tape, std::span<const real> g) {
                auto& buf = tape.grad_buffer(p);
                for (int64_t a = 0; a < outer; ++a)
                    for (int64_t l = 0; l < len; ++l) {
                        real* row = buf.data() + (a * len + l) * inner;
                        const real* gr = g.data() + a * inner;
                        for (int64_t i = 0; i < inner; ++i) row[i] += gr[i];
                    }
            });
    }
    return out;
}

inline Tensor mean(const Tensor& t, int axis) {
    return sum(t, axis) * (real(1) / real(t.dim(axis)));
}

// Exclusive running sum along an axis: out[..., l, ...] = sum of inputs with
// index < l. Backward is the exclusive suffix sum of the incoming gradient.
inline Tensor cumsum_exclusive(const Tensor& t, int axis) {
    if (axis < 0 || axis >= t.ndim())
        throw ShapeError(strcat_msg("cumsum_exclusive: axis ", axis, " out of range for ", shape_str(t.shape())));
    int64_t outer, len, inner;
    detail::axis_extents(t.shape(), axis, outer, len, inner);
    Tensor out(t.shape());
    const real* in = t.data().data();
    real* o = out.data().data();
    std::vector<double> acc(static_cast<size_t>(inner));
    for (int64_t a = 0; a < outer; ++a) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t l = 0; l < len; ++l) {
            const real* irow = in + (a * len + l) * inner;
            real* orow = o + (a * len + l) * inner;
            for (int64_t i = 0; i < inner; ++i) {
                orow[i] = real(acc[size_t(i)]);
                acc[size_t(i)] += double(irow[i]);
            }
        }
    }
    if (detail::want_grad1(t)) {
        Tape& tp = *Tape::active();
        int p = tp.ensure_leaf(t);
        if (p >= 0)
            tp.record(out, [p, outer, len, inner](Tape& tape, std::span<const real> g) {
                auto& buf = tape.grad_buffer(p);
                std::vector<double> acc(static_cast<size_t>(inner));
                for (int64_t a = 0; a < outer; ++a) {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (int64_t l = len - 1; l >= 0; --l) {
                        const real* grow = g.data() + (a * len + l) * inner;
                        real* brow = buf.data() + (a * len + l) * inner;
                        for (int64_t i = 0; i < inner; ++i) {
                            brow[i] += real(acc[size_t(i)]);
                            acc[size_t(i)] += double(grow[i]);
                        }
                    }
                }
            });
    }
    return out;
}

// ---- shape ops -------------------------------------------------------------

inline Tensor reshape(const Tensor& t, Shape shape) {
    if (shape_numel(shape) != t.size())
        throw ShapeError(strcat_msg("reshape: cannot view ", shape_str(t.shape()), " as ", shape_str(shape)));
    Tensor out(std::move(shape), std::vector<real>(t.data().begin(), t.data().end()));
    if (detail::want_grad1(t)) {
        Tape& tp = *Tape::active();
        int p = tp.ensure_leaf(t);
        if (p >= 0)
            tp.record(out, [p](Tape& tape, std::span<const real> g) {
                detail::axpy(tape.grad_buffer(p), g, 1);
            });
    }
    return out;
}

inline Tensor slice(const Tensor& t, int axis, int start, int len) {
    if (axis < 0 || axis >= t.ndim())
        throw ShapeError(strcat_msg("slice: axis ", axis, " out of range for ", shape_str(t.shape())));
    if (start < 0 || len <= 0 || start + len > t.dim(axis))
        throw ShapeError(strcat_msg("slice: range [", start, ",", start + len, ") exceeds axis ", axis,
                                    " of ", shape_str(t.shape())));
    int64_t outer, alen, inner;
    detail::axis_extents(t.shape(), axis, outer, alen, inner);
    Shape os = t.shape();
    os[size_t(axis)] = len;
    Tensor out(os);
    const real* in = t.data().data();
    real* o = out.data().data();
    for (int64_t a = 0; a < outer; ++a)
        std::memcpy(o + a * len * inner, in + (a * alen + start) * inner, size_t(len * inner) * sizeof(real));
    if (detail::want_grad1(t)) {
        Tape& tp = *Tape::active();
        int p = tp.ensure_leaf(t);
        if (p >= 0)
            tp.record(out, [p, outer, alen, inner, start, len](Tape& tape, std::span<const real> g) {
                auto& buf = tape.grad_buffer(p);
                for (int64_t a = 0; a < outer; ++a) {
                    real* dst = buf.data() + (a * alen + start) * inner;
                    const real* src = g.data() + a * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
            });
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= int(s0.size()))
        throw ShapeError(strcat_msg("concat: axis ", axis, " out of range for ", shape_str(s0)));
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != int(s0.size()))
            throw ShapeError(strcat_msg("concat: rank mismatch ", shape_str(p.shape()), " vs ", shape_str(s0)));
        for (int i = 0; i < int(s0.size()); ++i)
            if (i != axis && p.dim(i) != s0[size_t(i)])
                throw ShapeError(strcat_msg("concat: shape mismatch ", shape_str(p.shape()), " vs ", shape_str(s0)));
        total += p.dim(axis);
    }
    Shape os = s0;
    os[size_t(axis)] = total;
    Tensor out(os);
    int64_t outer, olen, inner;
    detail::axis_extents(os, axis, outer, olen, inner);
    real* o = out.data().data();
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t plen = p.dim(axis);
        const real* in = p.data().data();
        for (int64_t a = 0; a < outer; ++a)
            std::memcpy(o + (a * olen + off) * inner, in + a * plen * inner,
                        size_t(plen * inner) * sizeof(real));
        off += plen;
    }
    Tape* tp = Tape::active();
    if (tp) {
        bool any = false;
        std::vector<int> pids(parts.size(), -1);
        std::vector<int64_t> plens(parts.size());
        for (size_t k = 0; k < parts.size(); ++k) {
            plens[k] = parts[k].dim(axis);
            if (parts[k].requires_grad() || tp->node_of(parts[k]) >= 0) {
                pids[k] = tp->ensure_leaf(parts[k]);
                any = true;
            }
        }
        if (any)
            tp->record(out, [pids, plens, outer, olen, inner](Tape& tape, std::span<const real> g) {
                int64_t off = 0;
                for (size_t k = 0; k < pids.size(); ++k) {
                    int64_t plen = plens[k];
                    if (pids[k] >= 0) {
                        auto& buf = tape.grad_buffer(pids[k]);
                        for (int64_t a = 0; a < outer; ++a) {
                            real* dst = buf.data() + a * plen * inner;
                            const real* src = g.data() + (a * olen + off) * inner;
                            for (int64_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
                        }
                    }
                    off += plen;
                }
            });
    }
    return out;
}

// ---- matmul ----------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError(strcat_msg("matmul: incompatible shapes ", shape_str(a.shape()), " x ",
                                    shape_str(b.shape())));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    {
        const real* A = a.data().data();
        const real* B = b.data().data();
        real* O = out.data().data();
        for (int i = 0; i < m; ++i) {
            real* __restrict orow = O + int64_t(i) * n;
            const real* arow = A + int64_t(i) * k;
            for (int kk = 0; kk < k; ++kk) {
                real av = arow[kk];
                if (av == 0) continue;
                const real* __restrict brow = B + int64_t(kk) * n;
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }
    if (detail::want_grad2(a, b)) {
        Tape& tp = *Tape::active();
        int pa = tp.ensure_leaf(a);
        int pb = tp.ensure_leaf(b);
        if (pa >= 0 || pb >= 0) {
            auto sa = a.storage();
            auto sb = b.storage();
            tp.record(out, [pa, pb, sa, sb, m, k, n](Tape& tape, std::span<const real> g) {
                const real* G = g.data();
                if (pa >= 0) {
                    // dA = G * B^T computed against a transposed copy of B so
                    // the inner loop runs contiguous
                    auto& buf = tape.grad_buffer(pa);
                    const real* B = sb->values.data();
                    std::vector<real> bt(size_t(k) * size_t(n));
                    for (int kk = 0; kk < k; ++kk)
                        for (int j = 0; j < n; ++j) bt[size_t(j) * k + size_t(kk)] = B[int64_t(kk) * n + j];
                    for (int i = 0; i < m; ++i) {
                        real* __restrict arow = buf.data() + int64_t(i) * k;
                        const real* grow = G + int64_t(i) * n;
                        for (int j = 0; j < n; ++j) {
                            real gv = grow[j];
                            if (gv == 0) continue;
                            const real* __restrict btrow = bt.data() + size_t(j) * k;
                            for (int kk = 0; kk < k; ++kk) arow[kk] += gv * btrow[kk];
                        }
                    }
                }
                if (pb >= 0) {
                    auto& buf = tape.grad_buffer(pb);
                    const real* A = sa->values.data();
                    for (int i = 0; i < m; ++i) {
                        const real* arow = A + int64_t(i) * k;
                        const real* grow = G + int64_t(i) * n;
                        for (int kk = 0; kk < k; ++kk) {
                            real av = arow[kk];
                            if (av == 0) continue;
                            real* __restrict brow = buf.data() + int64_t(kk) * n;
                            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                        }
                    }
                }
            });
        }
    }
    return out;
}

// ---- conv2d ----------------------------------------------------------------

namespace detail {

// Output index range [lo, hi] with 0 <= i*stride + offset < extent_in.
inline void conv_tap_range(int extent_in, int extent_out, int stride, int offset, int& lo, int& hi) {
    lo = offset < 0 ? (-offset + stride - 1) / stride : 0;
    int max_in = extent_in - 1 - offset;
    hi = max_in < 0 ? -1 : std::min(extent_out - 1, max_in / stride);
}

} // namespace detail

// x: [B, Cin, H, W], w: [Cout, Cin, kh, kw], optional bias [Cout].
// Zero padding `pad`, stride 1 or 2.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw ShapeError(strcat_msg("conv2d: expected 4-d input and weight, got ", shape_str(x.shape()),
                                    " and ", shape_str(w.shape())));
    if (x.dim(1) != w.dim(1))
        throw ShapeError(strcat_msg("conv2d: channel mismatch ", shape_str(x.shape()), " vs ",
                                    shape_str(w.shape())));
    if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0)
        throw ShapeError(strcat_msg("conv2d: empty output for input ", shape_str(x.shape()), " kernel ",
                                    shape_str(w.shape())));
    const bool has_bias = !bias.empty();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != Co))
        throw ShapeError(strcat_msg("conv2d: bias shape ", shape_str(bias.shape()), " does not match ", Co,
                                    " output channels"));
    Tensor out({B, Co, Ho, Wo});
    {
        const real* X = x.data().data();
        const real* Wt = w.data().data();
        real* O = out.data().data();
        for (int b = 0; b < B; ++b)
            for (int co = 0; co < Co; ++co) {
                real* oplane = O + ((int64_t(b) * Co + co) * Ho) * Wo;
                if (has_bias) {
                    real bv = bias.data()[size_t(co)];
                    for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) oplane[i] = bv;
                }
                for (int ci = 0; ci < Ci; ++ci) {
                    const real* xplane = X + ((int64_t(b) * Ci + ci) * H) * W;
                    const real* wk = Wt + ((int64_t(co) * Ci + ci) * kh) * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        int ylo, yhi;
                        detail::conv_tap_range(H, Ho, stride, ky - pad, ylo, yhi);
                        for (int kx = 0; kx < kw; ++kx) {
                            real wv = wk[ky * kw + kx];
                            if (wv == 0) continue;
                            int xlo, xhi;
                            detail::conv_tap_range(W, Wo, stride, kx - pad, xlo, xhi);
                            for (int yo = ylo; yo <= yhi; ++yo) {
                                int yi = yo * stride + ky - pad;
                                real* __restrict orow = oplane + int64_t(yo) * Wo;
                                const real* xrow = xplane + int64_t(yi) * W + (kx - pad);
                                if (stride == 1) {
                                    for (int xo = xlo; xo <= xhi; ++xo) orow[xo] += wv * xrow[xo];
                                } else {
                                    for (int xo = xlo; xo <= xhi; ++xo) orow[xo] += wv * xrow[2 * xo];
                                }
                            }
                        }
                    }
                }
            }
    }
    Tape* tp = Tape::active();
    bool wants = tp && (x.requires_grad() || w.requires_grad() || (has_bias && bias.requires_grad()) ||
                        tp->node_of(x) >= 0 || tp->node_of(w) >= 0 || (has_bias && tp->node_of(bias) >= 0));
    if (wants) {
        int px = tp->ensure_leaf(x);
        int pw = tp->ensure_leaf(w);
        int pb = has_bias ? tp->ensure_leaf(bias) : -1;
        if (px >= 0 || pw >= 0 || pb >= 0) {
            auto sx = x.storage();
            auto sw = w.storage();
            tp->record(out, [=](Tape& tape, std::span<const real> g) {
                const real* G = g.data();
                if (pb >= 0) {
                    auto& buf = tape.grad_buffer(pb);
                    for (int b = 0; b < B; ++b)
                        for (int co = 0; co < Co; ++co) {
                            const real* gplane = G + ((int64_t(b) * Co + co) * Ho) * Wo;
                            double acc = 0;
                            for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) acc += double(gplane[i]);
                            buf[size_t(co)] += real(acc);
                        }
                }
                if (px >= 0) {
                    auto& buf = tape.grad_buffer(px);
                    const real* Wt = sw->values.data();
                    for (int b = 0; b < B; ++b)
                        for (int co = 0; co < Co; ++co) {
                            const real* gplane = G + ((int64_t(b) * Co + co) * Ho) * Wo;
                            for (int ci = 0; ci < Ci; ++ci) {
                                real* dplane = buf.data() + ((int64_t(b) * Ci + ci) * H) * W;
                                const real* wk = Wt + ((int64_t(co) * Ci + ci) * kh) * kw;
                                for (int ky = 0; ky < kh; ++ky) {
                                    int ylo, yhi;
                                    detail::conv_tap_range(H, Ho, stride, ky - pad, ylo, yhi);
                                    for (int kx = 0; kx < kw; ++kx) {
                                        real wv = wk[ky * kw + kx];
                                        if (wv == 0) continue;
                                        int xlo, xhi;
                                        detail::conv_tap_range(W, Wo, stride, kx - pad, xlo, xhi);
                                        for (int yo = ylo; yo <= yhi; ++yo) {
                                            int yi = yo * stride + ky - pad;
                                            const real* grow = gplane + int64_t(yo) * Wo;
                                            real* __restrict drow = dplane + int64_t(yi) * W + (kx - pad);
                                            if (stride == 1) {
                                                for (int xo = xlo; xo <= xhi; ++xo) drow[xo] += wv * grow[xo];
                                            } else {
                                                for (int xo = xlo; xo <= xhi; ++xo) drow[2 * xo] += wv * grow[xo];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                }
                if (pw >= 0) {
                    auto& buf = tape.grad_buffer(pw);
                    const real* X = sx->values.data();
                    for (int co = 0; co < Co; ++co)
                        for (int ci = 0; ci < Ci; ++ci) {
                            real* wk = buf.data() + ((int64_t(co) * Ci + ci) * kh) * kw;
                            for (int ky = 0; ky < kh; ++ky) {
                                int ylo, yhi;
                                detail::conv_tap_range(H, Ho, stride, ky - pad, ylo, yhi);
                                for (int kx = 0; kx < kw; ++kx) {
                                    int xlo, xhi;
                                    detail::conv_tap_range(W, Wo, stride, kx - pad, xlo, xhi);
                                    double acc = 0;
                                    for (int b = 0; b < B; ++b) {
                                        const real* gplane = G + ((int64_t(b) * Co + co) * Ho) * Wo;
                                        const real* xplane = X + ((int64_t(b) * Ci + ci) * H) * W;
                                        for (int yo = ylo; yo <= yhi; ++yo) {
                                            int yi = yo * stride + ky - pad;
                                            const real* grow = gplane + int64_t(yo) * Wo;
                                            const real* xrow = xplane + int64_t(yi) * W + (kx - pad);
                                            real racc = 0;
                                            if (stride == 1) {
                                                for (int xo = xlo; xo <= xhi; ++xo) racc += grow[xo] * xrow[xo];
                                            } else {
                                                for (int xo = xlo; xo <= xhi; ++xo) racc += grow[xo] * xrow[2 * xo];
                                            }
                                            acc += double(racc);
                                        }
                                    }
                                    wk[ky * kw + kx] += real(acc);
                                }
                            }
                        }
                }
            });
        }
    }
    return out;
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    return conv2d(x, w, bias, 1, (w.dim(2) - 1) / 2);
}

// Nearest-neighbour 2x upsampling; paired with conv2d it stands in for a
// transposed convolution on the decoder path.
inline Tensor upsample_nearest2(const Tensor& x) {
    if (x.ndim() != 4)
        throw ShapeError(strcat_msg("upsample_nearest2: expected 4-d input, got ", shape_str(x.shape())));
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out({B, C, 2 * H, 2 * W});
    const real* X = x.data().data();
    real* O = out.data().data();
    for (int64_t p = 0; p < int64_t(B) * C; ++p) {
        const real* xp = X + p * H * W;
        real* op = O + p * 4 * H * W;
        for (int y = 0; y < 2 * H; ++y) {
            const real* xrow = xp + int64_t(y / 2) * W;
            real* orow = op + int64_t(y) * 2 * W;
            for (int x2 = 0; x2 < 2 * W; ++x2) orow[x2] = xrow[x2 / 2];
        }
    }
    if (detail::want_grad1(x)) {
        Tape& tp = *Tape::active();
        int p = tp.ensure_leaf(x);
        if (p >= 0)
            tp.record(out, [p, B, C, H, W](Tape& tape, std::span<const real> g) {
                auto& buf = tape.grad_buffer(p);
                const real* G = g.data();
                for (int64_t pl = 0; pl < int64_t(B) * C; ++pl) {
                    real* dp = buf.data() + pl * H * W;
                    const real* gp = G + pl * 4 * H * W;
                    for (int y = 0; y < 2 * H; ++y) {
                        real* drow = dp + int64_t(y / 2) * W;
                        const real* grow = gp + int64_t(y) * 2 * W;
                        for (int x2 = 0; x2 < 2 * W; ++x2) drow[x2 / 2] += grow[x2];
                    }
                }
            });
    }
    return out;
}

// ---- bilinear grid sampling -------------------------------------------------

// map: [C, H, W]; coords: [N, 2] as (x, y) in pixel units with integer
// coordinates on pixel centers. Coordinates are clamped to the map extent
// (border padding), so sampling is defined everywhere and the coordinate
// gradient vanishes outside.
inline Tensor grid_sample(const Tensor& map, const Tensor& coords) {
    if (map.ndim() != 3)
        throw ShapeError(strcat_msg("grid_sample: expected 3-d map, got ", shape_str(map.shape())));
    if (coords.ndim() != 2 || coords.dim(1) != 2)
        throw ShapeError(strcat_msg("grid_sample: expected [N,2] coords, got ", shape_str(coords.shape())));
    const int C = map.dim(0), H = map.dim(1), W = map.dim(2);
    const int N = coords.dim(0);
    Tensor out({N, C});
    struct Tap {
        int x0, x1, y0, y1;
        real fx, fy;
        bool cx, cy; // clamped -> no coordinate gradient
    };
    std::vector<Tap> taps(static_cast<size_t>(N));
    {
        const real* cd = coords.data().data();
        for (int n = 0; n < N; ++n) {
            real xr = cd[2 * n], yr = cd[2 * n + 1];
            Tap t;
            t.cx = xr <= 0 || xr >= real(W - 1);
            t.cy = yr <= 0 || yr >= real(H - 1);
            real x = std::min(std::max(xr, real(0)), real(W - 1));
            real y = std::min(std::max(yr, real(0)), real(H - 1));
            t.x0 = int(std::floor(x));
            t.y0 = int(std::floor(y));
            if (t.x0 > W - 2) t.x0 = std::max(0, W - 2);
            if (t.y0 > H - 2) t.y0 = std::max(0, H - 2);
            t.x1 = std::min(t.x0 + 1, W - 1);
            t.y1 = std::min(t.y0 + 1, H - 1);
            t.fx = x - real(t.x0);
            t.fy = y - real(t.y0);
            taps[size_t(n)] = t;
        }
        const real* M = map.data().data();
        real* O = out.data().data();
        for (int n = 0; n < N; ++n) {
            const Tap& t = taps[size_t(n)];
            real w00 = (1 - t.fx) * (1 - t.fy), w10 = t.fx * (1 - t.fy);
            real w01 = (1 - t.fx) * t.fy, w11 = t.fx * t.fy;
            real* orow = O + int64_t(n) * C;
            for (int c = 0; c < C; ++c) {
                const real* pl = M + int64_t(c) * H * W;
                orow[c] = w00 * pl[t.y0 * W + t.x0] + w10 * pl[t.y0 * W + t.x1] +
                          w01 * pl[t.y1 * W + t.x0] + w11 * pl[t.y1 * W + t.x1];
            }
        }
    }
    if (detail::want_grad2(map, coords)) {
        Tape& tp = *Tape::active();
        int pm = tp.ensure_leaf(map);
        int pc = tp.ensure_leaf(coords);
        if (pm >= 0 || pc >= 0) {
            auto sm = map.storage();
            tp.record(out, [pm, pc, sm, taps, C, H, W, N](Tape& tape, std::span<const real> g) {
                if (pm >= 0) {
                    auto& buf = tape.grad_buffer(pm);
                    for (int n = 0; n < N; ++n) {
                        const Tap& t = taps[size_t(n)];
                        real w00 = (1 - t.fx) * (1 - t.fy), w10 = t.fx * (1 - t.fy);
                        real w01 = (1 - t.fx) * t.fy, w11 = t.fx * t.fy;
                        const real* grow = g.data() + int64_t(n) * C;
                        for (int c = 0; c < C; ++c) {
                            real* pl = buf.data() + int64_t(c) * H * W;
                            real gv = grow[c];
                            pl[t.y0 * W + t.x0] += w00 * gv;
                            pl[t.y0 * W + t.x1] += w10 * gv;
                            pl[t.y1 * W + t.x0] += w01 * gv;
                            pl[t.y1 * W + t.x1] += w11 * gv;
                        }
                    }
                }
                if (pc >= 0) {
                    auto& buf = tape.grad_buffer(pc);
                    const real* M = sm->values.data();
                    for (int n = 0; n < N; ++n) {
                        const Tap& t = taps[size_t(n)];
                        const real* grow = g.data() + int64_t(n) * C;
                        real gx = 0, gy = 0;
                        for (int c = 0; c < C; ++c) {
                            const real* pl = M + int64_t(c) * H * W;
                            real v00 = pl[t.y0 * W + t.x0], v10 = pl[t.y0 * W + t.x1];
                            real v01 = pl[t.y1 * W + t.x0], v11 = pl[t.y1 * W + t.x1];
                            gx += grow[c] * ((v10 - v00) * (1 - t.fy) + (v11 - v01) * t.fy);
                            gy += grow[c] * ((v01 - v00) * (1 - t.fx) + (v11 - v10) * t.fx);
                        }
                        if (!t.cx) buf[size_t(2 * n)] += gx;
                        if (!t.cy) buf[size_t(2 * n) + 1] += gy;
                    }
                }
            });
        }
    }
    return out;
}

} // namespace ssdnf
