#pragma once

// N-dimensional row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor<T> is a shared handle to an immutable value buffer plus an optional
// gradient buffer. Ops record backward closures on the thread-local active
// Tape<T>; Tape::backward replays them in reverse order, so gradient
// accumulation order is fixed by tape order and results are bit-reproducible.
// Every public op verifies its output is finite and throws NumericError
// otherwise.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tint/common.hpp"

namespace tint {

template <class T>
struct TensorImpl {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until backward touches it
    bool requires_grad = false;
    const void* tape = nullptr;  // tape that recorded the producing op
    int node = -1;               // producing node index on that tape
};

template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl<T>>()) {
        impl_->shape = std::move(shape);
        impl_->value.assign(numel_of(impl_->shape), fill);
        impl_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl<T>>()) {
        if (numel_of(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->value = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->value.size(); }
    std::size_t extent(std::size_t axis) const { return impl_->shape[axis]; }

    std::vector<T>& data() { return impl_->value; }
    const std::vector<T>& data() const { return impl_->value; }
    T& at(std::size_t i) { return impl_->value[i]; }
    T at(std::size_t i) const { return impl_->value[i]; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->value[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<T>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
        return impl_->grad;
    }
    const std::vector<T>& grad_view() const { return impl_->grad; }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    TensorImpl<T>* impl() const { return impl_.get(); }

    // identity of the underlying buffer, not value equality
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

// ----------------------------- tape -----------------------------

template <class T>
class Tape {
public:
    struct Node {
        const char* op;
        std::function<void()> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // RAII activation; ops record only while a tape is active on this thread.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_) { active_ = &t; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* active() { return active_; }

    void record(const char* op, Tensor<T>& out, std::function<void()> backward) {
        out.impl()->tape = this;
        out.impl()->node = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{op, std::move(backward)});
    }

    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays every node once, newest first.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ValueError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
        if (loss.impl()->tape != this)
            throw ValueError("backward: loss tensor was not produced under this tape");
        loss.impl()->grad.assign(1, T(1));
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            nodes_[i].backward();
        }
    }

private:
    static inline thread_local Tape* active_ = nullptr;
    std::vector<Node> nodes_;
};

template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
    tape.backward(loss);
}

namespace detail {

template <class T>
bool grad_wanted(const Tensor<T>& t) {
    return Tape<T>::active() != nullptr && t.requires_grad();
}

template <class T>
void mark_output(const char* op, Tensor<T>& out, bool any_input_grad, std::function<void()> bwd) {
    auto* tape = Tape<T>::active();
    if (!tape) return;
    // Tag every output produced under the tape so backward() accepts losses
    // that turn out to be constants; only grad-carrying paths get a node.
    out.impl()->tape = tape;
    if (any_input_grad) {
        out.set_requires_grad(true);
        tape->record(op, out, std::move(bwd));
    }
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.data()) {
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
}

// If the output was never touched by backward its grad is identically zero
// and the node can be skipped.
template <class T>
const std::vector<T>* out_grad(const Tensor<T>& out) {
    return out.has_grad() ? &out.impl()->grad : nullptr;
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Broadcast result shape, numpy rules: right-aligned, extent-1 stretches.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `shape` viewed as `out_shape`, zero on stretched axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out_shape) {
    auto st = row_major_strides(shape);
    std::vector<std::size_t> r(out_shape.size(), 0);
    std::size_t off = out_shape.size() - shape.size();
    for (std::size_t i = 0; i < shape.size(); ++i) {
        r[off + i] = shape[i] == 1 ? 0 : st[i];
    }
    return r;
}

// Sum `g` (shaped out_shape) down to `target` shape; exact reverse of broadcast.
template <class T>
void reduce_grad_to(const std::vector<T>& g, const Shape& out_shape, const Shape& target,
                    std::vector<T>& acc) {
    std::size_t r = out_shape.size();
    auto tstr = broadcast_strides(target, out_shape);
    std::vector<std::size_t> idx(r, 0);
    std::size_t n = numel_of(out_shape);
    std::size_t toff = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        acc[toff] += g[lin];
        for (std::size_t ax = r; ax-- > 0;) {
            idx[ax]++;
            toff += tstr[ax];
            if (idx[ax] < out_shape[ax]) break;
            toff -= tstr[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

}  // namespace detail

// ----------------------------- elementwise binary -----------------------------

template <class T, class FwdFn, class BwdFn>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd, BwdFn bwd) {
    Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), name);
    Tensor<T> out(out_shape);
    std::size_t n = out.numel();
    auto astr = detail::broadcast_strides(a.shape(), out_shape);
    auto bstr = detail::broadcast_strides(b.shape(), out_shape);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    std::vector<std::size_t> idx(out_shape.size(), 0);
    std::size_t ai = 0, bi = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        ov[lin] = fwd(av[ai], bv[bi]);
        for (std::size_t ax = out_shape.size(); ax-- > 0;) {
            idx[ax]++;
            ai += astr[ax];
            bi += bstr[ax];
            if (idx[ax] < out_shape[ax]) break;
            ai -= astr[ax] * out_shape[ax];
            bi -= bstr[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    detail::check_finite(out, name);

    bool ga = detail::grad_wanted(a), gb = detail::grad_wanted(b);
    detail::mark_output<T>(name, out, ga || gb, [a, b, out, out_shape, ga, gb, bwd]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        std::size_t n = out.numel();
        auto astr = detail::broadcast_strides(a.shape(), out_shape);
        auto bstr = detail::broadcast_strides(b.shape(), out_shape);
        std::vector<T> da, db;
        if (ga) da.assign(n, T(0));
        if (gb) db.assign(n, T(0));
        const auto& av = a.data();
        const auto& bv = b.data();
        std::vector<std::size_t> idx(out_shape.size(), 0);
        std::size_t ai = 0, bi = 0;
        for (std::size_t lin = 0; lin < n; ++lin) {
            auto [dda, ddb] = bwd(av[ai], bv[bi], (*og)[lin]);
            if (ga) da[lin] = dda;
            if (gb) db[lin] = ddb;
            for (std::size_t ax = out_shape.size(); ax-- > 0;) {
                idx[ax]++;
                ai += astr[ax];
                bi += bstr[ax];
                if (idx[ax] < out_shape[ax]) break;
                ai -= astr[ax] * out_shape[ax];
                bi -= bstr[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        if (ga) detail::reduce_grad_to(da, out_shape, a.shape(), const_cast<Tensor<T>&>(a).grad());
        if (gb) detail::reduce_grad_to(db, out_shape, b.shape(), const_cast<Tensor<T>&>(b).grad());
    });
    return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T g) { return std::pair<T, T>{g, g}; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T g) { return std::pair<T, T>{g, -g}; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g) { return std::pair<T, T>{g * y, g * x}; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; },
        [](T x, T y, T g) { return std::pair<T, T>{g / y, -g * x / (y * y)}; });
}

// ----------------------------- elementwise unary -----------------------------

template <class T, class FwdFn, class BwdFn>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, FwdFn fwd, BwdFn bwd) {
    Tensor<T> out(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
    detail::check_finite(out, name);
    detail::mark_output<T>(name, out, detail::grad_wanted(x), [x, out, bwd]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        auto& xg = const_cast<Tensor<T>&>(x).grad();
        const auto& xv = x.data();
        for (std::size_t i = 0; i < xv.size(); ++i) xg[i] += bwd(xv[i], (*og)[i]);
    });
    return out;
}

template <class T>
Tensor<T> scalar_mul(const Tensor<T>& x, T c) {
    return unary_op<T>(
        "scalar_mul", x, [c](T v) { return v * c; }, [c](T, T g) { return g * c; });
}

template <class T>
Tensor<T> scalar_add(const Tensor<T>& x, T c) {
    return unary_op<T>(
        "scalar_add", x, [c](T v) { return v + c; }, [](T, T g) { return g; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
    return scalar_mul(x, T(-1));
}

template <class T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
    return unary_op<T>(
        "sqrt", x, [](T v) { return std::sqrt(v); },
        [](T v, T g) { return g / (T(2) * std::sqrt(v)); });
}

// GELU with the exact Gaussian CDF: x * Phi(x), Phi via erf.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440084436210485L);
    constexpr T inv_sqrt2pi = T(0.39894228040143267793994605993438L);
    return unary_op<T>(
        "gelu", x,
        [=](T v) { return v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2)); },
        [=](T v, T g) {
            T phi = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            return g * (phi + v * pdf);
        });
}

// ----------------------------- shape ops -----------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    Tensor<T> out(std::move(new_shape), x.data());
    detail::mark_output<T>("reshape", out, detail::grad_wanted(x), [x, out]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        auto& xg = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t i = 0; i < og->size(); ++i) xg[i] += (*og)[i];
    });
    return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) throw ShapeError("transpose: permutation rank mismatch");
    std::vector<bool> seen(s.size(), false);
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= s.size() || seen[perm[i]])
            throw ShapeError("transpose: invalid permutation");
        seen[perm[i]] = true;
        out_shape[i] = s[perm[i]];
    }
    Tensor<T> out(out_shape);
    auto xstr = detail::row_major_strides(s);
    // out index -> x index mapping via permuted strides
    std::vector<std::size_t> pstr(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) pstr[i] = xstr[perm[i]];
    const auto& xv = x.data();
    auto& ov = out.data();
    std::vector<std::size_t> idx(out_shape.size(), 0);
    std::size_t xi = 0;
    for (std::size_t lin = 0; lin < ov.size(); ++lin) {
        ov[lin] = xv[xi];
        for (std::size_t ax = out_shape.size(); ax-- > 0;) {
            idx[ax]++;
            xi += pstr[ax];
            if (idx[ax] < out_shape[ax]) break;
            xi -= pstr[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    detail::mark_output<T>("transpose", out, detail::grad_wanted(x), [x, out, out_shape, pstr]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        auto& xg = const_cast<Tensor<T>&>(x).grad();
        std::vector<std::size_t> idx(out_shape.size(), 0);
        std::size_t xi = 0;
        for (std::size_t lin = 0; lin < og->size(); ++lin) {
            xg[xi] += (*og)[lin];
            for (std::size_t ax = out_shape.size(); ax-- > 0;) {
                idx[ax]++;
                xi += pstr[ax];
                if (idx[ax] < out_shape[ax]) break;
                xi -= pstr[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    });
    return out;
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& target) {
    Shape merged = detail::broadcast_shape(x.shape(), target, "broadcast_to");
    if (merged != target)
        throw ShapeError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                         shape_str(target));
    Tensor<T> out(target);
    auto xstr = detail::broadcast_strides(x.shape(), target);
    const auto& xv = x.data();
    auto& ov = out.data();
    std::vector<std::size_t> idx(target.size(), 0);
    std::size_t xi = 0;
    for (std::size_t lin = 0; lin < ov.size(); ++lin) {
        ov[lin] = xv[xi];
        for (std::size_t ax = target.size(); ax-- > 0;) {
            idx[ax]++;
            xi += xstr[ax];
            if (idx[ax] < target[ax]) break;
            xi -= xstr[ax] * target[ax];
            idx[ax] = 0;
        }
    }
    detail::mark_output<T>("broadcast_to", out, detail::grad_wanted(x), [x, out, target]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        detail::reduce_grad_to(*og, target, x.shape(), const_cast<Tensor<T>&>(x).grad());
    });
    return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ValueError("concat: empty input list");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
    Shape out_shape = s0;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != s0[i])
                throw ShapeError("concat: extent mismatch at axis " + std::to_string(i));
        total += s[axis];
    }
    out_shape[axis] = total;
    Tensor<T> out(out_shape);
    // copy in contiguous (outer, extent, inner) chunks
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    auto& ov = out.data();
    std::size_t col = 0;
    std::vector<std::size_t> offsets(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        offsets[p] = col;
        std::size_t ext = parts[p].shape()[axis];
        const auto& pv = parts[p].data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy(pv.begin() + static_cast<std::ptrdiff_t>(o * ext * inner),
                      pv.begin() + static_cast<std::ptrdiff_t>((o + 1) * ext * inner),
                      ov.begin() + static_cast<std::ptrdiff_t>((o * total + col) * inner));
        }
        col += ext;
    }
    bool any = false;
    for (const auto& p : parts) any = any || detail::grad_wanted(p);
    detail::mark_output<T>("concat", out, any, [parts, out, outer, inner, total, offsets]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            if (!parts[p].requires_grad()) continue;
            std::size_t ext = parts[p].numel() / (outer * inner);
            auto& pg = const_cast<Tensor<T>&>(parts[p]).grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const T* src = og->data() + (o * total + offsets[p]) * inner;
                T* dst = pg.data() + o * ext * inner;
                for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw ShapeError("slice: axis out of range");
    if (begin > end || end > s[axis])
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for extent " + std::to_string(s[axis]));
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    Tensor<T> out(out_shape);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    std::size_t ext = s[axis], oext = end - begin;
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy(xv.begin() + static_cast<std::ptrdiff_t>((o * ext + begin) * inner),
                  xv.begin() + static_cast<std::ptrdiff_t>((o * ext + end) * inner),
                  ov.begin() + static_cast<std::ptrdiff_t>(o * oext * inner));
    }
    detail::mark_output<T>("slice", out, detail::grad_wanted(x), [x, out, outer, inner, ext, oext, begin]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        auto& xg = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t o = 0; o < outer; ++o) {
            const T* src = og->data() + o * oext * inner;
            T* dst = xg.data() + (o * ext + begin) * inner;
            for (std::size_t i = 0; i < oext * inner; ++i) dst[i] += src[i];
        }
    });
    return out;
}

// ----------------------------- reductions -----------------------------

namespace detail {

template <class T>
Tensor<T> reduce_impl(const char* name, const Tensor<T>& x, std::vector<std::size_t> axes,
                      bool keepdim, bool mean) {
    const Shape& s = x.shape();
    std::vector<bool> is_red(s.size(), false);
    for (std::size_t a : axes) {
        if (a >= s.size())
            throw ShapeError(std::string(name) + ": axis " + std::to_string(a) +
                             " out of range for shape " + shape_str(s));
        is_red[a] = true;
    }
    Shape out_shape;
    Shape keep_shape(s.size(), 1);
    std::size_t red_n = 1;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (is_red[i]) {
            red_n *= s[i];
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(s[i]);
            keep_shape[i] = s[i];
        }
    }
    Tensor<T> out(out_shape);
    // accumulate via strides of keep_shape broadcast over s
    auto ostr = broadcast_strides(keep_shape, s);
    const auto& xv = x.data();
    auto& ov = out.data();
    std::vector<std::size_t> idx(s.size(), 0);
    std::size_t oi = 0;
    for (std::size_t lin = 0; lin < xv.size(); ++lin) {
        ov[oi] += xv[lin];
        for (std::size_t ax = s.size(); ax-- > 0;) {
            idx[ax]++;
            oi += ostr[ax];
            if (idx[ax] < s[ax]) break;
            oi -= ostr[ax] * s[ax];
            idx[ax] = 0;
        }
    }
    if (mean) {
        T inv = T(1) / static_cast<T>(red_n);
        for (auto& v : ov) v *= inv;
    }
    check_finite(out, name);
    detail::mark_output<T>(name, out, grad_wanted(x), [x, out, ostr, mean, red_n]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        const Shape& s = x.shape();
        auto& xg = const_cast<Tensor<T>&>(x).grad();
        T scale = mean ? T(1) / static_cast<T>(red_n) : T(1);
        std::vector<std::size_t> idx(s.size(), 0);
        std::size_t oi = 0;
        for (std::size_t lin = 0; lin < xg.size(); ++lin) {
            xg[lin] += (*og)[oi] * scale;
            for (std::size_t ax = s.size(); ax-- > 0;) {
                idx[ax]++;
                oi += ostr[ax];
                if (idx[ax] < s[ax]) break;
                oi -= ostr[ax] * s[ax];
                idx[ax] = 0;
            }
        }
    });
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdim = false) {
    return detail::reduce_impl("reduce_sum", x, std::move(axes), keepdim, false);
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdim = false) {
    return detail::reduce_impl("reduce_mean", x, std::move(axes), keepdim, true);
}

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
    return reduce_sum(x, std::vector<std::size_t>{axis}, keepdim);
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
    return reduce_mean(x, std::vector<std::size_t>{axis}, keepdim);
}

// sum of all elements -> scalar
template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    std::vector<std::size_t> axes(x.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return reduce_sum(x, axes, false);
}

// ----------------------------- softmax -----------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(s));
    Tensor<T> out(s);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::size_t ext = s[axis];
    std::size_t outer = x.numel() / (inner * ext);
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * ext * inner + in;
            T mx = xv[base];
            for (std::size_t k = 1; k < ext; ++k) mx = std::max(mx, xv[base + k * inner]);
            T denom = T(0);
            for (std::size_t k = 0; k < ext; ++k) {
                T e = std::exp(xv[base + k * inner] - mx);
                ov[base + k * inner] = e;
                denom += e;
            }
            T inv = T(1) / denom;
            for (std::size_t k = 0; k < ext; ++k) ov[base + k * inner] *= inv;
        }
    }
    detail::check_finite(out, "softmax");
    detail::mark_output<T>("softmax", out, detail::grad_wanted(x), [x, out, outer, inner, ext]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        auto& xg = const_cast<Tensor<T>&>(x).grad();
        const auto& yv = out.data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                std::size_t base = o * ext * inner + in;
                T dot = T(0);
                for (std::size_t k = 0; k < ext; ++k)
                    dot += (*og)[base + k * inner] * yv[base + k * inner];
                for (std::size_t k = 0; k < ext; ++k) {
                    std::size_t i = base + k * inner;
                    xg[i] += yv[i] * ((*og)[i] - dot);
                }
            }
        }
    });
    return out;
}

// ----------------------------- matmul -----------------------------

namespace detail {

inline void batch_offsets(const Shape& batch, const std::vector<std::size_t>& astr,
                          const std::vector<std::size_t>& bstr, std::size_t bi, std::size_t& ao,
                          std::size_t& bo) {
    ao = bo = 0;
    std::size_t rem = bi;
    for (std::size_t ax = batch.size(); ax-- > 0;) {
        std::size_t coord = rem % batch[ax];
        rem /= batch[ax];
        ao += coord * astr[ax];
        bo += coord * bstr[ax];
    }
}

// c[M,N] += a[M,K] (or a^T) * b[K,N] (or b^T); plain ikj loops
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N,
              bool ta, bool tb) {
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            T av = ta ? a[k * M + i] : a[i * K + k];
            if (av == T(0)) continue;
            if (!tb) {
                const T* brow = b + k * N;
                T* crow = c + i * N;
                for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
            } else {
                T* crow = c + i * N;
                for (std::size_t j = 0; j < N; ++j) crow[j] += av * b[j * K + k];
            }
        }
    }
}

}  // namespace detail

// Batched matrix product with leading batch axes broadcast from 1.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " +
                         shape_str(sb));
    std::size_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
    std::size_t K2 = sb[sb.size() - 2], N = sb[sb.size() - 1];
    if (K != K2)
        throw ShapeError("matmul: inner extents disagree: " + shape_str(sa) + " x " + shape_str(sb));
    Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
    Shape batch = detail::broadcast_shape(ba, bb, "matmul");
    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);
    Tensor<T> out(out_shape);

    std::size_t nbatch = numel_of(batch);
    auto astr = detail::broadcast_strides(ba, batch);
    auto bstr = detail::broadcast_strides(bb, batch);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t bi = 0; bi < nbatch; ++bi) {
        std::size_t ao, bo;
        detail::batch_offsets(batch, astr, bstr, bi, ao, bo);
        detail::gemm_acc(av.data() + ao * M * K, bv.data() + bo * K * N, ov.data() + bi * M * N,
                         M, K, N, false, false);
    }
    detail::check_finite(out, "matmul");

    bool ga = detail::grad_wanted(a), gb = detail::grad_wanted(b);
    detail::mark_output<T>("matmul", out, ga || gb,
                           [a, b, out, batch, astr, bstr, M, K, N, ga, gb]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        std::size_t nbatch = numel_of(batch);
        const auto& av = a.data();
        const auto& bv = b.data();
        // broadcast batch axes accumulate naturally: += into the shared slice
        auto* ag = ga ? &const_cast<Tensor<T>&>(a).grad() : nullptr;
        auto* bg = gb ? &const_cast<Tensor<T>&>(b).grad() : nullptr;
        for (std::size_t bi = 0; bi < nbatch; ++bi) {
            std::size_t ao, bo;
            detail::batch_offsets(batch, astr, bstr, bi, ao, bo);
            const T* g = og->data() + bi * M * N;
            if (ag)  // dA = G * B^T
                detail::gemm_acc(g, bv.data() + bo * K * N, ag->data() + ao * M * K, M, N, K,
                                 false, true);
            if (bg)  // dB = A^T * G
                detail::gemm_acc(av.data() + ao * M * K, g, bg->data() + bo * K * N, K, M, N,
                                 true, false);
        }
    });
    return out;
}

// ----------------------------- convolution -----------------------------

namespace detail {

inline std::size_t conv_out_extent(const char* op, std::size_t in, std::size_t k,
                                   std::size_t stride, std::size_t pad) {
    std::ptrdiff_t num = static_cast<std::ptrdiff_t>(in + 2 * pad) - static_cast<std::ptrdiff_t>(k);
    if (num < 0 || stride == 0)
        throw ShapeError(std::string(op) + ": non-positive output extent (input " +
                         std::to_string(in) + ", kernel " + std::to_string(k) + ", stride " +
                         std::to_string(stride) + ", pad " + std::to_string(pad) + ")");
    return static_cast<std::size_t>(num) / stride + 1;
}

}  // namespace detail

// Cross-correlation with zero padding; x[B,Cin,H,W], w[Cout,Cin,Kh,Kw], bias[Cout] optional.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4)
        throw ShapeError("conv2d: expected x[B,Cin,H,W] and w[Cout,Cin,Kh,Kw], got " +
                         shape_str(xs) + " and " + shape_str(ws));
    std::size_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    std::size_t Cout = ws[0], Kh = ws[2], Kw = ws[3];
    if (ws[1] != Cin)
        throw ShapeError("conv2d: weight Cin " + std::to_string(ws[1]) + " != input Cin " +
                         std::to_string(Cin));
    bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.extent(0) != Cout))
        throw ShapeError("conv2d: bias must have shape (Cout)");
    std::size_t Ho = detail::conv_out_extent("conv2d", H, Kh, stride, pad);
    std::size_t Wo = detail::conv_out_extent("conv2d", W, Kw, stride, pad);
    Tensor<T> out(Shape{B, Cout, Ho, Wo});
    const auto& xv = x.data();
    const auto& wv = w.data();
    auto& ov = out.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t co = 0; co < Cout; ++co) {
            T bv = has_bias ? bias.data()[co] : T(0);
            T* oplane = ov.data() + (b * Cout + co) * Ho * Wo;
            for (std::size_t i = 0; i < Ho * Wo; ++i) oplane[i] = bv;
            for (std::size_t ci = 0; ci < Cin; ++ci) {
                const T* xplane = xv.data() + (b * Cin + ci) * H * W;
                const T* wk = wv.data() + (co * Cin + ci) * Kh * Kw;
                for (std::size_t ky = 0; ky < Kh; ++ky) {
                    for (std::size_t kx = 0; kx < Kw; ++kx) {
                        T wval = wk[ky * Kw + kx];
                        if (wval == T(0)) continue;
                        for (std::size_t oy = 0; oy < Ho; ++oy) {
                            std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            const T* xrow = xplane + iy * W;
                            T* orow = oplane + oy * Wo;
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                orow[ox] += wval * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    detail::check_finite(out, "conv2d");

    bool gx = detail::grad_wanted(x), gw = detail::grad_wanted(w);
    bool gb = has_bias && detail::grad_wanted(bias);
    detail::mark_output<T>("conv2d", out, gx || gw || gb,
                           [x, w, bias, out, B, Cin, Cout, H, W, Kh, Kw, Ho, Wo, stride, pad, gx,
                            gw, gb]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        const auto& xv = x.data();
        const auto& wv = w.data();
        auto* xg = gx ? &const_cast<Tensor<T>&>(x).grad() : nullptr;
        auto* wg = gw ? &const_cast<Tensor<T>&>(w).grad() : nullptr;
        auto* bgr = gb ? &const_cast<Tensor<T>&>(bias).grad() : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t co = 0; co < Cout; ++co) {
                const T* gplane = og->data() + (b * Cout + co) * Ho * Wo;
                if (bgr) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gplane[i];
                    (*bgr)[co] += acc;
                }
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                    const T* xplane = xv.data() + (b * Cin + ci) * H * W;
                    const T* wk = wv.data() + (co * Cin + ci) * Kh * Kw;
                    T* xgplane = xg ? xg->data() + (b * Cin + ci) * H * W : nullptr;
                    T* wgk = wg ? wg->data() + (co * Cin + ci) * Kh * Kw : nullptr;
                    for (std::size_t ky = 0; ky < Kh; ++ky) {
                        for (std::size_t kx = 0; kx < Kw; ++kx) {
                            T wval = wk[ky * Kw + kx];
                            T wacc = T(0);
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                const T* grow = gplane + oy * Wo;
                                const T* xrow = xplane + iy * W;
                                T* xgrow = xgplane ? xgplane + iy * W : nullptr;
                                for (std::size_t ox = 0; ox < Wo; ++ox) {
                                    std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                    T g = grow[ox];
                                    if (xgrow) xgrow[ix] += wval * g;
                                    wacc += xrow[ix] * g;
                                }
                            }
                            if (wgk) wgk[ky * Kw + kx] += wacc;
                        }
                    }
                }
            }
        }
    });
    return out;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
    return conv2d(x, w, Tensor<T>(), stride, pad);
}

// One filter per channel, no cross-channel mixing; w[C,1,K,K].
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           std::size_t stride, std::size_t pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != 1)
        throw ShapeError("depthwise_conv2d: expected x[B,C,H,W] and w[C,1,K,K], got " +
                         shape_str(xs) + " and " + shape_str(ws));
    std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (ws[0] != C)
        throw ShapeError("depthwise_conv2d: weight channels " + std::to_string(ws[0]) +
                         " != input channels " + std::to_string(C));
    std::size_t Kh = ws[2], Kw = ws[3];
    bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.extent(0) != C))
        throw ShapeError("depthwise_conv2d: bias must have shape (C)");
    std::size_t Ho = detail::conv_out_extent("depthwise_conv2d", H, Kh, stride, pad);
    std::size_t Wo = detail::conv_out_extent("depthwise_conv2d", W, Kw, stride, pad);
    Tensor<T> out(Shape{B, C, Ho, Wo});
    const auto& xv = x.data();
    const auto& wv = w.data();
    auto& ov = out.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* xplane = xv.data() + (b * C + c) * H * W;
            const T* wk = wv.data() + c * Kh * Kw;
            T* oplane = ov.data() + (b * C + c) * Ho * Wo;
            T bv = has_bias ? bias.data()[c] : T(0);
            for (std::size_t i = 0; i < Ho * Wo; ++i) oplane[i] = bv;
            for (std::size_t ky = 0; ky < Kh; ++ky) {
                for (std::size_t kx = 0; kx < Kw; ++kx) {
                    T wval = wk[ky * Kw + kx];
                    if (wval == T(0)) continue;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                            static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        const T* xrow = xplane + iy * W;
                        T* orow = oplane + oy * Wo;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            orow[ox] += wval * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    detail::check_finite(out, "depthwise_conv2d");

    bool gx = detail::grad_wanted(x), gw = detail::grad_wanted(w);
    bool gb = has_bias && detail::grad_wanted(bias);
    detail::mark_output<T>("depthwise_conv2d", out, gx || gw || gb,
                           [x, w, bias, out, B, C, H, W, Kh, Kw, Ho, Wo, stride, pad, gx, gw, gb]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        const auto& xv = x.data();
        const auto& wv = w.data();
        auto* xg = gx ? &const_cast<Tensor<T>&>(x).grad() : nullptr;
        auto* wg = gw ? &const_cast<Tensor<T>&>(w).grad() : nullptr;
        auto* bgr = gb ? &const_cast<Tensor<T>&>(bias).grad() : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t c = 0; c < C; ++c) {
                const T* gplane = og->data() + (b * C + c) * Ho * Wo;
                const T* xplane = xv.data() + (b * C + c) * H * W;
                const T* wk = wv.data() + c * Kh * Kw;
                T* xgplane = xg ? xg->data() + (b * C + c) * H * W : nullptr;
                T* wgk = wg ? wg->data() + c * Kh * Kw : nullptr;
                if (bgr) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gplane[i];
                    (*bgr)[c] += acc;
                }
                for (std::size_t ky = 0; ky < Kh; ++ky) {
                    for (std::size_t kx = 0; kx < Kw; ++kx) {
                        T wval = wk[ky * Kw + kx];
                        T wacc = T(0);
                        for (std::size_t oy = 0; oy < Ho; ++oy) {
                            std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            const T* grow = gplane + oy * Wo;
                            const T* xrow = xplane + iy * W;
                            T* xgrow = xgplane ? xgplane + iy * W : nullptr;
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                T g = grow[ox];
                                if (xgrow) xgrow[ix] += wval * g;
                                wacc += xrow[ix] * g;
                            }
                        }
                        if (wgk) wgk[ky * Kw + kx] += wacc;
                    }
                }
            }
        }
    });
    return out;
}

template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                           std::size_t pad) {
    return depthwise_conv2d(x, w, Tensor<T>(), stride, pad);
}

}  // namespace tint
