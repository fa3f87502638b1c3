#pragma once

// Windowed multi-head self-attention with a learnable relative-position
// attention bias, plus the transformer block that interleaves a 3x3 depthwise
// convolution between the attention and MLP sublayers.
//
// scaled_dot_attention computes, per head h,
//     A_h = softmax(Q_h K_h^T / sqrt(d) + B_h) V_h
// with Q/K/V projected from the input by W_q/W_k/W_v, the heads concatenated
// and projected by W_O. The residual around the whole MSA is composed by the
// caller; with one head and W_O = I this reduces to the single-head formula
// exactly.

#include <cmath>
#include <string>
#include <vector>

#include "tint/common.hpp"
#include "tint/nn.hpp"
#include "tint/tensor.hpp"

namespace tint {

// ----------------------------- attention params -----------------------------

// Maps each in-window token pair (i, j) to a bias-table row determined solely
// by their relative 2-D offset; (2w-1)^2 distinct offsets exist in a w x w
// window.
inline std::vector<std::size_t> build_bias_index(std::size_t w) {
    std::size_t L = w * w;
    std::size_t span = 2 * w - 1;
    std::vector<std::size_t> index(L * L);
    for (std::size_t i = 0; i < L; ++i) {
        std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i / w);
        std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(i % w);
        for (std::size_t j = 0; j < L; ++j) {
            std::ptrdiff_t yj = static_cast<std::ptrdiff_t>(j / w);
            std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(j % w);
            std::size_t row = static_cast<std::size_t>(yi - yj + static_cast<std::ptrdiff_t>(w) - 1);
            std::size_t col = static_cast<std::size_t>(xi - xj + static_cast<std::ptrdiff_t>(w) - 1);
            index[i * L + j] = row * span + col;
        }
    }
    return index;
}

template <class T>
struct AttentionParams {
    Tensor<T> wq, wk, wv;  // [C, m*d] with m*d == C
    Tensor<T> wo;          // [m*d, C]
    Tensor<T> bias_table;  // [m, (2w-1)^2], zero-initialized
    std::size_t heads = 1;
    std::size_t head_dim = 0;  // d = C/m
    std::size_t window = 1;    // w the bias index was built for
    std::vector<std::size_t> bias_index;

    static AttentionParams make(std::size_t c, std::size_t heads, std::size_t window, Rng& rng) {
        if (heads == 0 || c % heads != 0)
            throw ValueError("attention width " + std::to_string(c) +
                             " is not divisible by head count " + std::to_string(heads));
        AttentionParams p;
        p.heads = heads;
        p.head_dim = c / heads;
        p.window = window;
        p.wq = Tensor<T>(Shape{c, c});
        p.wk = Tensor<T>(Shape{c, c});
        p.wv = Tensor<T>(Shape{c, c});
        p.wo = Tensor<T>(Shape{c, c});
        init_truncated_normal(p.wq, rng);
        init_truncated_normal(p.wk, rng);
        init_truncated_normal(p.wv, rng);
        init_truncated_normal(p.wo, rng);
        std::size_t span = 2 * window - 1;
        p.bias_table = Tensor<T>(Shape{heads, span * span});  // zeros: pure content attention
        p.bias_index = build_bias_index(window);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".wq", wq, true);
        f(prefix + ".wk", wk, true);
        f(prefix + ".wv", wv, true);
        f(prefix + ".wo", wo, true);
        f(prefix + ".bias_table", bias_table, true);
    }
};

// Expands the bias table into B[h,i,j] = table[h, index[i,j]]; differentiable
// gather so the table is learnable.
template <class T>
Tensor<T> attention_bias_lookup(const AttentionParams<T>& p, std::size_t w) {
    if (w != p.window)
        throw ValueError("attention_bias_lookup: params were built for window " +
                         std::to_string(p.window) + ", requested " + std::to_string(w));
    std::size_t L = w * w;
    std::size_t m = p.heads;
    const auto& table = p.bias_table;
    const auto& index = p.bias_index;
    std::size_t rows = table.extent(1);
    Tensor<T> out(Shape{m, L, L});
    for (std::size_t h = 0; h < m; ++h) {
        const T* trow = table.data().data() + h * rows;
        T* oplane = out.data().data() + h * L * L;
        for (std::size_t ij = 0; ij < L * L; ++ij) oplane[ij] = trow[index[ij]];
    }
    detail::mark_output<T>("bias_lookup", out, detail::grad_wanted(table),
                           [table, out, index, m, L, rows]() {
        const auto* og = detail::out_grad(out);
        if (!og) return;
        auto& tg = const_cast<Tensor<T>&>(table).grad();
        for (std::size_t h = 0; h < m; ++h) {
            const T* gplane = og->data() + h * L * L;
            T* grow = tg.data() + h * rows;
            for (std::size_t ij = 0; ij < L * L; ++ij) grow[index[ij]] += gplane[ij];
        }
    });
    return out;
}

// ----------------------------- window partition -----------------------------

// [B,H,W,C] -> [B*(H/w)*(W/w), w*w, C]; windows row-major, tokens row-major
// inside each window. No padding: H and W must divide by w.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t w) {
    if (x.rank() != 4) throw ShapeError("window_partition: expected [B,H,W,C]");
    std::size_t B = x.extent(0), H = x.extent(1), W = x.extent(2), C = x.extent(3);
    if (w == 0 || H % w != 0 || W % w != 0)
        throw ShapeError("window_partition: spatial " + std::to_string(H) + "x" +
                         std::to_string(W) + " not divisible by window " + std::to_string(w));
    auto grid = reshape(x, {B, H / w, w, W / w, w, C});
    auto swapped = transpose(grid, {0, 1, 3, 2, 4, 5});
    return reshape(swapped, {B * (H / w) * (W / w), w * w, C});
}

// Exact inverse of window_partition.
template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t w, std::size_t H, std::size_t W) {
    if (windows.rank() != 3) throw ShapeError("window_reverse: expected [N, w*w, C]");
    if (windows.extent(1) != w * w)
        throw ShapeError("window_reverse: token count " + std::to_string(windows.extent(1)) +
                         " != w*w");
    std::size_t per_image = (H / w) * (W / w);
    if (w == 0 || H % w != 0 || W % w != 0 || per_image == 0 ||
        windows.extent(0) % per_image != 0)
        throw ShapeError("window_reverse: window count " + std::to_string(windows.extent(0)) +
                         " inconsistent with " + std::to_string(H) + "x" + std::to_string(W) +
                         " / window " + std::to_string(w));
    std::size_t B = windows.extent(0) / per_image;
    std::size_t C = windows.extent(2);
    auto grid = reshape(windows, {B, H / w, W / w, w, w, C});
    auto swapped = transpose(grid, {0, 1, 3, 2, 4, 5});
    return reshape(swapped, {B, H, W, C});
}

// ----------------------------- multi-head attention -----------------------------

namespace detail {

template <class T>
struct AttentionInternal {
    Tensor<T> weights;  // [N, m, L, L] post-softmax
    Tensor<T> output;   // [N, L, C]
};

template <class T>
AttentionInternal<T> attention_full(const Tensor<T>& z, const AttentionParams<T>& p,
                                    const Tensor<T>& bias) {
    if (z.rank() != 3) throw ShapeError("scaled_dot_attention: expected [N, L, C]");
    std::size_t N = z.extent(0), L = z.extent(1), C = z.extent(2);
    if (C != p.wq.extent(0))
        throw ShapeError("scaled_dot_attention: width " + std::to_string(C) +
                         " does not match params (" + std::to_string(p.wq.extent(0)) + ")");
    if (C % p.heads != 0)
        throw ValueError("scaled_dot_attention: width " + std::to_string(C) +
                         " not divisible by " + std::to_string(p.heads) + " heads");
    std::size_t m = p.heads, d = p.head_dim;
    if (bias.defined()) {
        Shape want{m, L, L};
        if (bias.shape() != want)
            throw ShapeError("scaled_dot_attention: bias shape " + shape_str(bias.shape()) +
                             ", expected " + shape_str(want));
    }

    auto split_heads = [&](const Tensor<T>& proj) {
        // [N,L,m*d] -> [N,m,L,d]
        return transpose(reshape(proj, {N, L, m, d}), {0, 2, 1, 3});
    };
    auto q = split_heads(matmul(z, p.wq));
    auto k = split_heads(matmul(z, p.wk));
    auto v = split_heads(matmul(z, p.wv));

    auto logits = scalar_mul(matmul(q, transpose(k, {0, 1, 3, 2})),
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    if (bias.defined()) logits = add(logits, bias);
    auto weights = softmax(logits, 3);

    auto ctx = matmul(weights, v);                       // [N,m,L,d]
    auto merged = reshape(transpose(ctx, {0, 2, 1, 3}), {N, L, m * d});
    AttentionInternal<T> r;
    r.weights = weights;
    r.output = matmul(merged, p.wo);
    return r;
}

}  // namespace detail

// MSA output without the residual; the caller adds z.
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& z, const AttentionParams<T>& p,
                               const Tensor<T>& bias = Tensor<T>()) {
    return detail::attention_full(z, p, bias).output;
}

// Post-softmax attention weights [N, m, L, L]; each query row sums to 1.
template <class T>
Tensor<T> attention_weights(const Tensor<T>& z, const AttentionParams<T>& p,
                            const Tensor<T>& bias = Tensor<T>()) {
    return detail::attention_full(z, p, bias).weights;
}

// ----------------------------- transformer block -----------------------------

template <class T>
struct TransformerBlockParams {
    LayerNormParams<T> ln1;            // pre-attention
    AttentionParams<T> attn;
    DepthwiseConv2dParams<T> conv;     // 3x3, between attention and MLP
    MLPParams<T> mlp;                  // carries its own pre-norm

    static TransformerBlockParams make(std::size_t c, std::size_t heads, std::size_t window,
                                       std::size_t mlp_ratio, Rng& rng) {
        TransformerBlockParams p;
        p.ln1 = LayerNormParams<T>::make(c);
        p.attn = AttentionParams<T>::make(c, heads, window, rng);
        p.conv = DepthwiseConv2dParams<T>::make(c, 3, rng);
        p.mlp = MLPParams<T>::make(c, mlp_ratio, rng);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        ln1.visit(prefix + ".ln1", f);
        attn.visit(prefix + ".attn", f);
        conv.visit(prefix + ".conv", f);
        mlp.visit(prefix + ".mlp", f);
    }
};

// a = x + window_attention(LN(x)); b = a + dw3x3(a); out = b + mlp_block(b).
// Every branch starts at zero for zero-initialized weights, so the block is
// an identity map at init when its weights are zeroed.
template <class T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerBlockParams<T>& p,
                            std::size_t w, bool use_attention_bias) {
    if (x.rank() != 4) throw ShapeError("transformer_block: expected [B,H,W,C]");
    std::size_t H = x.extent(1), W = x.extent(2);

    auto windows = window_partition(layernorm(x, p.ln1), w);
    Tensor<T> bias;
    if (use_attention_bias) bias = attention_bias_lookup(p.attn, w);
    auto att = scaled_dot_attention(windows, p.attn, bias);
    auto a = add(x, window_reverse(att, w, H, W));

    auto conv_out = bchw_to_bhwc(
        depthwise_conv2d(bhwc_to_bchw(a), p.conv.weight, p.conv.bias, 1, 1));
    auto b = add(a, conv_out);

    return add(b, mlp_block(b, p.mlp));
}

}  // namespace tint
