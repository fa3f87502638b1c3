#pragma once

// The model's building blocks as parameterized forward functions: patch
// embedding, positional embedding, MBConv, downsampling, MLP, BatchNorm,
// LayerNorm. Norm layout follows the convs-get-BatchNorm / linears-get-
// LayerNorm split; GELU is the only activation.

#include <string>
#include <utility>

#include "tint/common.hpp"
#include "tint/tensor.hpp"

namespace tint {

enum class Mode { train, eval };

// ----------------------------- initialization -----------------------------

inline constexpr double kInitStddev = 0.02;

template <class T>
void init_truncated_normal(Tensor<T>& t, Rng& rng, double stddev = kInitStddev) {
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stddev));
}

template <class T>
void init_normal(Tensor<T>& t, Rng& rng, double stddev = kInitStddev) {
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
}

// ----------------------------- primitive params -----------------------------

// Convs directly followed by BatchNorm carry no bias: a bias ahead of a
// train-mode BatchNorm cancels exactly and its gradient is identically zero.
template <class T>
struct Conv2dParams {
    Tensor<T> weight;  // [Cout, Cin, K, K]
    Tensor<T> bias;    // [Cout], undefined for conv+BN pairs

    static Conv2dParams make(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
                             bool with_bias = true) {
        Conv2dParams p;
        p.weight = Tensor<T>(Shape{cout, cin, k, k});
        init_truncated_normal(p.weight, rng);
        if (with_bias) p.bias = Tensor<T>(Shape{cout});
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight, true);
        if (bias.defined()) f(prefix + ".bias", bias, true);
    }
};

template <class T>
struct DepthwiseConv2dParams {
    Tensor<T> weight;  // [C, 1, K, K]
    Tensor<T> bias;    // [C], undefined for conv+BN pairs

    static DepthwiseConv2dParams make(std::size_t c, std::size_t k, Rng& rng,
                                      bool with_bias = true) {
        DepthwiseConv2dParams p;
        p.weight = Tensor<T>(Shape{c, 1, k, k});
        init_truncated_normal(p.weight, rng);
        if (with_bias) p.bias = Tensor<T>(Shape{c});
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight, true);
        if (bias.defined()) f(prefix + ".bias", bias, true);
    }
};

template <class T>
struct LinearParams {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    static LinearParams make(std::size_t in, std::size_t out, Rng& rng) {
        LinearParams p;
        p.weight = Tensor<T>(Shape{in, out});
        init_truncated_normal(p.weight, rng);
        p.bias = Tensor<T>(Shape{out});
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight, true);
        f(prefix + ".bias", bias, true);
    }
};

template <class T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
    return add(matmul(x, p.weight), p.bias);
}

// ----------------------------- norms -----------------------------

template <class T>
struct BatchNormParams {
    Tensor<T> gamma, beta;               // [C], trainable
    Tensor<T> running_mean, running_var; // [C], buffers
    T momentum = T(0.9);                 // fraction of the old running value kept
    T eps = T(1e-5);

    static BatchNormParams make(std::size_t c) {
        BatchNormParams p;
        p.gamma = Tensor<T>(Shape{c}, T(1));
        p.beta = Tensor<T>(Shape{c});
        p.running_mean = Tensor<T>(Shape{c});
        p.running_var = Tensor<T>(Shape{c}, T(1));
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gamma", gamma, true);
        f(prefix + ".beta", beta, true);
        f(prefix + ".running_mean", running_mean, false);
        f(prefix + ".running_var", running_var, false);
    }
};

template <class T>
struct LayerNormParams {
    Tensor<T> gamma, beta;  // [C]
    T eps = T(1e-5);

    static LayerNormParams make(std::size_t c) {
        LayerNormParams p;
        p.gamma = Tensor<T>(Shape{c}, T(1));
        p.beta = Tensor<T>(Shape{c});
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gamma", gamma, true);
        f(prefix + ".beta", beta, true);
    }
};

// Train mode normalizes over batch x spatial per channel and updates running
// statistics; eval mode uses the running statistics only.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode) {
    if (x.rank() != 4) throw ShapeError("batchnorm: expected [B,C,H,W], got " + shape_str(x.shape()));
    std::size_t C = x.extent(1);
    if (C != p.gamma.extent(0))
        throw ShapeError("batchnorm: channel count " + std::to_string(C) +
                         " does not match params (" + std::to_string(p.gamma.extent(0)) + ")");
    Shape cshape{1, C, 1, 1};
    auto gamma = reshape(p.gamma, cshape);
    auto beta = reshape(p.beta, cshape);
    if (mode == Mode::train) {
        auto mean = reduce_mean(x, std::vector<std::size_t>{0, 2, 3}, true);
        auto centered = sub(x, mean);
        auto var = reduce_mean(mul(centered, centered), std::vector<std::size_t>{0, 2, 3}, true);
        auto normed = div(centered, sqrt_op(scalar_add(var, p.eps)));
        auto out = add(mul(normed, gamma), beta);

        // running stats update happens off-tape
        std::size_t n = x.extent(0) * x.extent(2) * x.extent(3);
        T unbias = n > 1 ? static_cast<T>(n) / static_cast<T>(n - 1) : T(1);
        for (std::size_t c = 0; c < C; ++c) {
            p.running_mean.data()[c] =
                p.momentum * p.running_mean.data()[c] + (T(1) - p.momentum) * mean.data()[c];
            p.running_var.data()[c] = p.momentum * p.running_var.data()[c] +
                                      (T(1) - p.momentum) * var.data()[c] * unbias;
        }
        return out;
    }
    auto rm = reshape(p.running_mean, cshape);
    auto rv = reshape(p.running_var, cshape);
    auto normed = div(sub(x, rm), sqrt_op(scalar_add(rv, p.eps)));
    return add(mul(normed, gamma), beta);
}

// Normalizes over the last axis per token.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const LayerNormParams<T>& p) {
    if (x.rank() == 0) throw ShapeError("layernorm: scalar input");
    std::size_t C = x.extent(x.rank() - 1);
    if (C != p.gamma.extent(0))
        throw ShapeError("layernorm: width " + std::to_string(C) + " does not match params (" +
                         std::to_string(p.gamma.extent(0)) + ")");
    std::size_t last = x.rank() - 1;
    auto mean = reduce_mean(x, last, true);
    auto centered = sub(x, mean);
    auto var = reduce_mean(mul(centered, centered), last, true);
    auto normed = div(centered, sqrt_op(scalar_add(var, p.eps)));
    return add(mul(normed, p.gamma), p.beta);
}

// ----------------------------- layout helpers -----------------------------

// [B,C,H,W] -> [B, H*W, C], row-major spatial order
template <class T>
Tensor<T> spatial_to_tokens(const Tensor<T>& x) {
    std::size_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    return transpose(reshape(x, {B, C, H * W}), {0, 2, 1});
}

// [B, L, C] -> [B,C,H,W] with L == H*W
template <class T>
Tensor<T> tokens_to_spatial(const Tensor<T>& x, std::size_t H, std::size_t W) {
    std::size_t B = x.extent(0), L = x.extent(1), C = x.extent(2);
    if (L != H * W) throw ShapeError("tokens_to_spatial: token count mismatch");
    return reshape(transpose(x, {0, 2, 1}), {B, C, H, W});
}

template <class T>
Tensor<T> bchw_to_bhwc(const Tensor<T>& x) {
    return transpose(x, {0, 2, 3, 1});
}

template <class T>
Tensor<T> bhwc_to_bchw(const Tensor<T>& x) {
    return transpose(x, {0, 3, 1, 2});
}

// ----------------------------- patch embedding -----------------------------

template <class T>
struct PatchEmbedParams {
    Conv2dParams<T> conv1;  // Cin -> C1/2, k3 s2 p1
    BatchNormParams<T> bn1;
    Conv2dParams<T> conv2;  // C1/2 -> C1, k3 s2 p1
    BatchNormParams<T> bn2;

    static PatchEmbedParams make(std::size_t cin, std::size_t c1, Rng& rng) {
        if (c1 % 2 != 0) throw ValueError("patch embedding width must be even");
        PatchEmbedParams p;
        p.conv1 = Conv2dParams<T>::make(cin, c1 / 2, 3, rng, false);
        p.bn1 = BatchNormParams<T>::make(c1 / 2);
        p.conv2 = Conv2dParams<T>::make(c1 / 2, c1, 3, rng, false);
        p.bn2 = BatchNormParams<T>::make(c1);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        conv1.visit(prefix + ".conv1", f);
        bn1.visit(prefix + ".bn1", f);
        conv2.visit(prefix + ".conv2", f);
        bn2.visit(prefix + ".bn2", f);
    }
};

// Two stride-2 convs quarter the resolution; output tokens [B, (H/4)*(W/4), C1].
template <class T>
Tensor<T> patch_embed(const Tensor<T>& image, PatchEmbedParams<T>& p, Mode mode) {
    if (image.rank() != 4) throw ShapeError("patch_embed: expected [B,Cin,H,W]");
    std::size_t H = image.extent(2), W = image.extent(3);
    if (H % 4 != 0 || W % 4 != 0)
        throw ShapeError("patch_embed: spatial size " + std::to_string(H) + "x" +
                         std::to_string(W) + " not divisible by 4");
    auto h = gelu(batchnorm(conv2d(image, p.conv1.weight, p.conv1.bias, 2, 1), p.bn1, mode));
    h = gelu(batchnorm(conv2d(h, p.conv2.weight, p.conv2.bias, 2, 1), p.bn2, mode));
    return spatial_to_tokens(h);
}

// ----------------------------- positional embedding -----------------------------

template <class T>
struct PositionalEmbedding {
    Tensor<T> table;  // [L, C]

    static PositionalEmbedding make(std::size_t tokens, std::size_t width, Rng& rng) {
        PositionalEmbedding p;
        p.table = Tensor<T>(Shape{tokens, width});
        init_normal(p.table, rng);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".table", table, true);
    }
};

template <class T>
Tensor<T> add_positional(const Tensor<T>& tokens, const PositionalEmbedding<T>& pe) {
    if (tokens.rank() != 3 || tokens.extent(1) != pe.table.extent(0) ||
        tokens.extent(2) != pe.table.extent(1))
        throw ShapeError("add_positional: tokens " + shape_str(tokens.shape()) +
                         " do not match table " + shape_str(pe.table.shape()));
    return add(tokens, pe.table);
}

// ----------------------------- MBConv -----------------------------

template <class T>
struct MBConvParams {
    Conv2dParams<T> expand;   // 1x1, C -> e*C
    BatchNormParams<T> bn1;
    DepthwiseConv2dParams<T> dw;  // 3x3
    BatchNormParams<T> bn2;
    Conv2dParams<T> project;  // 1x1, e*C -> C
    BatchNormParams<T> bn3;

    static MBConvParams make(std::size_t c, std::size_t expand_ratio, Rng& rng) {
        std::size_t mid = c * expand_ratio;
        MBConvParams p;
        p.expand = Conv2dParams<T>::make(c, mid, 1, rng, false);
        p.bn1 = BatchNormParams<T>::make(mid);
        p.dw = DepthwiseConv2dParams<T>::make(mid, 3, rng, false);
        p.bn2 = BatchNormParams<T>::make(mid);
        p.project = Conv2dParams<T>::make(mid, c, 1, rng, false);
        p.bn3 = BatchNormParams<T>::make(c);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        expand.visit(prefix + ".expand", f);
        bn1.visit(prefix + ".bn1", f);
        dw.visit(prefix + ".dw", f);
        bn2.visit(prefix + ".bn2", f);
        project.visit(prefix + ".project", f);
        bn3.visit(prefix + ".bn3", f);
    }
};

// x + project(dw(expand(x))); all strides 1, shape preserved.
template <class T>
Tensor<T> mbconv(const Tensor<T>& x, MBConvParams<T>& p, Mode mode) {
    if (x.rank() != 4) throw ShapeError("mbconv: expected [B,C,H,W]");
    if (x.extent(1) != p.expand.weight.extent(1))
        throw ShapeError("mbconv: channel count " + std::to_string(x.extent(1)) +
                         " does not match params (" + std::to_string(p.expand.weight.extent(1)) +
                         ")");
    auto h = gelu(batchnorm(conv2d(x, p.expand.weight, p.expand.bias, 1, 0), p.bn1, mode));
    h = gelu(batchnorm(depthwise_conv2d(h, p.dw.weight, p.dw.bias, 1, 1), p.bn2, mode));
    h = batchnorm(conv2d(h, p.project.weight, p.project.bias, 1, 0), p.bn3, mode);
    return add(x, h);
}

// ----------------------------- downsample -----------------------------

template <class T>
struct DownsampleParams {
    Conv2dParams<T> expand;       // 1x1, C -> e*C
    BatchNormParams<T> bn1;
    DepthwiseConv2dParams<T> dw;  // 3x3 stride 2
    BatchNormParams<T> bn2;
    Conv2dParams<T> project;      // 1x1, e*C -> C'
    BatchNormParams<T> bn3;

    static DownsampleParams make(std::size_t cin, std::size_t cout, std::size_t expand_ratio,
                                 Rng& rng) {
        std::size_t mid = cin * expand_ratio;
        DownsampleParams p;
        p.expand = Conv2dParams<T>::make(cin, mid, 1, rng, false);
        p.bn1 = BatchNormParams<T>::make(mid);
        p.dw = DepthwiseConv2dParams<T>::make(mid, 3, rng, false);
        p.bn2 = BatchNormParams<T>::make(mid);
        p.project = Conv2dParams<T>::make(mid, cout, 1, rng, false);
        p.bn3 = BatchNormParams<T>::make(cout);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        expand.visit(prefix + ".expand", f);
        bn1.visit(prefix + ".bn1", f);
        dw.visit(prefix + ".dw", f);
        bn2.visit(prefix + ".bn2", f);
        project.visit(prefix + ".project", f);
        bn3.visit(prefix + ".bn3", f);
    }
};

// Halves the spatial resolution exactly and moves to the next stage width.
// Same conv/norm/activation pattern as MBConv, minus the residual.
template <class T>
Tensor<T> downsample(const Tensor<T>& x, DownsampleParams<T>& p, Mode mode) {
    if (x.rank() != 4) throw ShapeError("downsample: expected [B,C,H,W]");
    if (x.extent(2) % 2 != 0 || x.extent(3) % 2 != 0)
        throw ShapeError("downsample: spatial extents must be even, got " +
                         shape_str(x.shape()));
    auto h = gelu(batchnorm(conv2d(x, p.expand.weight, p.expand.bias, 1, 0), p.bn1, mode));
    h = gelu(batchnorm(depthwise_conv2d(h, p.dw.weight, p.dw.bias, 2, 1), p.bn2, mode));
    h = batchnorm(conv2d(h, p.project.weight, p.project.bias, 1, 0), p.bn3, mode);
    return h;
}

// ----------------------------- MLP -----------------------------

template <class T>
struct MLPParams {
    LayerNormParams<T> ln;  // pre-norm
    LinearParams<T> fc1;    // C -> r*C
    LinearParams<T> fc2;    // r*C -> C

    static MLPParams make(std::size_t c, std::size_t ratio, Rng& rng) {
        MLPParams p;
        p.ln = LayerNormParams<T>::make(c);
        p.fc1 = LinearParams<T>::make(c, c * ratio, rng);
        p.fc2 = LinearParams<T>::make(c * ratio, c, rng);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        ln.visit(prefix + ".ln", f);
        fc1.visit(prefix + ".fc1", f);
        fc2.visit(prefix + ".fc2", f);
    }
};

// MLP(LayerNorm(x)) without the residual; callers compose x + mlp_block(x).
template <class T>
Tensor<T> mlp_block(const Tensor<T>& x, const MLPParams<T>& p) {
    if (x.extent(x.rank() - 1) != p.fc1.weight.extent(0))
        throw ShapeError("mlp_block: width " + std::to_string(x.extent(x.rank() - 1)) +
                         " does not match params (" + std::to_string(p.fc1.weight.extent(0)) +
                         ")");
    auto h = layernorm(x, p.ln);
    h = gelu(linear(h, p.fc1));
    return linear(h, p.fc2);
}

}  // namespace tint
