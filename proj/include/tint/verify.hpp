#pragma once

// Block-by-block and whole-model gradient verification against central
// differences, all in float64. Block checks run training-mode forward passes
// (batch statistics differentiated); the full-model check runs the eval-mode
// forward, because train-mode BatchNorm makes shift parameters ahead of the
// next normalization exactly redundant, and a redundant coordinate's
// finite-difference noise swamps the relative-error floor.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tint/gradcheck.hpp"
#include "tint/model.hpp"
#include "tint/train.hpp"

namespace tint {

struct GradCheckReport {
    std::vector<std::pair<std::string, double>> blocks;  // name -> max rel error
    double full_model = 0.0;

    double worst_block() const {
        double w = 0.0;
        for (const auto& [name, err] : blocks) w = std::max(w, err);
        return w;
    }
};

namespace detail {

template <class P>
std::vector<Tensor<double>> trainable_leaves(P& params) {
    std::vector<Tensor<double>> out;
    params.visit("", [&](const std::string&, Tensor<double>& t, bool trainable) {
        if (trainable) out.push_back(t);
    });
    return out;
}

inline Tensor<double> randn_d(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal() * scale;
    return t;
}

}  // namespace detail

// Per-block checks at toy sizes derived from the config's widths. Inputs are
// treated as one extra leaf so both data and parameter gradients are covered.
inline GradCheckReport run_gradcheck(const ModelConfig& cfg, std::uint64_t seed,
                                     double eps = 1e-5) {
    validate_config(cfg);
    GradCheckReport report;
    Rng rng(mix_seed(seed, 0x47524144ULL));

    auto check = [&](const std::string& name, std::vector<Tensor<double>> leaves,
                     const std::function<Tensor<double>()>& loss) {
        std::function<Tensor<double>()> f = loss;
        double err = grad_check_many(f, leaves, eps);
        report.blocks.emplace_back(name, err);
    };

    std::size_t c1 = cfg.embed_dims[0];
    std::size_t c2 = cfg.embed_dims[1];

    {
        auto p = PatchEmbedParams<double>::make(cfg.in_channels, c1, rng);
        auto x = detail::randn_d({1, cfg.in_channels, 8, 8}, rng);
        auto w = detail::randn_d({1, 4, c1}, rng);
        auto leaves = detail::trainable_leaves(p);
        leaves.push_back(x);
        check("patch_embed", leaves,
              [&]() { return sum_all(mul(patch_embed(x, p, Mode::train), w)); });
    }
    {
        auto p = MBConvParams<double>::make(c1, cfg.mbconv_expand, rng);
        auto x = detail::randn_d({1, c1, 6, 6}, rng);
        auto w = detail::randn_d({1, c1, 6, 6}, rng);
        auto leaves = detail::trainable_leaves(p);
        leaves.push_back(x);
        check("mbconv", leaves, [&]() { return sum_all(mul(mbconv(x, p, Mode::train), w)); });
    }
    {
        auto p = DownsampleParams<double>::make(c1, c2, cfg.mbconv_expand, rng);
        auto x = detail::randn_d({1, c1, 4, 4}, rng);
        auto w = detail::randn_d({1, c2, 2, 2}, rng);
        auto leaves = detail::trainable_leaves(p);
        leaves.push_back(x);
        check("downsample", leaves,
              [&]() { return sum_all(mul(downsample(x, p, Mode::train), w)); });
    }
    {
        auto p = AttentionParams<double>::make(c2, cfg.num_heads[0], 2, rng);
        for (auto& v : p.bias_table.data()) v = 0.3 * rng.normal();
        auto z = detail::randn_d({2, 4, c2}, rng);  // two windows of a 2x2 window grid
        auto w = detail::randn_d({2, 4, c2}, rng);
        auto leaves = detail::trainable_leaves(p);
        leaves.push_back(z);
        check("windowed_msa", leaves, [&]() {
            return sum_all(mul(scaled_dot_attention(z, p, attention_bias_lookup(p, 2)), w));
        });
    }
    {
        auto p = DepthwiseConv2dParams<double>::make(c2, 3, rng);
        auto x = detail::randn_d({1, c2, 5, 5}, rng);
        auto w = detail::randn_d({1, c2, 5, 5}, rng);
        auto leaves = detail::trainable_leaves(p);
        leaves.push_back(x);
        check("depthwise_conv", leaves, [&]() {
            return sum_all(mul(depthwise_conv2d(x, p.weight, p.bias, 1, 1), w));
        });
    }
    {
        auto p = MLPParams<double>::make(c2, cfg.mlp_ratio, rng);
        auto x = detail::randn_d({1, 4, c2}, rng);
        auto w = detail::randn_d({1, 4, c2}, rng);
        auto leaves = detail::trainable_leaves(p);
        leaves.push_back(x);
        check("mlp", leaves, [&]() { return sum_all(mul(mlp_block(x, p), w)); });
    }
    {
        auto p = BatchNormParams<double>::make(3);
        for (auto& v : p.gamma.data()) v = 1.0 + 0.3 * rng.normal();
        for (auto& v : p.beta.data()) v = 0.2 * rng.normal();
        auto x = detail::randn_d({2, 3, 4, 4}, rng);
        auto w = detail::randn_d({2, 3, 4, 4}, rng);
        auto leaves = detail::trainable_leaves(p);
        leaves.push_back(x);
        check("batchnorm", leaves,
              [&]() { return sum_all(mul(batchnorm(x, p, Mode::train), w)); });
    }
    {
        auto p = LayerNormParams<double>::make(c2);
        for (auto& v : p.gamma.data()) v = 1.0 + 0.3 * rng.normal();
        auto x = detail::randn_d({2, 5, c2}, rng);
        auto w = detail::randn_d({2, 5, c2}, rng);
        auto leaves = detail::trainable_leaves(p);
        leaves.push_back(x);
        check("layernorm", leaves, [&]() { return sum_all(mul(layernorm(x, p), w)); });
    }
    {
        std::size_t c4 = cfg.embed_dims[3];
        auto hw = detail::randn_d({c4}, rng, 0.1);
        auto hb = Tensor<double>(Shape{}, 0.1 * rng.normal());
        auto v = detail::randn_d({3, c4}, rng);
        auto t = detail::randn_d({3}, rng);
        std::vector<Tensor<double>> leaves{hw, hb, v};
        check("head", leaves, [&]() {
            auto scores = add(reshape(matmul(v, reshape(hw, {c4, 1})), {3}), hb);
            return mse_loss(scores, t);
        });
    }

    // full model: eval-mode MSE on unit-scale data so finite differences stay
    // above rounding noise. Running statistics are calibrated first; at the
    // 0.02-scale initialization a fresh model's eval activations collapse
    // through the depth and shift-parameter gradients drown in the error
    // floor.
    {
        auto model = build<double>(cfg);
        auto images = detail::randn_d({2, cfg.in_channels, cfg.input_size, cfg.input_size}, rng);
        auto targets = detail::randn_d({2}, rng);
        calibrate_batchnorm(model, images);
        std::vector<Tensor<double>> leaves;
        for (auto& e : model.registry)
            if (e.trainable) leaves.push_back(e.tensor);
        std::function<Tensor<double>()> f = [&]() {
            return mse_loss(forward(model, images, Mode::eval), targets);
        };
        report.full_model = grad_check_many(f, leaves, eps);
    }
    return report;
}

}  // namespace tint
