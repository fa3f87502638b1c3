#pragma once

// Four-stage network assembly: patch embedding, optional positional embedding,
// an MBConv stage, three windowed-transformer stages joined by downsampling
// blocks, and a scalar regression head (token mean pool + linear). Owns the
// named-parameter registry and checkpoint serialization.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tint/attention.hpp"
#include "tint/common.hpp"
#include "tint/nn.hpp"
#include "tint/serialize.hpp"
#include "tint/tensor.hpp"

namespace tint {

// ----------------------------- config -----------------------------

struct ModelConfig {
    std::size_t input_size = 224;
    std::size_t in_channels = 1;
    std::array<std::size_t, 4> embed_dims = {64, 128, 160, 320};
    std::array<std::size_t, 4> depths = {2, 2, 6, 2};
    std::array<std::size_t, 3> num_heads = {4, 5, 10};     // stages 2-4
    std::array<std::size_t, 3> window_sizes = {7, 14, 7};  // stages 2-4
    std::size_t mlp_ratio = 4;
    std::size_t mbconv_expand = 4;
    bool use_positional = true;
    bool use_attention_bias = true;
    std::uint64_t seed = 42;

    // stage resolutions: input/4, /8, /16, /32
    std::size_t stage_resolution(std::size_t stage) const {
        return input_size >> (2 + stage);
    }
};

// seconds-fast geometry for gradient checks and CI
inline ModelConfig test_model_config() {
    ModelConfig c;
    c.input_size = 32;
    c.in_channels = 1;
    c.embed_dims = {8, 16, 16, 16};
    c.depths = {1, 1, 1, 1};
    c.num_heads = {2, 2, 2};
    c.window_sizes = {4, 2, 1};
    return c;
}

inline void validate_config(const ModelConfig& c) {
    if (c.input_size == 0 || c.input_size % 32 != 0)
        throw ValueError("config: input_size must be a positive multiple of 32, got " +
                         std::to_string(c.input_size));
    if (c.in_channels < 1 || c.in_channels > 3)
        throw ValueError("config: in_channels must be between 1 and 3, got " +
                         std::to_string(c.in_channels));
    for (std::size_t d : c.embed_dims)
        if (d == 0) throw ValueError("config: embed_dims entries must be positive");
    if (c.embed_dims[0] % 2 != 0)
        throw ValueError("config: embed_dims[0] must be even (patch embedding halves it)");
    if (c.mlp_ratio == 0 || c.mbconv_expand == 0)
        throw ValueError("config: mlp_ratio and mbconv_expand must be positive");
    for (std::size_t s = 0; s < 3; ++s) {
        if (c.num_heads[s] == 0 || c.embed_dims[s + 1] % c.num_heads[s] != 0)
            throw ValueError("config: stage " + std::to_string(s + 2) + " width " +
                             std::to_string(c.embed_dims[s + 1]) + " not divisible by " +
                             std::to_string(c.num_heads[s]) + " heads");
        std::size_t res = c.input_size >> (3 + s);
        if (c.window_sizes[s] == 0 || res % c.window_sizes[s] != 0)
            throw ValueError("config: stage " + std::to_string(s + 2) + " resolution " +
                             std::to_string(res) + " not divisible by window " +
                             std::to_string(c.window_sizes[s]));
    }
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"input_size", c.input_size},
                          {"in_channels", c.in_channels},
                          {"embed_dims", c.embed_dims},
                          {"depths", c.depths},
                          {"num_heads", c.num_heads},
                          {"window_sizes", c.window_sizes},
                          {"mlp_ratio", c.mlp_ratio},
                          {"mbconv_expand", c.mbconv_expand},
                          {"use_positional", c.use_positional},
                          {"use_attention_bias", c.use_attention_bias},
                          {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.input_size = j.at("input_size").get<std::size_t>();
        c.in_channels = j.at("in_channels").get<std::size_t>();
        c.embed_dims = j.at("embed_dims").get<std::array<std::size_t, 4>>();
        c.depths = j.at("depths").get<std::array<std::size_t, 4>>();
        c.num_heads = j.at("num_heads").get<std::array<std::size_t, 3>>();
        c.window_sizes = j.at("window_sizes").get<std::array<std::size_t, 3>>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        c.mbconv_expand = j.at("mbconv_expand").get<std::size_t>();
        c.use_positional = j.at("use_positional").get<bool>();
        c.use_attention_bias = j.at("use_attention_bias").get<bool>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("model config: ") + e.what());
    }
    return c;
}

// ----------------------------- model -----------------------------

template <class T>
struct ParamEntry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

// Per-channel normalization carried with the model so prediction on raw
// frames is self-contained.
struct NormalizationInfo {
    std::vector<std::string> modalities;
    std::vector<double> mean;
    std::vector<double> std;

    bool present() const { return !mean.empty(); }
};

template <class T>
struct TintModel {
    ModelConfig config;
    NormalizationInfo normalization;

    PatchEmbedParams<T> patch;
    PositionalEmbedding<T> pos;
    std::vector<MBConvParams<T>> stage1;
    DownsampleParams<T> down1, down2, down3;
    std::vector<TransformerBlockParams<T>> stage2, stage3, stage4;
    Tensor<T> head_w;  // [C4]
    Tensor<T> head_b;  // scalar

    std::vector<ParamEntry<T>> registry;  // deterministic insertion order

    Tensor<T>* find(const std::string& name) {
        for (auto& e : registry)
            if (e.name == name) return &e.tensor;
        return nullptr;
    }
};

namespace detail {

template <class T>
void build_registry(TintModel<T>& m) {
    m.registry.clear();
    auto reg = [&](const std::string& name, Tensor<T>& t, bool trainable) {
        t.set_requires_grad(trainable);
        m.registry.push_back(ParamEntry<T>{name, t, trainable});
    };
    m.patch.visit("patch_embed", reg);
    reg("pos_embed.table", m.pos.table, true);
    for (std::size_t i = 0; i < m.stage1.size(); ++i)
        m.stage1[i].visit("stage1.block" + std::to_string(i), reg);
    m.down1.visit("down1", reg);
    for (std::size_t i = 0; i < m.stage2.size(); ++i)
        m.stage2[i].visit("stage2.block" + std::to_string(i), reg);
    m.down2.visit("down2", reg);
    for (std::size_t i = 0; i < m.stage3.size(); ++i)
        m.stage3[i].visit("stage3.block" + std::to_string(i), reg);
    m.down3.visit("down3", reg);
    for (std::size_t i = 0; i < m.stage4.size(); ++i)
        m.stage4[i].visit("stage4.block" + std::to_string(i), reg);
    reg("head.weight", m.head_w, true);
    reg("head.bias", m.head_b, true);
}

}  // namespace detail

template <class T>
TintModel<T> build(const ModelConfig& config) {
    validate_config(config);
    TintModel<T> m;
    m.config = config;
    Rng rng(config.seed);

    std::size_t c1 = config.embed_dims[0];
    m.patch = PatchEmbedParams<T>::make(config.in_channels, c1, rng);
    std::size_t tokens = (config.input_size / 4) * (config.input_size / 4);
    m.pos = PositionalEmbedding<T>::make(tokens, c1, rng);

    for (std::size_t i = 0; i < config.depths[0]; ++i)
        m.stage1.push_back(MBConvParams<T>::make(c1, config.mbconv_expand, rng));
    m.down1 = DownsampleParams<T>::make(c1, config.embed_dims[1], config.mbconv_expand, rng);

    auto make_stage = [&](std::size_t stage_idx) {
        std::vector<TransformerBlockParams<T>> blocks;
        for (std::size_t i = 0; i < config.depths[stage_idx]; ++i)
            blocks.push_back(TransformerBlockParams<T>::make(
                config.embed_dims[stage_idx], config.num_heads[stage_idx - 1],
                config.window_sizes[stage_idx - 1], config.mlp_ratio, rng));
        return blocks;
    };
    m.stage2 = make_stage(1);
    m.down2 = DownsampleParams<T>::make(config.embed_dims[1], config.embed_dims[2],
                                        config.mbconv_expand, rng);
    m.stage3 = make_stage(2);
    m.down3 = DownsampleParams<T>::make(config.embed_dims[2], config.embed_dims[3],
                                        config.mbconv_expand, rng);
    m.stage4 = make_stage(3);

    m.head_w = Tensor<T>(Shape{config.embed_dims[3]});
    init_truncated_normal(m.head_w, rng);
    m.head_b = Tensor<T>(Shape{});

    detail::build_registry(m);
    return m;
}

// ----------------------------- forward -----------------------------

// Stage-boundary features, populated on request; used by identity and
// equivariance tests.
template <class T>
struct ForwardTrace {
    Tensor<T> tokens_after_embed;           // [B, L, C1], positional included
    std::array<Tensor<T>, 4> stage_input;   // features entering each stage
    std::array<Tensor<T>, 4> stage_output;  // features leaving each stage
};

template <class T>
Tensor<T> forward(TintModel<T>& m, const Tensor<T>& images, Mode mode,
                  ForwardTrace<T>* trace = nullptr) {
    const auto& cfg = m.config;
    if (images.rank() != 4 || images.extent(1) != cfg.in_channels ||
        images.extent(2) != cfg.input_size || images.extent(3) != cfg.input_size)
        throw ShapeError("forward: expected images [B," + std::to_string(cfg.in_channels) + "," +
                         std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                         "], got " + shape_str(images.shape()));

    auto tokens = patch_embed(images, m.patch, mode);
    if (cfg.use_positional) tokens = add_positional(tokens, m.pos);
    if (trace) trace->tokens_after_embed = tokens;

    std::size_t r1 = cfg.stage_resolution(0);
    auto x = tokens_to_spatial(tokens, r1, r1);

    if (trace) trace->stage_input[0] = x;
    for (auto& block : m.stage1) x = mbconv(x, block, mode);
    if (trace) trace->stage_output[0] = x;

    x = downsample(x, m.down1, mode);

    auto run_stage = [&](std::vector<TransformerBlockParams<T>>& blocks, std::size_t stage_idx,
                         Tensor<T> input) {
        std::size_t w = cfg.window_sizes[stage_idx - 1];
        auto h = bchw_to_bhwc(input);
        if (trace) trace->stage_input[stage_idx] = h;
        for (auto& block : blocks)
            h = transformer_block(h, block, w, cfg.use_attention_bias);
        if (trace) trace->stage_output[stage_idx] = h;
        return bhwc_to_bchw(h);
    };

    x = run_stage(m.stage2, 1, x);
    x = downsample(x, m.down2, mode);
    x = run_stage(m.stage3, 2, x);
    x = downsample(x, m.down3, mode);
    x = run_stage(m.stage4, 3, x);

    auto final_tokens = spatial_to_tokens(x);          // [B, L4, C4]
    auto pooled = reduce_mean(final_tokens, 1);        // [B, C4]
    std::size_t c4 = cfg.embed_dims[3];
    auto scores = matmul(pooled, reshape(m.head_w, {c4, 1}));  // [B, 1]
    return add(reshape(scores, {images.extent(0)}), m.head_b);
}

template <class T, class F>
void for_each_batchnorm(TintModel<T>& m, F&& f) {
    f(m.patch.bn1);
    f(m.patch.bn2);
    for (auto& b : m.stage1) {
        f(b.bn1);
        f(b.bn2);
        f(b.bn3);
    }
    for (auto* d : {&m.down1, &m.down2, &m.down3}) {
        f(d->bn1);
        f(d->bn2);
        f(d->bn3);
    }
}

// Adopts the batch statistics of `images` as the running statistics: one
// train-mode pass with momentum forced to zero. Eval-mode forwards then see
// realistically scaled activations even on a freshly initialized model.
template <class T>
void calibrate_batchnorm(TintModel<T>& m, const Tensor<T>& images) {
    std::vector<T> saved;
    for_each_batchnorm(m, [&](BatchNormParams<T>& bn) {
        saved.push_back(bn.momentum);
        bn.momentum = T(0);
    });
    forward(m, images, Mode::train);
    std::size_t i = 0;
    for_each_batchnorm(m, [&](BatchNormParams<T>& bn) { bn.momentum = saved[i++]; });
}

template <class T>
std::size_t count_params(const TintModel<T>& m) {
    std::size_t n = 0;
    for (const auto& e : m.registry)
        if (e.trainable) n += e.tensor.numel();
    return n;
}

// token counts along the resolution ladder: input/4, /8, /16, /32 squared
inline std::array<std::size_t, 4> token_ladder(const ModelConfig& c) {
    std::array<std::size_t, 4> out{};
    for (std::size_t s = 0; s < 4; ++s) {
        std::size_t r = c.stage_resolution(s);
        out[s] = r * r;
    }
    return out;
}

// ----------------------------- checkpoints -----------------------------

inline nlohmann::json normalization_to_json(const NormalizationInfo& n) {
    if (!n.present()) return nullptr;
    return nlohmann::json{
        {"modalities", n.modalities}, {"mean", n.mean}, {"std", n.std}};
}

inline NormalizationInfo normalization_from_json(const nlohmann::json& j) {
    NormalizationInfo n;
    if (j.is_null()) return n;
    n.modalities = j.at("modalities").get<std::vector<std::string>>();
    n.mean = j.at("mean").get<std::vector<double>>();
    n.std = j.at("std").get<std::vector<double>>();
    return n;
}

inline void save_checkpoint(TintModel<float>& m, const std::string& path) {
    CheckpointBlob blob;
    nlohmann::json doc{{"model", config_to_json(m.config)},
                       {"normalization", normalization_to_json(m.normalization)}};
    blob.config_json = doc.dump();
    for (auto& e : m.registry) blob.tensors.emplace_back(e.name, e.tensor);
    write_checkpoint_file(path, blob);
}

inline TintModel<float> load_checkpoint(const std::string& path) {
    CheckpointBlob blob = read_checkpoint_file(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(blob.config_json);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": malformed checkpoint config: " + e.what());
    }
    ModelConfig cfg = config_from_json(doc.at("model"));
    TintModel<float> m = build<float>(cfg);
    if (doc.contains("normalization"))
        m.normalization = normalization_from_json(doc.at("normalization"));

    std::map<std::string, const Tensor<float>*> stored;
    for (const auto& [name, tensor] : blob.tensors) {
        if (!stored.emplace(name, &tensor).second)
            throw IoError(path + ": duplicate tensor '" + name + "'");
    }
    if (stored.size() != m.registry.size())
        throw IoError(path + ": checkpoint holds " + std::to_string(stored.size()) +
                      " tensors, model expects " + std::to_string(m.registry.size()));
    for (auto& e : m.registry) {
        auto it = stored.find(e.name);
        if (it == stored.end())
            throw IoError(path + ": checkpoint is missing tensor '" + e.name + "'");
        if (it->second->shape() != e.tensor.shape())
            throw IoError(path + ": tensor '" + e.name + "' has shape " +
                          shape_str(it->second->shape()) + ", model expects " +
                          shape_str(e.tensor.shape()));
        e.tensor.data() = it->second->data();
    }
    return m;
}

}  // namespace tint
