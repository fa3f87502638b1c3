#pragma once

// Dataset container, manifest, preprocessing, augmentation, and the synthetic
// vortex generator used as a ground-truth oracle at desk scale.
//
// On-disk layout: manifest.json at the dataset root, TNSR tensor files
// referenced by relative path. Frames are square, channels-first, float32,
// natively 201x201 for TCIR-shaped data.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tint/common.hpp"
#include "tint/serialize.hpp"
#include "tint/tensor.hpp"

namespace tint {

inline constexpr int kManifestVersion = 1;
inline constexpr std::size_t kNativeFrameSize = 201;

struct Sample {
    Tensor<float> channels;  // [C, H, W]
    float intensity = 0.0f;  // knots
    std::string storm_id;
    int frame_index = 0;
};

struct ManifestEntry {
    std::string path;  // relative to the manifest directory
    double intensity = 0.0;
    std::string storm_id;
    int frame_index = 0;
};

struct DatasetManifest {
    int version = kManifestVersion;
    std::vector<std::string> modalities;  // subset of {IR, WV, PMW}
    std::vector<double> channel_mean;     // train-split statistics
    std::vector<double> channel_std;
    std::map<std::string, std::vector<ManifestEntry>> splits;  // train/val/test
    std::string root_dir;  // resolved at load time, not serialized

    const std::vector<ManifestEntry>& split(const std::string& name) const {
        auto it = splits.find(name);
        if (it == splits.end()) throw ValueError("unknown split: " + name);
        return it->second;
    }
};

namespace detail {

inline const std::set<std::string>& known_modalities() {
    static const std::set<std::string> k = {"IR", "WV", "PMW"};
    return k;
}

inline const std::set<std::string>& known_splits() {
    static const std::set<std::string> k = {"train", "val", "test"};
    return k;
}

}  // namespace detail

// ----------------------------- manifest io -----------------------------

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["version"] = m.version;
    j["modalities"] = m.modalities;
    j["channel_mean"] = m.channel_mean;
    j["channel_std"] = m.channel_std;
    nlohmann::json splits = nlohmann::json::object();
    for (const auto& [name, entries] : m.splits) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& e : entries) {
            arr.push_back({{"path", e.path},
                           {"intensity", e.intensity},
                           {"storm_id", e.storm_id},
                           {"frame_index", e.frame_index}});
        }
        splits[name] = std::move(arr);
    }
    j["splits"] = std::move(splits);
    return j;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + path + ": " + e.what());
    }
    DatasetManifest m;
    try {
        m.version = j.at("version").get<int>();
        m.modalities = j.at("modalities").get<std::vector<std::string>>();
        m.channel_mean = j.at("channel_mean").get<std::vector<double>>();
        m.channel_std = j.at("channel_std").get<std::vector<double>>();
        for (const auto& [name, arr] : j.at("splits").items()) {
            auto& entries = m.splits[name];
            for (const auto& e : arr) {
                ManifestEntry me;
                me.path = e.at("path").get<std::string>();
                me.intensity = e.at("intensity").get<double>();
                me.storm_id = e.at("storm_id").get<std::string>();
                me.frame_index = e.at("frame_index").get<int>();
                entries.push_back(std::move(me));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest " + path + " missing required field: " + e.what());
    }
    m.root_dir = std::filesystem::path(path).parent_path().string();
    if (m.root_dir.empty()) m.root_dir = ".";

    if (m.version != kManifestVersion)
        throw IoError("unsupported manifest version " + std::to_string(m.version));
    if (m.modalities.empty()) throw IoError("manifest modality list is empty");
    std::set<std::string> seen;
    for (const auto& mod : m.modalities) {
        if (!detail::known_modalities().count(mod))
            throw IoError("unknown modality '" + mod + "' (expected IR, WV, PMW)");
        if (!seen.insert(mod).second) throw IoError("duplicate modality '" + mod + "'");
    }
    if (m.channel_mean.size() != m.modalities.size() ||
        m.channel_std.size() != m.modalities.size())
        throw IoError("channel statistics length does not match modality count");
    for (std::size_t c = 0; c < m.channel_std.size(); ++c) {
        if (!(m.channel_std[c] > 0.0))
            throw IoError("channel std must be positive (channel " + std::to_string(c) + ")");
    }
    for (const auto& [name, entries] : m.splits) {
        if (!detail::known_splits().count(name))
            throw IoError("unknown split name '" + name + "'");
        for (const auto& e : entries) {
            if (e.intensity < 0.0)
                throw IoError("negative intensity for " + e.storm_id + " frame " +
                              std::to_string(e.frame_index));
            auto full = std::filesystem::path(m.root_dir) / e.path;
            if (!std::filesystem::exists(full))
                throw IoError("missing tensor file: " + full.string());
        }
    }
    return m;
}

// ----------------------------- sample loading -----------------------------

inline Sample load_sample(const DatasetManifest& m, const ManifestEntry& e) {
    auto full = (std::filesystem::path(m.root_dir) / e.path).string();
    Sample s;
    s.channels = read_tensor_file(full);
    if (s.channels.rank() != 3)
        throw IoError(full + ": expected rank-3 [C,H,W] frame, got " +
                      shape_str(s.channels.shape()));
    if (s.channels.extent(0) != m.modalities.size())
        throw IoError(full + ": channel count " + std::to_string(s.channels.extent(0)) +
                      " does not match manifest modalities (" +
                      std::to_string(m.modalities.size()) + ")");
    if (s.channels.extent(1) != s.channels.extent(2) || s.channels.extent(1) < 2)
        throw IoError(full + ": frames must be square with extent >= 2");
    s.intensity = static_cast<float>(e.intensity);
    s.storm_id = e.storm_id;
    s.frame_index = e.frame_index;
    return s;
}

// (x - mean)/std per channel, then NaN/Inf -> 0 (the channel mean in
// normalized space).
inline Sample clean_and_normalize(const Sample& s, const DatasetManifest& m) {
    std::size_t C = s.channels.extent(0);
    if (C != m.channel_mean.size())
        throw ValueError("clean_and_normalize: channel count mismatch");
    std::size_t plane = s.channels.extent(1) * s.channels.extent(2);
    Sample out = s;
    out.channels = Tensor<float>(s.channels.shape());
    for (std::size_t c = 0; c < C; ++c) {
        float mean = static_cast<float>(m.channel_mean[c]);
        float inv = static_cast<float>(1.0 / m.channel_std[c]);
        const float* src = s.channels.data().data() + c * plane;
        float* dst = out.channels.data().data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            float v = (src[i] - mean) * inv;
            dst[i] = std::isfinite(v) ? v : 0.0f;
        }
    }
    return out;
}

// ----------------------------- geometry -----------------------------

// Corner-aligned bilinear resampling of a square or rectangular [C,H,W] image.
inline Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t size) {
    if (img.rank() != 3) throw ShapeError("resize_bilinear: expected [C,H,W]");
    std::size_t C = img.extent(0), H = img.extent(1), W = img.extent(2);
    if (H < 2 || W < 2) throw ValueError("resize_bilinear: source extent must be >= 2");
    if (size < 2) throw ValueError("resize_bilinear: degenerate target size");
    Tensor<float> out(Shape{C, size, size});
    double sy = static_cast<double>(H - 1) / static_cast<double>(size - 1);
    double sx = static_cast<double>(W - 1) / static_cast<double>(size - 1);
    for (std::size_t c = 0; c < C; ++c) {
        const float* src = img.data().data() + c * H * W;
        float* dst = out.data().data() + c * size * size;
        for (std::size_t y = 0; y < size; ++y) {
            double fy = y * sy;
            std::size_t y0 = static_cast<std::size_t>(fy);
            if (y0 >= H - 1) y0 = H - 2;
            double wy = fy - y0;
            for (std::size_t x = 0; x < size; ++x) {
                double fx = x * sx;
                std::size_t x0 = static_cast<std::size_t>(fx);
                if (x0 >= W - 1) x0 = W - 2;
                double wx = fx - x0;
                double v00 = src[y0 * W + x0];
                double v01 = src[y0 * W + x0 + 1];
                double v10 = src[(y0 + 1) * W + x0];
                double v11 = src[(y0 + 1) * W + x0 + 1];
                dst[y * size + x] = static_cast<float>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                                       wy * ((1 - wx) * v10 + wx * v11));
            }
        }
    }
    return out;
}

// Counter-clockwise rotation about the image center, bilinear resampling,
// zero fill outside the source frame.
inline Tensor<float> rotate_image(const Tensor<float>& img, double angle_deg) {
    if (img.rank() != 3) throw ShapeError("rotate_image: expected [C,H,W]");
    std::size_t C = img.extent(0), H = img.extent(1), W = img.extent(2);
    if (H != W) throw ValueError("rotate_image: frame must be square");
    double theta = angle_deg * 3.14159265358979323846 / 180.0;
    double ct = std::cos(theta), st = std::sin(theta);
    double cy = (static_cast<double>(H) - 1.0) / 2.0;
    double cx = (static_cast<double>(W) - 1.0) / 2.0;
    Tensor<float> out(img.shape());
    for (std::size_t c = 0; c < C; ++c) {
        const float* src = img.data().data() + c * H * W;
        float* dst = out.data().data() + c * H * W;
        for (std::size_t y = 0; y < H; ++y) {
            double dy = static_cast<double>(y) - cy;
            for (std::size_t x = 0; x < W; ++x) {
                double dx = static_cast<double>(x) - cx;
                // inverse map: rotate destination offset by -theta
                double sxf = ct * dx + st * dy + cx;
                double syf = -st * dx + ct * dy + cy;
                float v = 0.0f;
                if (sxf >= 0.0 && sxf <= W - 1.0 && syf >= 0.0 && syf <= H - 1.0) {
                    std::size_t x0 = static_cast<std::size_t>(sxf);
                    std::size_t y0 = static_cast<std::size_t>(syf);
                    if (x0 >= W - 1) x0 = W - 2;
                    if (y0 >= H - 1) y0 = H - 2;
                    double wx = sxf - x0, wy = syf - y0;
                    double v00 = src[y0 * W + x0];
                    double v01 = src[y0 * W + x0 + 1];
                    double v10 = src[(y0 + 1) * W + x0];
                    double v11 = src[(y0 + 1) * W + x0 + 1];
                    v = static_cast<float>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                           wy * ((1 - wx) * v10 + wx * v11));
                }
                dst[y * W + x] = v;
            }
        }
    }
    return out;
}

inline Tensor<float> flip_horizontal(const Tensor<float>& img) {
    std::size_t C = img.extent(0), H = img.extent(1), W = img.extent(2);
    Tensor<float> out(img.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                out.data()[(c * H + y) * W + x] = img.data()[(c * H + y) * W + (W - 1 - x)];
    return out;
}

inline Tensor<float> flip_vertical(const Tensor<float>& img) {
    std::size_t C = img.extent(0), H = img.extent(1), W = img.extent(2);
    Tensor<float> out(img.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                out.data()[(c * H + y) * W + x] = img.data()[(c * H + (H - 1 - y)) * W + x];
    return out;
}

// ----------------------------- augmentation -----------------------------

struct AugmentConfig {
    std::size_t target_size = 224;
    double rotation_max_deg = 20.0;  // angle ~ U[0, rotation_max_deg]
    double flip_prob = 0.5;
    std::uint64_t seed = 0;
};

// Stream key intrinsic to the sample, so augmentations do not depend on batch
// composition or on which other samples are present.
inline std::uint64_t sample_stream_key(const std::string& storm_id, int frame_index) {
    return fnv1a(storm_id) ^ splitmix64(static_cast<std::uint64_t>(frame_index) + 0x9e37ULL);
}

inline Tensor<float> random_rotation(const Tensor<float>& img, Rng& rng,
                                     double max_deg = 20.0) {
    double angle = rng.uniform(0.0, max_deg);
    return rotate_image(img, angle);
}

inline Tensor<float> random_flip(const Tensor<float>& img, Rng& rng, double prob = 0.5) {
    bool h = rng.uniform() < prob;
    bool v = rng.uniform() < prob;
    Tensor<float> out = img;
    if (h) out = flip_horizontal(out);
    if (v) out = flip_vertical(out);
    return out;
}

inline Tensor<float> augment_sample(const Tensor<float>& channels, const AugmentConfig& cfg,
                                    std::uint64_t stream_key) {
    Rng rng(mix_seed(cfg.seed, stream_key));
    Tensor<float> img = random_rotation(channels, rng, cfg.rotation_max_deg);
    img = random_flip(img, rng, cfg.flip_prob);
    return img;
}

// ----------------------------- synthetic generator -----------------------------

struct SynthSpec {
    std::size_t count = 100;
    std::uint64_t seed = 42;
    double amplitude_lo = 0.2, amplitude_hi = 1.0;
    double sigma_lo = 8.0, sigma_hi = 40.0;  // core radius, pixels
    double noise_sigma = 0.05;
    std::vector<std::string> modalities = {"IR"};
    std::size_t frame_size = kNativeFrameSize;
};

// intensity law: exact deterministic function of (A, sigma)
inline double synth_intensity(double amplitude, double sigma) {
    return 20.0 + 120.0 * amplitude + 30.0 * (40.0 - sigma) / 32.0;
}

namespace detail {

// fixed per-modality affine distortion of the IR field
inline std::pair<double, double> modality_affine(const std::string& mod) {
    if (mod == "IR") return {1.0, 0.0};
    if (mod == "WV") return {0.85, 0.05};
    if (mod == "PMW") return {0.70, -0.02};
    throw ValueError("unknown modality '" + mod + "'");
}

}  // namespace detail

inline DatasetManifest synth_generate(const SynthSpec& spec, const std::string& out_dir) {
    if (spec.count == 0) throw ValueError("synth_generate: count must be positive");
    for (const auto& mod : spec.modalities) detail::modality_affine(mod);  // validate early

    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "tensors");

    std::size_t n = spec.count;
    std::size_t n_train = (n * 8) / 10;
    std::size_t n_val = n / 10;
    std::size_t S = spec.frame_size;
    std::size_t C = spec.modalities.size();
    double center = (static_cast<double>(S) - 1.0) / 2.0;

    DatasetManifest m;
    m.modalities = spec.modalities;
    m.channel_mean.assign(C, 0.0);
    m.channel_std.assign(C, 1.0);
    m.splits["train"] = {};
    m.splits["val"] = {};
    m.splits["test"] = {};
    m.root_dir = out_dir;

    std::vector<double> sum(C, 0.0), sumsq(C, 0.0);
    std::size_t train_pixels = 0;

    char name[32];
    for (std::size_t k = 0; k < n; ++k) {
        Rng rng(mix_seed(spec.seed, k));
        double A = rng.uniform(spec.amplitude_lo, spec.amplitude_hi);
        double sigma = rng.uniform(spec.sigma_lo, spec.sigma_hi);
        double label = synth_intensity(A, sigma);

        Tensor<float> frame(Shape{C, S, S});
        for (std::size_t c = 0; c < C; ++c) {
            auto [scale, shift] = detail::modality_affine(spec.modalities[c]);
            float* plane = frame.data().data() + c * S * S;
            for (std::size_t y = 0; y < S; ++y) {
                double dy = static_cast<double>(y) - center;
                for (std::size_t x = 0; x < S; ++x) {
                    double dx = static_cast<double>(x) - center;
                    double r2 = dx * dx + dy * dy;
                    double base = A * std::exp(-r2 / (2.0 * sigma * sigma));
                    double v = scale * base + shift + spec.noise_sigma * rng.normal();
                    plane[y * S + x] = static_cast<float>(v);
                }
            }
        }

        std::snprintf(name, sizeof(name), "SYN%05zu", k);
        ManifestEntry e;
        e.storm_id = name;
        e.frame_index = 0;
        e.intensity = label;
        e.path = std::string("tensors/") + name + "_0.tnsr";
        write_tensor_file((fs::path(out_dir) / e.path).string(), frame);

        std::string split = k < n_train ? "train" : (k < n_train + n_val ? "val" : "test");
        if (split == "train") {
            std::size_t plane = S * S;
            for (std::size_t c = 0; c < C; ++c) {
                const float* p = frame.data().data() + c * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    sum[c] += p[i];
                    sumsq[c] += static_cast<double>(p[i]) * p[i];
                }
            }
            train_pixels += S * S;
        }
        m.splits[split].push_back(std::move(e));
    }

    if (!m.splits["train"].empty()) {
        for (std::size_t c = 0; c < C; ++c) {
            double mean = sum[c] / static_cast<double>(train_pixels);
            double var = sumsq[c] / static_cast<double>(train_pixels) - mean * mean;
            m.channel_mean[c] = mean;
            m.channel_std[c] = std::sqrt(std::max(var, 1e-12));
        }
    }

    write_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

// ----------------------------- batching -----------------------------

struct Batch {
    Tensor<float> images;  // [b, C, S, S]
    Tensor<float> labels;  // [b]
    std::vector<std::size_t> sample_indices;  // positions in the split list
};

struct BatchOptions {
    std::size_t batch_size = 32;
    std::uint64_t shuffle_seed = 0;
    bool shuffle = true;
    std::size_t target_size = 224;
    std::optional<AugmentConfig> augment;
    std::vector<std::size_t> channels;  // empty = all manifest channels
};

// Deterministic batch stream: Fisher-Yates shuffle from shuffle_seed, final
// partial batch included, per-sample augmentation streams keyed by sample
// identity so batch composition cannot change augmentation outcomes.
inline std::vector<Batch> make_batches(const DatasetManifest& m, const std::string& split,
                                       const BatchOptions& opt) {
    const auto& entries = m.split(split);
    if (entries.empty()) throw ValueError("make_batches: split '" + split + "' is empty");
    if (opt.batch_size == 0) throw ValueError("make_batches: batch size must be positive");

    std::vector<std::size_t> order(entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (opt.shuffle) {
        Rng rng(opt.shuffle_seed);
        rng.shuffle(order);
    }

    std::vector<std::size_t> channels = opt.channels;
    if (channels.empty()) {
        channels.resize(m.modalities.size());
        for (std::size_t i = 0; i < channels.size(); ++i) channels[i] = i;
    }
    for (std::size_t c : channels)
        if (c >= m.modalities.size())
            throw ValueError("make_batches: channel index " + std::to_string(c) +
                             " out of range");

    std::vector<Batch> batches;
    std::size_t S = opt.target_size;
    std::size_t C = channels.size();
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
        std::size_t b = std::min(opt.batch_size, order.size() - start);
        Batch batch;
        batch.images = Tensor<float>(Shape{b, C, S, S});
        batch.labels = Tensor<float>(Shape{b});
        for (std::size_t i = 0; i < b; ++i) {
            const auto& e = entries[order[start + i]];
            Sample s = clean_and_normalize(load_sample(m, e), m);
            Tensor<float> img = s.channels;
            if (opt.augment) {
                img = augment_sample(img, *opt.augment,
                                     sample_stream_key(e.storm_id, e.frame_index));
            }
            img = resize_bilinear(img, S);
            std::size_t plane = S * S;
            for (std::size_t c = 0; c < C; ++c) {
                const float* src = img.data().data() + channels[c] * plane;
                float* dst = batch.images.data().data() + (i * C + c) * plane;
                std::copy(src, src + plane, dst);
            }
            batch.labels.data()[i] = s.intensity;
            batch.sample_indices.push_back(order[start + i]);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace tint
