#pragma once

// MSE training with Adam and a stepped learning-rate schedule, RMSE
// evaluation, and input-gradient saliency export. The loop is fully
// deterministic given the seed: shuffles and augmentation streams are derived
// statelessly from (seed, epoch, sample identity), so interrupted runs resume
// bit-exactly.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "tint/dataio.hpp"
#include "tint/gradcheck.hpp"
#include "tint/model.hpp"

namespace tint {

// ----------------------------- config and state -----------------------------

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double base_lr = 1e-5;
    std::vector<std::size_t> decay_epochs = {50, 75};  // lr steps down from these epochs
    double decay_factor = 0.1;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t seed = 42;
    std::size_t checkpoint_every = 0;  // epochs between cadence checkpoints; 0 = best/final only
    bool augment = true;
    std::vector<std::size_t> channels;  // manifest channel subset; empty = all
};

inline void validate_train_config(const TrainConfig& c) {
    if (c.epochs == 0) throw ValueError("train config: epochs must be positive");
    if (c.batch_size == 0) throw ValueError("train config: batch size must be positive");
    if (c.base_lr < 0.0) throw ValueError("train config: learning rate must be non-negative");
    for (std::size_t i = 0; i < c.decay_epochs.size(); ++i) {
        if (c.decay_epochs[i] >= c.epochs)
            throw ValueError("train config: decay epoch beyond training length");
        if (i > 0 && c.decay_epochs[i] <= c.decay_epochs[i - 1])
            throw ValueError("train config: decay epochs must be strictly increasing");
    }
}

namespace detail {

// Ten-fold decay is decimal by construction: shifting the shortest decimal
// exponent takes 1e-5 to exactly 1e-6 and 1e-7, which repeated binary
// multiplication by 0.1 cannot.
inline double shift_decimal_exponent(double value, int down) {
    if (value == 0.0 || !std::isfinite(value)) return value;
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::scientific);
    std::string s(buf, res.ptr);
    auto epos = s.find('e');
    int exp = std::stoi(s.substr(epos + 1));
    s = s.substr(0, epos + 1) + std::to_string(exp - down);
    double out = 0.0;
    std::from_chars(s.data(), s.data() + s.size(), out);
    return out;
}

}  // namespace detail

// base_lr times decay_factor^(number of decay epochs at or before `epoch`);
// the new rate applies from the named epoch onward.
inline double lr_at_epoch(const TrainConfig& c, std::size_t epoch) {
    if (epoch >= c.epochs) throw ValueError("lr_at_epoch: epoch out of range");
    int k = 0;
    for (std::size_t d : c.decay_epochs)
        if (d <= epoch) ++k;
    if (k == 0) return c.base_lr;
    if (c.decay_factor == 0.1) return detail::shift_decimal_exponent(c.base_lr, k);
    double lr = c.base_lr;
    for (int i = 0; i < k; ++i) lr *= c.decay_factor;
    return lr;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return nlohmann::json{{"epochs", c.epochs},
                          {"batch_size", c.batch_size},
                          {"base_lr", c.base_lr},
                          {"decay_epochs", c.decay_epochs},
                          {"decay_factor", c.decay_factor},
                          {"beta1", c.beta1},
                          {"beta2", c.beta2},
                          {"adam_eps", c.adam_eps},
                          {"seed", c.seed},
                          {"checkpoint_every", c.checkpoint_every},
                          {"augment", c.augment}};
}

// Missing keys keep their defaults, so config files may be partial.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.base_lr = j.value("base_lr", c.base_lr);
        c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
        c.decay_factor = j.value("decay_factor", c.decay_factor);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.augment = j.value("augment", c.augment);
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("train config: ") + e.what());
    }
    return c;
}

struct TrainState {
    std::size_t epoch = 0;  // next epoch to run
    std::size_t step = 0;   // completed optimizer steps (Adam timestep)
    double best_val_rmse = std::numeric_limits<double>::infinity();
    std::uint64_t rng_state = 0;  // seed material echo, streams are stateless
    std::vector<Tensor<float>> moment1, moment2;  // parallel to trainable params
};

// ----------------------------- losses and metrics -----------------------------

template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.rank() != 1 || target.rank() != 1)
        throw ShapeError("mse_loss: expected rank-1 prediction and target");
    if (pred.extent(0) != target.extent(0))
        throw ShapeError("mse_loss: length mismatch, " + std::to_string(pred.extent(0)) +
                         " vs " + std::to_string(target.extent(0)));
    if (pred.extent(0) == 0) throw ValueError("mse_loss: empty batch");
    auto diff = sub(pred, target);
    return reduce_mean(mul(diff, diff), 0);
}

inline double rmse(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size()) throw ValueError("rmse: length mismatch");
    if (pred.empty()) throw ValueError("rmse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred[i] - target[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(pred.size()));
}

// ----------------------------- Adam -----------------------------

inline TrainState make_train_state(const TintModel<float>& model, const TrainConfig& cfg) {
    TrainState s;
    s.rng_state = cfg.seed;
    for (const auto& e : model.registry) {
        if (!e.trainable) continue;
        s.moment1.emplace_back(e.tensor.shape());
        s.moment2.emplace_back(e.tensor.shape());
    }
    return s;
}

// One Adam update with bias correction on a raw buffer triple; `t` is the
// 1-based timestep.
inline void adam_update(float* param, float* m, float* v, const float* grad, std::size_t n,
                        std::size_t t, const TrainConfig& cfg, double lr) {
    float c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta1, static_cast<double>(t))));
    float c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta2, static_cast<double>(t))));
    float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    float eps = static_cast<float>(cfg.adam_eps);
    float flr = static_cast<float>(lr);
    for (std::size_t i = 0; i < n; ++i) {
        float gi = grad ? grad[i] : 0.0f;
        m[i] = b1 * m[i] + (1.0f - b1) * gi;
        v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
        param[i] -= flr * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
    }
}

// Applies Adam to every trainable parameter, moments updated in place.
// Parameters with no gradient buffer this step are treated as zero-gradient.
inline void optimizer_step(TintModel<float>& model, TrainState& state, const TrainConfig& cfg,
                           double lr) {
    std::size_t t = state.step + 1;
    std::size_t mi = 0;
    for (auto& e : model.registry) {
        if (!e.trainable) continue;
        auto& m = state.moment1[mi];
        auto& v = state.moment2[mi];
        ++mi;
        if (m.shape() != e.tensor.shape())
            throw ShapeError("optimizer_step: moment shape " + shape_str(m.shape()) +
                             " does not match parameter '" + e.name + "' " +
                             shape_str(e.tensor.shape()));
        const float* g = e.tensor.has_grad() ? e.tensor.grad_view().data() : nullptr;
        adam_update(e.tensor.data().data(), m.data().data(), v.data().data(), g,
                    e.tensor.numel(), t, cfg, lr);
    }
    state.step = t;
}

// ----------------------------- train-state files -----------------------------

inline void save_train_state(const TintModel<float>& model, const TrainState& s,
                             const std::string& path) {
    CheckpointBlob blob;
    nlohmann::json doc{{"kind", "train_state"},
                       {"epoch", s.epoch},
                       {"step", s.step},
                       {"best_val_rmse", s.best_val_rmse},
                       {"rng_state", s.rng_state}};
    blob.config_json = doc.dump();
    std::size_t mi = 0;
    for (const auto& e : model.registry) {
        if (!e.trainable) continue;
        blob.tensors.emplace_back("adam.m." + e.name, s.moment1[mi]);
        blob.tensors.emplace_back("adam.v." + e.name, s.moment2[mi]);
        ++mi;
    }
    write_checkpoint_file(path, blob);
}

inline TrainState load_train_state(const TintModel<float>& model, const std::string& path) {
    CheckpointBlob blob = read_checkpoint_file(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(blob.config_json);
        if (doc.at("kind").get<std::string>() != "train_state")
            throw IoError(path + ": not a train-state file");
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": malformed train-state header: " + e.what());
    }
    TrainState s;
    s.epoch = doc.at("epoch").get<std::size_t>();
    s.step = doc.at("step").get<std::size_t>();
    s.best_val_rmse = doc.at("best_val_rmse").get<double>();
    s.rng_state = doc.at("rng_state").get<std::uint64_t>();

    std::map<std::string, const Tensor<float>*> stored;
    for (const auto& [name, tensor] : blob.tensors) stored.emplace(name, &tensor);
    for (const auto& e : model.registry) {
        if (!e.trainable) continue;
        auto m = stored.find("adam.m." + e.name);
        auto v = stored.find("adam.v." + e.name);
        if (m == stored.end() || v == stored.end())
            throw IoError(path + ": train state is missing moments for '" + e.name + "'");
        if (m->second->shape() != e.tensor.shape())
            throw IoError(path + ": moment shape mismatch for '" + e.name + "'");
        s.moment1.push_back(Tensor<float>(m->second->shape(), m->second->data()));
        s.moment2.push_back(Tensor<float>(v->second->shape(), v->second->data()));
    }
    return s;
}

// ----------------------------- evaluation -----------------------------

struct EvalResult {
    double rmse_knots = 0.0;
    std::vector<double> predictions;
    std::vector<double> residuals;  // prediction - target, in split order
};

// Eval-mode forward over the split in manifest order, resize + normalize only.
template <class TModel>
EvalResult evaluate(TModel& model, const DatasetManifest& manifest, const std::string& split,
                    std::size_t batch_size = 32, const std::vector<std::size_t>& channels = {}) {
    if (manifest.split(split).empty())
        throw ValueError("evaluate: split '" + split + "' is empty");
    BatchOptions opt;
    opt.batch_size = batch_size;
    opt.shuffle = false;
    opt.target_size = model.config.input_size;
    opt.channels = channels;
    EvalResult r;
    std::vector<double> targets;
    for (auto& batch : make_batches(manifest, split, opt)) {
        auto pred = forward(model, batch.images, Mode::eval);
        for (std::size_t i = 0; i < pred.numel(); ++i) {
            r.predictions.push_back(static_cast<double>(pred.data()[i]));
            targets.push_back(static_cast<double>(batch.labels.data()[i]));
        }
    }
    r.residuals.resize(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i)
        r.residuals[i] = r.predictions[i] - targets[i];
    r.rmse_knots = rmse(r.predictions, targets);
    return r;
}

// ----------------------------- fit -----------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_rmse = 0.0;
};

inline std::string format_epoch_record(const EpochRecord& r) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "epoch=%zu step=%zu lr=%.10g train_loss=%.10g val_rmse=%.10g",
                  r.epoch, r.step, r.lr, r.train_loss, r.val_rmse);
    return buf;
}

struct FitResult {
    std::vector<EpochRecord> log;
    double best_val_rmse = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::string best_checkpoint;
    std::string final_checkpoint;
};

namespace detail {

inline std::uint64_t shuffle_seed_for(std::uint64_t seed, std::size_t epoch) {
    return mix_seed(mix_seed(seed, 0x53485546ULL), epoch);  // shuffle stream
}

inline std::uint64_t augment_seed_for(std::uint64_t seed, std::size_t epoch) {
    return mix_seed(mix_seed(seed, 0x41554721ULL), epoch);  // augment stream
}

}  // namespace detail

// Runs the training recipe: per-epoch shuffled batches, MSE + Adam with the
// stepped schedule, validation each epoch, best-val checkpointing, optional
// cadence checkpoints for resume. Deterministic given cfg.seed.
inline FitResult fit(TintModel<float>& model, const DatasetManifest& manifest,
                     const TrainConfig& cfg, const std::string& out_dir,
                     TrainState* resume = nullptr) {
    validate_train_config(cfg);
    if (manifest.split("train").empty()) throw ValueError("fit: train split is empty");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    // record the stats the model was trained with; predict runs standalone
    std::vector<std::size_t> channels = cfg.channels;
    if (channels.empty())
        for (std::size_t i = 0; i < manifest.modalities.size(); ++i) channels.push_back(i);
    if (channels.size() != model.config.in_channels)
        throw ValueError("fit: model expects " + std::to_string(model.config.in_channels) +
                         " channels, selection has " + std::to_string(channels.size()));
    model.normalization.modalities.clear();
    model.normalization.mean.clear();
    model.normalization.std.clear();
    for (std::size_t c : channels) {
        model.normalization.modalities.push_back(manifest.modalities.at(c));
        model.normalization.mean.push_back(manifest.channel_mean.at(c));
        model.normalization.std.push_back(manifest.channel_std.at(c));
    }

    TrainState state = resume ? *resume : make_train_state(model, cfg);
    bool has_val = manifest.splits.count("val") && !manifest.splits.at("val").empty();

    FitResult result;
    result.best_val_rmse = state.best_val_rmse;
    result.best_checkpoint = (fs::path(out_dir) / "best.tckp").string();
    result.final_checkpoint = (fs::path(out_dir) / "final.tckp").string();

    std::ofstream log_file(fs::path(out_dir) / "train_log.txt",
                           resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("fit: cannot open training log in " + out_dir);

    for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        double lr = lr_at_epoch(cfg, epoch);
        BatchOptions opt;
        opt.batch_size = cfg.batch_size;
        opt.shuffle = true;
        opt.shuffle_seed = detail::shuffle_seed_for(cfg.seed, epoch);
        opt.target_size = model.config.input_size;
        opt.channels = channels;
        if (cfg.augment) {
            AugmentConfig aug;
            aug.target_size = model.config.input_size;
            aug.seed = detail::augment_seed_for(cfg.seed, epoch);
            opt.augment = aug;
        }

        double loss_sum = 0.0;
        std::size_t sample_count = 0;
        for (auto& batch : make_batches(manifest, "train", opt)) {
            for (auto& e : model.registry) e.tensor.zero_grad();
            double loss_value = 0.0;
            try {
                Tape<float> tape;
                Tape<float>::Scope scope(tape);
                auto pred = forward(model, batch.images, Mode::train);
                auto loss = mse_loss(pred, batch.labels);
                loss_value = static_cast<double>(loss.item());
                tape.backward(loss);
            } catch (const NumericError& e) {
                throw NumericError("fit: non-finite value at optimizer step " +
                                   std::to_string(state.step + 1) + " (epoch " +
                                   std::to_string(epoch) + "): " + e.what());
            }
            optimizer_step(model, state, cfg, lr);
            std::size_t b = batch.labels.extent(0);
            loss_sum += loss_value * static_cast<double>(b);
            sample_count += b;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.step = state.step;
        rec.lr = lr;
        rec.train_loss = loss_sum / static_cast<double>(sample_count);
        rec.val_rmse = std::numeric_limits<double>::quiet_NaN();
        if (has_val) {
            auto ev = evaluate(model, manifest, "val", cfg.batch_size, channels);
            rec.val_rmse = ev.rmse_knots;
            if (ev.rmse_knots < state.best_val_rmse) {
                state.best_val_rmse = ev.rmse_knots;
                result.best_val_rmse = ev.rmse_knots;
                result.best_epoch = epoch;
                save_checkpoint(model, result.best_checkpoint);
            }
        }
        result.log.push_back(rec);
        log_file << format_epoch_record(rec) << "\n";
        log_file.flush();

        state.epoch = epoch + 1;
        if (cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0) {
            char name[64];
            std::snprintf(name, sizeof(name), "epoch%04zu", epoch + 1);
            save_checkpoint(model, (fs::path(out_dir) / (std::string(name) + ".tckp")).string());
            save_train_state(model, state,
                             (fs::path(out_dir) / (std::string(name) + ".tstate")).string());
        }
    }

    save_checkpoint(model, result.final_checkpoint);
    return result;
}

// ----------------------------- saliency -----------------------------

struct SaliencyResult {
    Tensor<float> map;  // [S, S] in [0,1]
    bool degenerate = false;  // all-zero gradient, map is uniformly zero
};

// |d prediction / d input|, max over channels, min-max normalized.
// The sample is normalized with the model's stored statistics and resized to
// the model input; the map lives at that resolution.
inline SaliencyResult saliency(TintModel<float>& model, const Tensor<float>& sample_channels) {
    if (sample_channels.rank() != 3)
        throw ShapeError("saliency: expected [C,H,W] sample");
    std::size_t C = sample_channels.extent(0);
    if (C != model.config.in_channels)
        throw ShapeError("saliency: sample has " + std::to_string(C) + " channels, model expects " +
                         std::to_string(model.config.in_channels));

    Tensor<float> img = sample_channels;
    if (model.normalization.present()) {
        if (model.normalization.mean.size() != C)
            throw ValueError("saliency: model normalization does not match channel count");
        Sample s;
        s.channels = img;
        DatasetManifest stats;
        stats.channel_mean = model.normalization.mean;
        stats.channel_std = model.normalization.std;
        img = clean_and_normalize(s, stats).channels;
    }
    std::size_t S = model.config.input_size;
    if (img.extent(1) != S || img.extent(2) != S) img = resize_bilinear(img, S);

    Tensor<float> x(Shape{1, C, S, S}, img.data());
    x.set_requires_grad(true);
    {
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        auto pred = forward(model, x, Mode::eval);
        auto y = reduce_sum(pred, 0);  // single-sample batch -> scalar
        tape.backward(y);
    }

    SaliencyResult r;
    r.map = Tensor<float>(Shape{S, S});
    const auto& g = x.grad();
    float max_abs = 0.0f, min_abs = std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < S * S; ++i) {
        float best = 0.0f;
        for (std::size_t c = 0; c < C; ++c)
            best = std::max(best, std::abs(g[c * S * S + i]));
        r.map.data()[i] = best;
        max_abs = std::max(max_abs, best);
        min_abs = std::min(min_abs, best);
    }
    if (max_abs == 0.0f) {
        r.degenerate = true;
        return r;
    }
    float span = max_abs - min_abs;
    for (auto& v : r.map.data()) v = span > 0.0f ? (v - min_abs) / span : 1.0f;
    return r;
}

inline void write_saliency_pgm(const SaliencyResult& r, const std::string& path) {
    std::size_t S = r.map.extent(0);
    std::vector<std::uint8_t> pixels(S * S);
    for (std::size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = static_cast<std::uint8_t>(std::lround(r.map.data()[i] * 255.0f));
    write_pgm(path, pixels, S, S);
}

}  // namespace tint
