// Command-line surface for the engine: dataset synthesis, training,
// evaluation, prediction, gradient checking, saliency export.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
// stdout carries machine-readable key=value result lines; stderr carries
// human diagnostics. Every run echoes its resolved configuration and seed.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tint/dataio.hpp"
#include "tint/model.hpp"
#include "tint/train.hpp"
#include "tint/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::vector<std::string> parse_modalities(const std::string& list) {
    std::vector<std::string> out;
    std::string token;
    for (char ch : list + ",") {
        if (ch == ',') {
            if (!token.empty()) {
                std::string upper;
                for (char c : token) upper.push_back(static_cast<char>(std::toupper(c)));
                out.push_back(upper);
                token.clear();
            }
        } else if (!std::isspace(static_cast<unsigned char>(ch))) {
            token.push_back(ch);
        }
    }
    if (out.empty()) throw tint::ValueError("empty channel list");
    return out;
}

void echo_json(const std::string& prefix, const nlohmann::json& j) {
    for (const auto& [key, value] : j.items())
        std::printf("%s.%s=%s\n", prefix.c_str(), key.c_str(), value.dump().c_str());
}

nlohmann::json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw tint::IoError("cannot open config file: " + path);
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw tint::IoError("malformed config file " + path + ": " + e.what());
    }
}

// map the checkpoint's trained modalities onto manifest channel indices
std::vector<std::size_t> manifest_channels_for(const tint::TintModel<float>& model,
                                               const tint::DatasetManifest& manifest) {
    if (!model.normalization.present()) {
        if (manifest.modalities.size() != model.config.in_channels)
            throw tint::ValueError("checkpoint lacks channel metadata and manifest width " +
                                   std::to_string(manifest.modalities.size()) +
                                   " differs from model input " +
                                   std::to_string(model.config.in_channels));
        std::vector<std::size_t> all(manifest.modalities.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
    }
    std::vector<std::size_t> channels;
    for (const auto& mod : model.normalization.modalities) {
        auto it = std::find(manifest.modalities.begin(), manifest.modalities.end(), mod);
        if (it == manifest.modalities.end())
            throw tint::ValueError("model was trained on modality '" + mod +
                                   "' which the manifest does not provide");
        channels.push_back(static_cast<std::size_t>(it - manifest.modalities.begin()));
    }
    return channels;
}

// ----------------------------- subcommands -----------------------------

struct SynthArgs {
    std::string out_dir;
    std::size_t count = 100;
    std::uint64_t seed = 42;
    std::string channels = "ir";
};

int cmd_synth(const SynthArgs& a) {
    tint::SynthSpec spec;
    spec.count = a.count;
    spec.seed = a.seed;
    spec.modalities = parse_modalities(a.channels);
    std::printf("seed=%llu\n", static_cast<unsigned long long>(spec.seed));
    std::printf("synth.count=%zu\n", spec.count);
    std::printf("synth.channels=%s\n", a.channels.c_str());
    auto manifest = tint::synth_generate(spec, a.out_dir);
    std::printf("train_size=%zu\n", manifest.split("train").size());
    std::printf("val_size=%zu\n", manifest.split("val").size());
    std::printf("test_size=%zu\n", manifest.split("test").size());
    std::printf("manifest=%s\n",
                (std::filesystem::path(a.out_dir) / "manifest.json").string().c_str());
    return kExitOk;
}

struct TrainArgs {
    std::string data_dir;
    std::string config_file;
    std::string out_dir;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> channels;
    std::optional<std::size_t> checkpoint_every;
    bool no_augment = false;
};

int cmd_train(const TrainArgs& a) {
    auto manifest =
        tint::load_manifest((std::filesystem::path(a.data_dir) / "manifest.json").string());

    tint::ModelConfig mcfg;
    tint::TrainConfig tcfg;
    if (!a.config_file.empty()) {
        auto doc = load_config_file(a.config_file);
        if (doc.contains("model")) mcfg = tint::config_from_json(doc.at("model"));
        if (doc.contains("train")) tcfg = tint::train_config_from_json(doc.at("train"));
    }
    if (a.epochs) tcfg.epochs = *a.epochs;
    if (a.batch_size) tcfg.batch_size = *a.batch_size;
    if (a.lr) tcfg.base_lr = *a.lr;
    if (a.seed) tcfg.seed = *a.seed;
    if (a.checkpoint_every) tcfg.checkpoint_every = *a.checkpoint_every;
    if (a.no_augment) tcfg.augment = false;

    // channel selection: explicit flag wins, otherwise all manifest channels
    std::vector<std::size_t> channels;
    if (a.channels) {
        for (const auto& mod : parse_modalities(*a.channels)) {
            auto it = std::find(manifest.modalities.begin(), manifest.modalities.end(), mod);
            if (it == manifest.modalities.end())
                throw tint::ValueError("requested channel '" + mod +
                                       "' is not in the manifest");
            channels.push_back(static_cast<std::size_t>(it - manifest.modalities.begin()));
        }
    } else {
        channels.resize(manifest.modalities.size());
        for (std::size_t i = 0; i < channels.size(); ++i) channels[i] = i;
    }
    mcfg.in_channels = channels.size();
    mcfg.seed = tcfg.seed;
    tcfg.channels = channels;

    std::printf("seed=%llu\n", static_cast<unsigned long long>(tcfg.seed));
    echo_json("config.model", tint::config_to_json(mcfg));
    echo_json("config.train", tint::train_config_to_json(tcfg));

    auto model = tint::build<float>(mcfg);
    std::printf("param_count=%zu\n", tint::count_params(model));
    auto result = tint::fit(model, manifest, tcfg, a.out_dir);
    if (!result.log.empty())
        std::printf("final_train_loss=%.10g\n", result.log.back().train_loss);
    std::printf("best_val_rmse=%.10g\n", result.best_val_rmse);
    std::printf("best_epoch=%zu\n", result.best_epoch);
    std::printf("best_checkpoint=%s\n", result.best_checkpoint.c_str());
    std::printf("final_checkpoint=%s\n", result.final_checkpoint.c_str());
    return kExitOk;
}

struct EvalArgs {
    std::string data_dir;
    std::string ckpt;
    std::string split = "test";
    std::string residuals_file;
};

int cmd_eval(const EvalArgs& a) {
    auto manifest =
        tint::load_manifest((std::filesystem::path(a.data_dir) / "manifest.json").string());
    auto model = tint::load_checkpoint(a.ckpt);
    echo_json("config.model", tint::config_to_json(model.config));
    std::printf("split=%s\n", a.split.c_str());
    auto channels = manifest_channels_for(model, manifest);
    auto result = tint::evaluate(model, manifest, a.split, 32, channels);
    if (!a.residuals_file.empty()) {
        std::ofstream out(a.residuals_file);
        if (!out) throw tint::IoError("cannot write residuals file: " + a.residuals_file);
        for (double r : result.residuals) out << r << "\n";
        std::printf("residuals=%s\n", a.residuals_file.c_str());
    }
    std::printf("n_samples=%zu\n", result.predictions.size());
    std::printf("rmse_knots=%.10g\n", result.rmse_knots);
    return kExitOk;
}

struct PredictArgs {
    std::string ckpt;
    std::string input;
};

int cmd_predict(const PredictArgs& a) {
    auto model = tint::load_checkpoint(a.ckpt);
    echo_json("config.model", tint::config_to_json(model.config));
    auto frames = tint::read_tensor_file(a.input);
    if (frames.rank() == 3) {
        tint::Shape s{1, frames.extent(0), frames.extent(1), frames.extent(2)};
        frames = tint::Tensor<float>(s, frames.data());
    }
    if (frames.rank() != 4)
        throw tint::ValueError("predict input must be [C,H,W] or [N,C,H,W], got " +
                               tint::shape_str(frames.shape()));
    std::size_t n = frames.extent(0), C = frames.extent(1);
    if (C != model.config.in_channels)
        throw tint::ValueError("input has " + std::to_string(C) + " channels, model expects " +
                               std::to_string(model.config.in_channels));
    std::size_t plane = frames.extent(2) * frames.extent(3);
    for (std::size_t i = 0; i < n; ++i) {
        tint::Tensor<float> frame(tint::Shape{C, frames.extent(2), frames.extent(3)});
        std::copy(frames.data().begin() + static_cast<std::ptrdiff_t>(i * C * plane),
                  frames.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * C * plane),
                  frame.data().begin());
        if (model.normalization.present()) {
            tint::Sample s;
            s.channels = frame;
            tint::DatasetManifest stats;
            stats.channel_mean = model.normalization.mean;
            stats.channel_std = model.normalization.std;
            frame = tint::clean_and_normalize(s, stats).channels;
        }
        if (frame.extent(1) != model.config.input_size)
            frame = tint::resize_bilinear(frame, model.config.input_size);
        tint::Tensor<float> batch(
            tint::Shape{1, C, model.config.input_size, model.config.input_size}, frame.data());
        auto pred = tint::forward(model, batch, tint::Mode::eval);
        std::printf("intensity_knots=%.10g\n", static_cast<double>(pred.data()[0]));
    }
    return kExitOk;
}

struct GradcheckArgs {
    std::string config_file;
    std::uint64_t seed = 42;
    double threshold = 1e-4;
    double threshold_full = 1e-3;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    tint::ModelConfig cfg = tint::test_model_config();
    if (!a.config_file.empty()) {
        auto doc = load_config_file(a.config_file);
        if (doc.contains("model")) cfg = tint::config_from_json(doc.at("model"));
    }
    cfg.seed = a.seed;
    std::printf("seed=%llu\n", static_cast<unsigned long long>(a.seed));
    echo_json("config.model", tint::config_to_json(cfg));
    std::printf("threshold=%.10g\n", a.threshold);
    std::printf("threshold_full=%.10g\n", a.threshold_full);

    auto report = tint::run_gradcheck(cfg, a.seed);
    bool ok = true;
    for (const auto& [name, err] : report.blocks) {
        std::printf("block=%s max_rel_err=%.10g\n", name.c_str(), err);
        if (err >= a.threshold) ok = false;
    }
    std::printf("block=full_model max_rel_err=%.10g\n", report.full_model);
    if (report.full_model >= a.threshold_full) ok = false;
    std::printf("gradcheck=%s\n", ok ? "pass" : "fail");
    if (!ok) {
        std::fprintf(stderr, "gradient check exceeded threshold\n");
        return kExitNumeric;
    }
    return kExitOk;
}

struct SaliencyArgs {
    std::string ckpt;
    std::string input;
    std::string out;
};

int cmd_saliency(const SaliencyArgs& a) {
    auto model = tint::load_checkpoint(a.ckpt);
    echo_json("config.model", tint::config_to_json(model.config));
    auto frame = tint::read_tensor_file(a.input);
    if (frame.rank() != 3)
        throw tint::ValueError("saliency input must be a single [C,H,W] frame, got " +
                               tint::shape_str(frame.shape()));
    auto result = tint::saliency(model, frame);
    tint::write_saliency_pgm(result, a.out);
    std::printf("method=input_gradient\n");  // Grad-CAM stand-in for scalar regression
    std::printf("degenerate=%s\n", result.degenerate ? "true" : "false");
    std::printf("saliency=%s\n", a.out.c_str());
    if (result.degenerate)
        std::fprintf(stderr, "warning: zero input gradient, saliency map is uniformly zero\n");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Typhoon intensity estimation engine"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic vortex dataset");
    synth->add_option("--out", synth_args.out_dir, "output dataset directory")->required();
    synth->add_option("--n", synth_args.count, "number of storms");
    synth->add_option("--seed", synth_args.seed, "generator seed");
    synth->add_option("--channels", synth_args.channels, "comma list of ir,wv,pmw");

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "Train a model on a dataset");
    train->add_option("--data", train_args.data_dir, "dataset directory")->required();
    train->add_option("--config", train_args.config_file, "model/train config JSON");
    train->add_option("--out", train_args.out_dir, "run output directory")->required();
    train->add_option("--epochs", train_args.epochs, "override epoch count");
    train->add_option("--batch-size", train_args.batch_size, "override batch size");
    train->add_option("--lr", train_args.lr, "override base learning rate");
    train->add_option("--seed", train_args.seed, "override seed");
    train->add_option("--channels", train_args.channels, "comma list of manifest channels");
    train->add_option("--checkpoint-every", train_args.checkpoint_every,
                      "cadence checkpoints every N epochs");
    train->add_flag("--no-augment", train_args.no_augment, "disable train augmentation");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Report RMSE on a dataset split");
    eval_cmd->add_option("--data", eval_args.data_dir, "dataset directory")->required();
    eval_cmd->add_option("--ckpt", eval_args.ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--split", eval_args.split, "train, val, or test");
    eval_cmd->add_option("--residuals", eval_args.residuals_file, "per-sample residual dump");

    PredictArgs predict_args;
    auto* predict = app.add_subcommand("predict", "Predict intensities for raw frames");
    predict->add_option("--ckpt", predict_args.ckpt, "checkpoint file")->required();
    predict->add_option("--input", predict_args.input, "TNSR frame file")->required();

    GradcheckArgs grad_args;
    auto* gradcheck = app.add_subcommand("gradcheck", "Verify gradients by finite differences");
    gradcheck->add_option("--config", grad_args.config_file, "model config JSON");
    gradcheck->add_option("--seed", grad_args.seed, "check seed");
    gradcheck->add_option("--threshold", grad_args.threshold, "per-block gate");
    gradcheck->add_option("--threshold-full", grad_args.threshold_full, "full-model gate");

    SaliencyArgs sal_args;
    auto* saliency_cmd = app.add_subcommand("saliency", "Export an input-gradient map as PGM");
    saliency_cmd->add_option("--ckpt", sal_args.ckpt, "checkpoint file")->required();
    saliency_cmd->add_option("--input", sal_args.input, "TNSR frame file")->required();
    saliency_cmd->add_option("--out", sal_args.out, "output PGM path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_args);
        if (train->parsed()) return cmd_train(train_args);
        if (eval_cmd->parsed()) return cmd_eval(eval_args);
        if (predict->parsed()) return cmd_predict(predict_args);
        if (gradcheck->parsed()) return cmd_gradcheck(grad_args);
        if (saliency_cmd->parsed()) return cmd_saliency(sal_args);
    } catch (const tint::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const tint::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    }
    return kExitUsage;
}
