#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tint/gradcheck.hpp"
#include "tint/nn.hpp"

using namespace tint;

namespace {

Tensor<double> randn(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(shape);
    for (auto& v : t.data()) v = rng.normal() * scale;
    return t;
}

template <class P>
void zero_params(P& p) {
    p.visit("", [](const std::string&, auto& t, bool) {
        for (auto& v : t.data()) v = 0;
    });
}

// collect trainable leaves of a param struct
template <class P, class T>
std::vector<Tensor<T>> trainable_of(P& p) {
    std::vector<Tensor<T>> out;
    p.visit("", [&](const std::string&, Tensor<T>& t, bool trainable) {
        if (trainable) out.push_back(t);
    });
    return out;
}

}  // namespace

TEST_CASE("layernorm normalizes each token") {
    Rng rng(3);
    auto x = randn({2, 5, 8}, rng, 3.0);
    auto p = LayerNormParams<double>::make(8);
    auto y = layernorm(x, p);
    for (std::size_t t = 0; t < 10; ++t) {
        double mean = 0, var = 0;
        for (std::size_t c = 0; c < 8; ++c) mean += y.data()[t * 8 + c];
        mean /= 8;
        for (std::size_t c = 0; c < 8; ++c) {
            double d = y.data()[t * 8 + c] - mean;
            var += d * d;
        }
        var /= 8;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-5);
    }
    Tensor<double> bad({2, 5, 4});
    CHECK_THROWS_AS(layernorm(bad, p), ShapeError);
}

TEST_CASE("batchnorm train and eval semantics") {
    auto p = BatchNormParams<double>::make(3);

    // constant input normalizes to zeros in train mode
    Tensor<double> c(Shape{2, 3, 4, 4}, 7.5);
    auto y = batchnorm(c, p, Mode::train);
    for (double v : y.data()) CHECK(std::abs(v) < 1e-9);

    // eval is a pure function of the running stats: bit-identical reruns
    Rng rng(5);
    auto x = randn({2, 3, 4, 4}, rng);
    auto p2 = BatchNormParams<double>::make(3);
    batchnorm(x, p2, Mode::train);  // accumulate stats once
    auto e1 = batchnorm(x, p2, Mode::eval);
    auto e2 = batchnorm(x, p2, Mode::eval);
    CHECK(e1.data() == e2.data());

    // train mode output: per channel mean 0, var 1 across batch x spatial
    auto yt = batchnorm(x, p2, Mode::train);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        double mean = 0;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 16; ++i) mean += yt.data()[(b * 3 + ch) * 16 + i];
        mean /= 32;
        CHECK(std::abs(mean) < 1e-9);
    }
}

TEST_CASE("patch_embed token arithmetic") {
    Rng rng(7);
    auto p = PatchEmbedParams<double>::make(1, 4, rng);

    auto t64 = patch_embed(randn({1, 1, 64, 64}, rng), p, Mode::eval);
    CHECK(t64.shape() == Shape{1, 256, 4});

    auto t224 = patch_embed(randn({1, 1, 224, 224}, rng, 0.2), p, Mode::eval);
    CHECK(t224.shape() == Shape{1, 3136, 4});

    // zero image with zero biases -> zero tokens in eval mode
    auto pz = PatchEmbedParams<double>::make(1, 4, rng);
    zero_params(pz);
    pz.bn1.gamma = Tensor<double>(Shape{2}, 1.0);
    pz.bn2.gamma = Tensor<double>(Shape{4}, 1.0);
    pz.bn1.running_var = Tensor<double>(Shape{2}, 1.0);
    pz.bn2.running_var = Tensor<double>(Shape{4}, 1.0);
    auto tz = patch_embed(Tensor<double>(Shape{1, 1, 16, 16}), pz, Mode::eval);
    for (double v : tz.data()) CHECK(v == 0.0);

    CHECK_THROWS_AS(patch_embed(randn({1, 1, 30, 30}, rng), p, Mode::eval), ShapeError);
}

TEST_CASE("positional embedding") {
    Rng rng(11);
    auto pe = PositionalEmbedding<double>::make(6, 4, rng);
    auto tokens = randn({2, 6, 4}, rng);

    // zero table -> identity
    auto pz = PositionalEmbedding<double>::make(6, 4, rng);
    for (auto& v : pz.table.data()) v = 0.0;
    auto same = add_positional(tokens, pz);
    CHECK(same.data() == tokens.data());

    // adding a non-constant table breaks permutation equivariance
    std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    auto permute_tokens = [&](const Tensor<double>& t) {
        Tensor<double> out(t.shape());
        for (std::size_t b = 0; b < t.extent(0); ++b)
            for (std::size_t l = 0; l < perm.size(); ++l)
                for (std::size_t c = 0; c < t.extent(2); ++c)
                    out.data()[(b * perm.size() + l) * t.extent(2) + c] =
                        t.data()[(b * perm.size() + perm[l]) * t.extent(2) + c];
        return out;
    };
    auto lhs = add_positional(permute_tokens(tokens), pe);
    auto rhs = permute_tokens(add_positional(tokens, pe));
    bool differs = false;
    for (std::size_t i = 0; i < lhs.numel(); ++i)
        if (std::abs(lhs.data()[i] - rhs.data()[i]) > 1e-9) differs = true;
    CHECK(differs);

    // table gradient is the sum of output grads over the batch
    auto tb = pe.table;
    tb.set_requires_grad(true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto out = add_positional(tokens, pe);
        auto loss = sum_all(out);
        tape.backward(loss);
    }
    for (double g : tb.grad()) CHECK(g == doctest::Approx(2.0));  // batch of 2, d(sum)/d(table)=B

    CHECK_THROWS_AS(add_positional(randn({2, 5, 4}, rng), pe), ShapeError);
}

TEST_CASE("mbconv: residual identity, shape preservation, gradients") {
    Rng rng(13);

    // all-zero weights/biases -> pure residual
    auto pz = MBConvParams<double>::make(4, 4, rng);
    zero_params(pz);
    pz.bn1.gamma = Tensor<double>(Shape{16}, 1.0);
    pz.bn2.gamma = Tensor<double>(Shape{16}, 1.0);
    pz.bn3.gamma = Tensor<double>(Shape{4}, 1.0);
    pz.bn1.running_var = Tensor<double>(Shape{16}, 1.0);
    pz.bn2.running_var = Tensor<double>(Shape{16}, 1.0);
    pz.bn3.running_var = Tensor<double>(Shape{4}, 1.0);
    auto x = randn({1, 4, 6, 6}, rng);
    auto y = mbconv(x, pz, Mode::eval);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));

    // shape preserved for random params over a few configs
    for (auto [c, hw] : {std::pair<std::size_t, std::size_t>{2, 4}, {3, 6}, {8, 8}}) {
        auto p = MBConvParams<double>::make(c, 4, rng);
        auto in = randn({2, c, hw, hw}, rng);
        CHECK(mbconv(in, p, Mode::train).shape() == in.shape());
    }

    // channel mismatch is an error
    auto p4 = MBConvParams<double>::make(4, 4, rng);
    CHECK_THROWS_AS(mbconv(randn({1, 3, 6, 6}, rng), p4, Mode::eval), ShapeError);

    // finite-difference gradient check on a 1x4x6x6 instance
    auto p = MBConvParams<double>::make(4, 2, rng);
    auto xc = randn({1, 4, 6, 6}, rng);
    auto wts = randn({1, 4, 6, 6}, rng);
    std::function<Tensor<double>(const Tensor<double>&)> f = [&](const Tensor<double>& t) {
        return sum_all(mul(mbconv(t, p, Mode::train), wts));
    };
    CHECK(grad_check(f, xc, 1e-5) < 1e-4);
}

TEST_CASE("downsample halves resolution and checks parity") {
    Rng rng(17);
    auto p = DownsampleParams<double>::make(3, 5, 4, rng);
    auto y = downsample(randn({1, 3, 28, 28}, rng), p, Mode::train);
    CHECK(y.shape() == Shape{1, 5, 14, 14});
    auto y2 = downsample(randn({1, 3, 14, 14}, rng), p, Mode::train);
    CHECK(y2.shape() == Shape{1, 5, 7, 7});
    CHECK_THROWS_AS(downsample(randn({1, 3, 7, 7}, rng), p, Mode::train), ShapeError);

    // gradient check on a tiny instance, including parameters
    auto ps = DownsampleParams<double>::make(2, 3, 2, rng);
    auto x = randn({1, 2, 4, 4}, rng);
    auto wts = randn({1, 3, 2, 2}, rng);
    std::function<Tensor<double>(const Tensor<double>&)> f = [&](const Tensor<double>& t) {
        return sum_all(mul(downsample(t, ps, Mode::train), wts));
    };
    CHECK(grad_check(f, x, 1e-5) < 1e-4);
    std::function<Tensor<double>()> floss = [&]() {
        return sum_all(mul(downsample(x, ps, Mode::train), wts));
    };
    auto leaves = trainable_of<DownsampleParams<double>, double>(ps);
    CHECK(grad_check_many(floss, leaves, 1e-5) < 1e-4);
}

TEST_CASE("mlp_block: zero tail, permutation commutation, gradients") {
    Rng rng(19);
    auto p = MLPParams<double>::make(8, 4, rng);

    // zero second linear -> zero output, so x + mlp_block(x) is identity
    auto pz = MLPParams<double>::make(8, 4, rng);
    for (auto& v : pz.fc2.weight.data()) v = 0.0;
    for (auto& v : pz.fc2.bias.data()) v = 0.0;
    auto x = randn({2, 5, 8}, rng);
    auto z = mlp_block(x, pz);
    for (double v : z.data()) CHECK(v == 0.0);

    // per-token operation commutes with token permutation
    std::vector<std::size_t> perm = {4, 2, 0, 3, 1};
    auto permute_tokens = [&](const Tensor<double>& t) {
        Tensor<double> out(t.shape());
        for (std::size_t b = 0; b < t.extent(0); ++b)
            for (std::size_t l = 0; l < perm.size(); ++l)
                for (std::size_t c = 0; c < t.extent(2); ++c)
                    out.data()[(b * perm.size() + l) * t.extent(2) + c] =
                        t.data()[(b * perm.size() + perm[l]) * t.extent(2) + c];
        return out;
    };
    auto lhs = mlp_block(permute_tokens(x), p);
    auto rhs = permute_tokens(mlp_block(x, p));
    for (std::size_t i = 0; i < lhs.numel(); ++i)
        CHECK(lhs.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-12));

    // gradient check on (1,4,8)
    auto xs = randn({1, 4, 8}, rng);
    auto wts = randn({1, 4, 8}, rng);
    std::function<Tensor<double>(const Tensor<double>&)> f = [&](const Tensor<double>& t) {
        return sum_all(mul(mlp_block(t, p), wts));
    };
    CHECK(grad_check(f, xs, 1e-5) < 1e-4);

    CHECK_THROWS_AS(mlp_block(randn({1, 4, 7}, rng), p), ShapeError);
}

TEST_CASE("whole stage collapses to identity with zeroed residual branches") {
    Rng rng(23);
    std::vector<MBConvParams<double>> blocks;
    for (int i = 0; i < 3; ++i) {
        auto p = MBConvParams<double>::make(4, 4, rng);
        // zero only the residual branch tail: the project conv
        for (auto& v : p.project.weight.data()) v = 0.0;
        blocks.push_back(p);
    }
    auto x = randn({2, 4, 6, 6}, rng);
    auto h = x;
    for (auto& b : blocks) h = mbconv(h, b, Mode::train);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(h.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("norm layers pass gradient checks") {
    Rng rng(29);
    auto x = randn({2, 3, 4, 4}, rng);
    auto bn = BatchNormParams<double>::make(3);
    // non-trivial gamma/beta so the parameter path is exercised
    for (auto& v : bn.gamma.data()) v = 1.0 + 0.3 * rng.normal();
    for (auto& v : bn.beta.data()) v = 0.2 * rng.normal();
    auto wts = randn({2, 3, 4, 4}, rng);
    // train-mode output does not read running stats, so their drift across
    // repeated evaluations cannot perturb the finite differences
    std::function<Tensor<double>(const Tensor<double>&)> fb = [&](const Tensor<double>& t) {
        return sum_all(mul(batchnorm(t, bn, Mode::train), wts));
    };
    CHECK(grad_check(fb, x, 1e-5) < 1e-4);

    auto ln = LayerNormParams<double>::make(6);
    auto xt = randn({2, 5, 6}, rng);
    auto wt2 = randn({2, 5, 6}, rng);
    std::function<Tensor<double>(const Tensor<double>&)> fl = [&](const Tensor<double>& t) {
        return sum_all(mul(layernorm(t, ln), wt2));
    };
    CHECK(grad_check(fl, xt, 1e-5) < 1e-4);
}
