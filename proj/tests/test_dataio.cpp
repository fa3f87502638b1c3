#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tint/dataio.hpp"
#include "tint/serialize.hpp"

using namespace tint;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / "tint_dataio_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("TNSR scalar layout is 11 bytes") {
    auto dir = scratch_dir("scalar");
    auto path = (dir / "s.tnsr").string();
    write_tensor_file(path, Tensor<float>::scalar(3.5f));
    auto bytes = slurp(path);
    CHECK(bytes.size() == 11);  // 4 magic + version + dtype + rank + payload
    CHECK(bytes[0] == 'T');
    CHECK(bytes[4] == 1);  // version
    CHECK(bytes[5] == 1);  // float32
    CHECK(bytes[6] == 0);  // rank
    auto back = read_tensor_file(path);
    CHECK(back.item() == 3.5f);
}

TEST_CASE("TNSR round-trip is bit-exact") {
    auto dir = scratch_dir("roundtrip");
    Rng rng(5);
    Tensor<float> t(Shape{3, 201, 201});
    for (auto& v : t.data()) v = static_cast<float>(rng.normal() * 100.0);
    auto path = (dir / "t.tnsr").string();
    write_tensor_file(path, t);
    auto back = read_tensor_file(path);
    CHECK(back.shape() == t.shape());
    CHECK(std::memcmp(back.data().data(), t.data().data(), t.numel() * 4) == 0);
    // write-read-write produces identical bytes
    auto path2 = (dir / "t2.tnsr").string();
    write_tensor_file(path2, back);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("TNSR round-trip property over random ranks") {
    auto dir = scratch_dir("prop");
    Rng rng(11);
    for (int iter = 0; iter < 100; ++iter) {
        std::size_t rank = rng.next_u64() % 5;  // 0..4
        Shape shape(rank);
        for (auto& e : shape) e = 1 + rng.next_u64() % 6;
        Tensor<float> t(shape);
        for (auto& v : t.data()) v = static_cast<float>(rng.normal());
        auto path = (dir / ("r" + std::to_string(iter) + ".tnsr")).string();
        write_tensor_file(path, t);
        auto back = read_tensor_file(path);
        REQUIRE(back.shape() == t.shape());
        REQUIRE(std::memcmp(back.data().data(), t.data().data(), t.numel() * 4) == 0);
    }
}

TEST_CASE("TNSR error contracts") {
    auto dir = scratch_dir("errors");
    auto path = (dir / "bad.tnsr").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "XXXX";
    }
    CHECK_THROWS_WITH_AS(read_tensor_file(path), doctest::Contains("bad magic"), IoError);

    // truncated payload
    Tensor<float> t(Shape{4, 4}, std::vector<float>(16, 1.0f));
    auto good = encode_tensor(t);
    auto trunc = std::vector<std::uint8_t>(good.begin(), good.end() - 7);
    auto tpath = (dir / "trunc.tnsr").string();
    detail::write_file_bytes(tpath, trunc);
    CHECK_THROWS_WITH_AS(read_tensor_file(tpath), doctest::Contains("truncated"), IoError);

    // unsupported dtype code
    auto baddt = good;
    baddt[5] = 9;
    auto dpath = (dir / "dtype.tnsr").string();
    detail::write_file_bytes(dpath, baddt);
    CHECK_THROWS_WITH_AS(read_tensor_file(dpath), doctest::Contains("dtype"), IoError);
}

TEST_CASE("synthetic generator obeys the intensity law") {
    CHECK(synth_intensity(0.2, 40.0) == doctest::Approx(44.0).epsilon(1e-12));
    CHECK(synth_intensity(1.0, 8.0) == doctest::Approx(170.0).epsilon(1e-12));

    auto dir = scratch_dir("synth");
    SynthSpec spec;
    spec.count = 20;
    spec.seed = 7;
    spec.frame_size = 33;  // keep the test fast; geometry is size-agnostic
    auto m = synth_generate(spec, dir.string());
    CHECK(m.split("train").size() == 16);
    CHECK(m.split("val").size() == 2);
    CHECK(m.split("test").size() == 2);
    for (const auto& e : m.split("train")) {
        CHECK(e.intensity >= 20.0);
        CHECK(e.intensity <= 170.0);
    }

    // same seed regenerates byte-identical files and manifest
    auto dir2 = scratch_dir("synth2");
    synth_generate(spec, dir2.string());
    CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
    for (const auto& e : m.split("train"))
        CHECK(slurp(dir / e.path) == slurp(dir2 / e.path));

    // loading validates cleanly
    auto loaded = load_manifest((dir / "manifest.json").string());
    CHECK(loaded.modalities == std::vector<std::string>{"IR"});
    CHECK(loaded.channel_std[0] > 0.0);
}

TEST_CASE("manifest validation names each violation") {
    auto dir = scratch_dir("manifest");
    SynthSpec spec;
    spec.count = 10;
    spec.frame_size = 17;
    auto m = synth_generate(spec, dir.string());
    auto path = (dir / "manifest.json").string();

    // empty split list is valid
    {
        auto j = manifest_to_json(m);
        j["splits"]["val"] = nlohmann::json::array();
        std::ofstream(path + ".empty") << j.dump(2);
        auto ok = load_manifest(path + ".empty");
        CHECK(ok.split("val").empty());
    }
    // missing file
    {
        auto j = manifest_to_json(m);
        j["splits"]["train"][0]["path"] = "tensors/nope.tnsr";
        std::ofstream(path + ".missing") << j.dump(2);
        CHECK_THROWS_WITH_AS(load_manifest(path + ".missing"),
                             doctest::Contains("missing tensor file"), IoError);
    }
    // zero std
    {
        auto j = manifest_to_json(m);
        j["channel_std"][0] = 0.0;
        std::ofstream(path + ".std") << j.dump(2);
        CHECK_THROWS_WITH_AS(load_manifest(path + ".std"),
                             doctest::Contains("std must be positive"), IoError);
    }
    // unknown modality
    {
        auto j = manifest_to_json(m);
        j["modalities"][0] = "VIS";
        std::ofstream(path + ".vis") << j.dump(2);
        CHECK_THROWS_WITH_AS(load_manifest(path + ".vis"), doctest::Contains("unknown modality"),
                             IoError);
    }
}

TEST_CASE("clean_and_normalize") {
    DatasetManifest m;
    m.modalities = {"IR", "WV"};
    m.channel_mean = {2.0, -1.0};
    m.channel_std = {4.0, 0.5};

    Sample s;
    s.channels = Tensor<float>(Shape{2, 3, 3});
    float nan = std::numeric_limits<float>::quiet_NaN();
    for (std::size_t i = 0; i < 9; ++i) s.channels.data()[i] = nan;  // channel 0 all NaN
    for (std::size_t i = 9; i < 18; ++i) s.channels.data()[i] = -1.0f;  // equals channel mean

    auto out = clean_and_normalize(s, m);
    for (std::size_t i = 0; i < 18; ++i) CHECK(out.channels.data()[i] == 0.0f);

    // random data matches the direct formula
    Rng rng(3);
    Sample r;
    r.channels = Tensor<float>(Shape{2, 3, 3});
    for (auto& v : r.channels.data()) v = static_cast<float>(rng.normal() * 3.0);
    auto rn = clean_and_normalize(r, m);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
            double expect = (r.channels.data()[c * 9 + i] - m.channel_mean[c]) / m.channel_std[c];
            CHECK(std::abs(rn.channels.data()[c * 9 + i] - expect) <= 1e-6);
        }
}

TEST_CASE("normalized synthetic train split has mean ~0 and std ~1") {
    auto dir = scratch_dir("normstats");
    SynthSpec spec;
    spec.count = 30;
    spec.frame_size = 33;
    spec.seed = 21;
    auto m = synth_generate(spec, dir.string());
    double sum = 0.0, sumsq = 0.0;
    std::size_t n = 0;
    for (const auto& e : m.split("train")) {
        auto s = clean_and_normalize(load_sample(m, e), m);
        for (float v : s.channels.data()) {
            sum += v;
            sumsq += static_cast<double>(v) * v;
            ++n;
        }
    }
    double mean = sum / n;
    double std = std::sqrt(sumsq / n - mean * mean);
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(std - 1.0) < 0.1);
}

TEST_CASE("resize_bilinear") {
    // same-size resize is identity
    Rng rng(9);
    Tensor<float> img(Shape{1, 5, 5});
    for (auto& v : img.data()) v = static_cast<float>(rng.normal());
    auto same = resize_bilinear(img, 5);
    for (std::size_t i = 0; i < img.numel(); ++i)
        CHECK(std::abs(same.data()[i] - img.data()[i]) <= 1e-6);

    // constant image stays constant at any size
    Tensor<float> c(Shape{2, 4, 4}, std::vector<float>(32, 5.0f));
    for (std::size_t size : {2, 3, 7, 16}) {
        auto r = resize_bilinear(c, size);
        for (float v : r.data()) CHECK(v == doctest::Approx(5.0f));
    }

    // 2x2 -> 3x3 center pixel is the mean of the four corners
    Tensor<float> q(Shape{1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    auto up = resize_bilinear(q, 3);
    CHECK(up.data()[4] == doctest::Approx(2.5f));
    CHECK(up.data()[0] == doctest::Approx(1.0f));
    CHECK(up.data()[8] == doctest::Approx(4.0f));

    CHECK_THROWS_AS(resize_bilinear(q, 1), ValueError);
}

TEST_CASE("rotation: zero angle, symmetry, determinism") {
    Rng rng(13);
    Tensor<float> img(Shape{1, 21, 21});
    for (auto& v : img.data()) v = static_cast<float>(rng.normal());
    auto r0 = rotate_image(img, 0.0);
    for (std::size_t i = 0; i < img.numel(); ++i)
        CHECK(std::abs(r0.data()[i] - img.data()[i]) <= 1e-6);

    // isotropic centered Gaussian is rotation-invariant up to resampling error
    Tensor<float> g(Shape{1, 41, 41});
    for (std::size_t y = 0; y < 41; ++y)
        for (std::size_t x = 0; x < 41; ++x) {
            double dy = static_cast<double>(y) - 20.0, dx = static_cast<double>(x) - 20.0;
            g.data()[y * 41 + x] = static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2 * 36.0)));
        }
    auto gr = rotate_image(g, 13.5);
    double rms = 0.0;
    for (std::size_t i = 0; i < g.numel(); ++i) {
        double d = gr.data()[i] - g.data()[i];
        rms += d * d;
    }
    rms = std::sqrt(rms / g.numel());
    CHECK(rms < 1e-2);

    // same rng state twice -> bit-identical
    Rng a(99), b(99);
    auto ra = random_rotation(img, a);
    auto rb = random_rotation(img, b);
    CHECK(ra.data() == rb.data());
}

TEST_CASE("flips: involution, determinism, monte carlo rate") {
    Rng rng(17);
    Tensor<float> img(Shape{2, 8, 8});
    for (auto& v : img.data()) v = static_cast<float>(rng.normal());
    CHECK(flip_horizontal(flip_horizontal(img)).data() == img.data());
    CHECK(flip_vertical(flip_vertical(img)).data() == img.data());

    Rng a(5), b(5);
    CHECK(random_flip(img, a).data() == random_flip(img, b).data());

    // each flip fires 50% +/- 2% over 10k draws
    Rng mc(123);
    int h = 0, v = 0;
    for (int i = 0; i < 10000; ++i) {
        if (mc.uniform() < 0.5) ++h;
        if (mc.uniform() < 0.5) ++v;
    }
    CHECK(std::abs(h / 10000.0 - 0.5) < 0.02);
    CHECK(std::abs(v / 10000.0 - 0.5) < 0.02);
}

TEST_CASE("make_batches: partial batch, determinism, per-sample streams") {
    auto dir = scratch_dir("batches");
    SynthSpec spec;
    spec.count = 33;
    spec.frame_size = 33;
    spec.seed = 4;
    auto m = synth_generate(spec, dir.string());
    // use all 33 samples via the train+val+test union: train alone has 26
    BatchOptions opt;
    opt.batch_size = 32;
    opt.shuffle_seed = 10;
    opt.target_size = 16;

    // 26 train samples with batch 32 -> single batch of 26
    auto batches = make_batches(m, "train", opt);
    CHECK(batches.size() == 1);
    CHECK(batches[0].images.extent(0) == 26);

    // batch 8: 26 -> 8+8+8+2, partial included
    opt.batch_size = 8;
    auto b8 = make_batches(m, "train", opt);
    REQUIRE(b8.size() == 4);
    CHECK(b8.back().images.extent(0) == 2);

    // same seed -> identical order
    auto again = make_batches(m, "train", opt);
    for (std::size_t i = 0; i < b8.size(); ++i)
        CHECK(b8[i].sample_indices == again[i].sample_indices);

    // augmentation is a pure function of (sample, seed): dropping a sample
    // leaves the others' augmented pixels unchanged
    AugmentConfig aug;
    aug.target_size = 16;
    aug.seed = 77;
    opt.augment = aug;
    opt.shuffle = false;
    opt.batch_size = 4;
    auto full = make_batches(m, "train", opt);

    auto m2 = m;
    m2.splits["train"].erase(m2.splits["train"].begin());  // drop first sample
    auto reduced = make_batches(m2, "train", opt);

    // sample originally at index 1 is now at index 0; pixels must match
    const float* before = full[0].images.data().data() + 1 * 16 * 16;
    const float* after = reduced[0].images.data().data();
    for (std::size_t i = 0; i < 16 * 16; ++i) CHECK(before[i] == after[i]);

    CHECK_THROWS_AS(make_batches(m, "train", BatchOptions{.batch_size = 0}), ValueError);
    DatasetManifest empty = m;
    empty.splits["val"].clear();
    CHECK_THROWS_WITH_AS(make_batches(empty, "val", opt), doctest::Contains("empty"), ValueError);
}

TEST_CASE("PGM round-trip") {
    auto dir = scratch_dir("pgm");
    Rng rng(31);
    std::vector<std::uint8_t> pix(24 * 17);
    for (auto& p : pix) p = static_cast<std::uint8_t>(rng.next_u64() % 256);
    auto path = (dir / "map.pgm").string();
    write_pgm(path, pix, 24, 17);
    auto img = read_pgm(path);
    CHECK(img.height == 24);
    CHECK(img.width == 17);
    CHECK(img.pixels == pix);
}
