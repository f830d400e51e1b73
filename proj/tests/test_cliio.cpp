#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "helpers.hpp"
#include "tsplat/checkpoint.hpp"
#include "tsplat/config.hpp"
#include "tsplat/data.hpp"
#include "tsplat/image.hpp"
#include "tsplat/metrics.hpp"
#include "tsplat/ply.hpp"

using namespace tsplat;

namespace {

GaussianScene random_export_scene(Rng& rng, std::size_t n) {
    GaussianScene s;
    s.means = rng.uniform_tensor({n, 3}, -1.0, 1.0);
    s.scales = rng.uniform_tensor({n, 3}, 0.01, 0.5);
    s.rotations = Tensor(Shape{n, 3, 3});
    s.opacities = rng.uniform_tensor({n, 1}, 0.05, 0.95);
    s.sh = rng.normal_tensor({n, 3, 16}, 0.0, 0.4);
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::Matrix3d r = tsplat::testing::random_rotation(rng);
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) s.rotations[i * 9 + a * 3 + b] = r(a, b);
    }
    return s;
}

}  // namespace

TEST_CASE("config round-trips and rejects unknown keys") {
    RunConfig cfg;
    cfg.training.seed = 99;
    cfg.encoder.latent_tokens = 48;
    cfg.losses.lambda_mse = 2.25;
    cfg.renderer.background = {0.125, 0.5, 0.9375};
    cfg.io.out_dir = "runs/spaced path";

    const std::string text = serialize_config(cfg);
    RunConfig back = parse_config(text);
    CHECK(serialize_config(back) == text);
    CHECK(back.training.seed == 99);
    CHECK(back.encoder.latent_tokens == 48);
    CHECK(back.renderer.background[2] == 0.9375);
    CHECK(back.io.out_dir == "runs/spaced path");

    CHECK_THROWS_WITH(parse_config("[encoder]\nlatent_tokens = 4\nbogus_key = 1\n"),
                      Catch::Matchers::ContainsSubstring("bogus_key"));
    CHECK_THROWS_WITH(parse_config("[nosuch]\nx = 1\n"),
                      Catch::Matchers::ContainsSubstring("nosuch.x"));
    // comments and blank lines are fine; partial configs keep defaults
    RunConfig partial = parse_config("# comment\n\n[training]\nseed = 7\n");
    CHECK(partial.training.seed == 7);
    CHECK(partial.encoder.latent_tokens == RunConfig{}.encoder.latent_tokens);
}

TEST_CASE("ppm io") {
    Rng rng(3);
    Tensor img = rng.uniform_tensor({6, 9, 3}, 0.0, 1.0);
    const std::string bytes = encode_ppm(img);
    Tensor back = decode_ppm(bytes);
    REQUIRE(back.shape() == img.shape());
    for (std::size_t i = 0; i < img.numel(); ++i)
        CHECK(std::abs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-12);
    // quantized values survive a second trip bit-exactly
    CHECK(encode_ppm(back) == bytes);
    CHECK_THROWS_AS(decode_ppm(bytes.substr(0, bytes.size() - 5)), std::runtime_error);
}

TEST_CASE("psnr and ssim") {
    Rng rng(5);
    Tensor img = rng.uniform_tensor({16, 16, 3}, 0.0, 1.0);
    SECTION("identical images hit the sentinels") {
        CHECK(std::isinf(psnr(img, img)));
        CHECK(ssim(img, img) == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("constant zero versus one is zero dB") {
        CHECK(psnr(Tensor::zeros({8, 8, 3}), Tensor::full({8, 8, 3}, 1.0)) ==
              Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("ssim is symmetric") {
        Tensor other = rng.uniform_tensor({16, 16, 3}, 0.0, 1.0);
        CHECK(ssim(img, other) == Catch::Approx(ssim(other, img)).epsilon(1e-12));
    }
}

TEST_CASE("splat ply") {
    Rng rng(7);
    SECTION("round-trip within float32 precision") {
        GaussianScene scene = random_export_scene(rng, 17);
        GaussianScene back = read_splat_ply(write_splat_ply(scene));
        REQUIRE(back.count() == scene.count());
        for (std::size_t i = 0; i < scene.means.numel(); ++i) {
            CHECK(std::abs(back.means[i] - scene.means[i]) <= 1e-6 * std::abs(scene.means[i]) + 1e-7);
            CHECK(std::abs(back.scales[i] - scene.scales[i]) <=
                  1e-6 * std::abs(scene.scales[i]) + 1e-7);
        }
        for (std::size_t i = 0; i < scene.opacities.numel(); ++i)
            CHECK(std::abs(back.opacities[i] - scene.opacities[i]) < 1e-6);
        for (std::size_t i = 0; i < scene.sh.numel(); ++i)
            CHECK(std::abs(back.sh[i] - scene.sh[i]) < 1e-6);
        for (std::size_t i = 0; i < scene.count(); ++i) {
            Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> a(
                scene.rotations.data() + i * 9);
            Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> b(
                back.rotations.data() + i * 9);
            CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
    SECTION("identity rotation stores quaternion (1, 0, 0, 0) and logit opacity") {
        GaussianScene scene;
        scene.means = Tensor::zeros({1, 3});
        scene.scales = Tensor::full({1, 3}, 0.5);
        scene.rotations = Tensor(Shape{1, 3, 3});
        for (int a = 0; a < 3; ++a) scene.rotations[a * 3 + a] = 1.0;
        scene.opacities = Tensor::full({1, 1}, 0.5);
        scene.sh = Tensor::zeros({1, 3, 16});
        const std::string bytes = write_splat_ply(scene);
        const std::size_t body = bytes.find("end_header\n") + 11;
        auto f32 = [&](std::size_t idx) {
            float v;
            std::memcpy(&v, bytes.data() + body + idx * 4, 4);
            return v;
        };
        CHECK(f32(54) == 0.0f);  // logit(0.5)
        CHECK(f32(58) == 1.0f);  // w first
        CHECK(f32(59) == 0.0f);
        CHECK(f32(60) == 0.0f);
        CHECK(f32(61) == 0.0f);
    }
    SECTION("file size is the header plus 62 float32 per gaussian") {
        GaussianScene scene = random_export_scene(rng, 9);
        const std::string bytes = write_splat_ply(scene);
        const std::size_t header = bytes.find("end_header\n") + 11;
        CHECK(bytes.size() == header + 9 * 62 * 4);
    }
    SECTION("malformed inputs raise explicit errors") {
        GaussianScene scene = random_export_scene(rng, 3);
        std::string bytes = write_splat_ply(scene);
        CHECK_THROWS_WITH(read_splat_ply(bytes.substr(0, bytes.size() - 8)),
                          Catch::Matchers::ContainsSubstring("truncated"));
        std::string wrong = bytes;
        const std::size_t at = wrong.find("property float f_dc_0");
        wrong.replace(at, 21, "property float f_dc_9");
        CHECK_THROWS_WITH(read_splat_ply(wrong),
                          Catch::Matchers::ContainsSubstring("property order"));
        CHECK_THROWS_AS(read_splat_ply("not a ply"), std::runtime_error);
    }
}

TEST_CASE("checkpoint round-trip") {
    RunConfig cfg;
    cfg.training.seed = 31;
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.step = 123;
    Rng rng(11);
    ckpt.params.create("a.weight", rng.normal_tensor({3, 4}));
    ckpt.params.create("b.bias", rng.normal_tensor({4}));
    ckpt.params.entry("a.weight").moment1 = rng.normal_tensor({3, 4});
    ckpt.params.entry("a.weight").moment2 = rng.uniform_tensor({3, 4}, 0.0, 1.0);

    Checkpoint back = decode_checkpoint(encode_checkpoint(ckpt));
    CHECK(back.step == 123);
    CHECK(back.config.training.seed == 31);
    REQUIRE(back.params.has("a.weight"));
    REQUIRE(back.params.has("b.bias"));
    for (std::size_t i = 0; i < 12; ++i) {
        CHECK(back.params.value("a.weight")[i] == ckpt.params.value("a.weight")[i]);
        CHECK(back.params.entry("a.weight").moment1[i] ==
              ckpt.params.entry("a.weight").moment1[i]);
    }
    CHECK_THROWS_AS(decode_checkpoint("garbage"), std::runtime_error);
}

TEST_CASE("preprocess_view resizes, crops, and updates intrinsics") {
    Rng rng(13);
    CameraView v;
    v.pose = CameraPose{};
    v.intrinsics.fx = v.intrinsics.fy = 100.0;
    v.intrinsics.cx = 60.0;
    v.intrinsics.cy = 40.0;
    v.intrinsics.width = 120;
    v.intrinsics.height = 80;
    v.image = rng.uniform_tensor({80, 120, 3}, 0.0, 1.0);
    CameraView out = preprocess_view(v, 32, 8);
    CHECK(out.image.shape() == Shape{32, 32, 3});
    CHECK(out.intrinsics.width == 32);
    CHECK(out.intrinsics.height == 32);
    CHECK_NOTHROW(out.intrinsics.validate());
}

TEST_CASE("dataset directory save/load round-trip") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "tsplat_ds_test").string();
    fs::remove_all(dir);

    RunConfig cfg;
    cfg.training.synthetic_frames = 12;
    cfg.training.image_size = 16;
    cfg.training.focal = 16.0;
    auto scene = make_synthetic_scene(5, 4, cfg.training, cfg.renderer);
    save_dataset(dir, *scene, {0, 3, 7, 11});

    LoadedDataset loaded = load_dataset(dir);
    REQUIRE(loaded.frames() == 4);
    const CameraView expect = scene->view(3);
    const CameraView got = loaded.view(1);
    CHECK((got.pose.rotation - expect.pose.rotation).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((got.pose.center - expect.pose.center).norm() < 1e-12);
    CHECK(got.intrinsics.fx == expect.intrinsics.fx);
    for (std::size_t i = 0; i < got.image.numel(); ++i)
        CHECK(std::abs(got.image[i] - expect.image[i]) <= 0.5 / 255.0 + 1e-12);
    fs::remove_all(dir);
}
