#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "tsplat/gradcheck.hpp"
#include "tsplat/renderer.hpp"

using namespace tsplat;
using tsplat::testing::random_rotation;

namespace {

Intrinsics camera_intrinsics(std::size_t size, double focal) {
    Intrinsics k;
    k.fx = k.fy = focal;
    k.cx = k.cy = static_cast<double>(size) / 2.0;
    k.width = k.height = size;
    return k;
}

// Scene of n gaussians comfortably inside the frustum of an identity camera
// at the origin. `tame` keeps every quantity away from clamp and cutoff
// boundaries for finite-difference probing.
GaussianScene random_scene(Rng& rng, std::size_t n, bool tame = false) {
    GaussianScene s;
    s.means = Tensor(Shape{n, 3});
    s.scales = Tensor(Shape{n, 3});
    s.rotations = Tensor(Shape{n, 3, 3});
    s.opacities = Tensor(Shape{n, 1});
    s.sh = Tensor(Shape{n, 3, 16});
    for (std::size_t i = 0; i < n; ++i) {
        const double z = rng.uniform(1.0, tame ? 2.0 : 3.0);
        s.means[i * 3 + 0] = rng.uniform(-0.3, 0.3) * z;
        s.means[i * 3 + 1] = rng.uniform(-0.3, 0.3) * z;
        s.means[i * 3 + 2] = z;
        for (int a = 0; a < 3; ++a) s.scales[i * 3 + a] = rng.uniform(0.05, tame ? 0.15 : 0.4);
        Eigen::Matrix3d r = random_rotation(rng);
        for (int row = 0; row < 3; ++row)
            for (int col = 0; col < 3; ++col) s.rotations[i * 9 + row * 3 + col] = r(row, col);
        s.opacities[i] = rng.uniform(0.3, tame ? 0.6 : 0.9);
        for (std::size_t k = 0; k < 48; ++k) s.sh[i * 48 + k] = rng.normal(0.0, 0.1);
    }
    return s;
}

GaussianScene single_splat(const Eigen::Vector3d& mean, double scale, double alpha,
                           const Eigen::Vector3d& color_intent) {
    GaussianScene s;
    s.means = Tensor(Shape{1, 3});
    s.scales = Tensor::full({1, 3}, scale);
    s.rotations = Tensor(Shape{1, 3, 3});
    s.opacities = Tensor::full({1, 1}, alpha);
    s.sh = Tensor::zeros({1, 3, 16});
    for (int a = 0; a < 3; ++a) s.means[a] = mean[a];
    for (int a = 0; a < 3; ++a) s.rotations[a * 3 + a] = 1.0;
    for (int c = 0; c < 3; ++c) s.sh[c * 16] = (color_intent[c] - 0.5) / sh::kC0;
    return s;
}

GaussianScene concat_scenes(const GaussianScene& a, const GaussianScene& b) {
    auto cat = [](const Tensor& x, const Tensor& y) {
        Shape shape = x.shape();
        shape[0] += y.shape()[0];
        Tensor out(shape);
        std::copy_n(x.data(), x.numel(), out.data());
        std::copy_n(y.data(), y.numel(), out.data() + x.numel());
        return out;
    };
    GaussianScene s;
    s.means = cat(a.means, b.means);
    s.scales = cat(a.scales, b.scales);
    s.rotations = cat(a.rotations, b.rotations);
    s.opacities = cat(a.opacities, b.opacities);
    s.sh = cat(a.sh, b.sh);
    return s;
}

}  // namespace

TEST_CASE("covariance3d") {
    SECTION("unit scale is the identity") {
        Eigen::Matrix3d s = covariance3d({1, 1, 1}, Eigen::Matrix3d::Identity());
        CHECK((s - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-15);
    }
    SECTION("axis-aligned anisotropy squares the scales") {
        Eigen::Matrix3d s = covariance3d({2, 1, 1}, Eigen::Matrix3d::Identity());
        CHECK(s(0, 0) == Catch::Approx(4.0));
        CHECK(s(1, 1) == Catch::Approx(1.0));
        CHECK(s(2, 2) == Catch::Approx(1.0));
        CHECK(std::abs(s(0, 1)) < 1e-15);
    }
    SECTION("a quarter turn about z swaps the x/y variances") {
        const Eigen::Matrix3d r =
            Eigen::AngleAxisd(EIGEN_PI / 2, Eigen::Vector3d::UnitZ()).toRotationMatrix();
        Eigen::Matrix3d s = covariance3d({2, 1, 1}, r);
        CHECK(s(0, 0) == Catch::Approx(1.0).margin(1e-12));
        CHECK(s(1, 1) == Catch::Approx(4.0).margin(1e-12));
        CHECK(s(2, 2) == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("project_gaussian") {
    RenderConfig cfg;
    SECTION("on-axis isotropic gaussian lands on the principal point") {
        const double f = 32.0, z = 2.0, s = 0.1;
        Intrinsics k = camera_intrinsics(32, f);
        GaussianScene scene = single_splat({0, 0, z}, s, 0.5, {1, 0, 0});
        auto splat = project_gaussian(scene, 0, CameraPose{}, k, cfg);
        REQUIRE(splat.has_value());
        CHECK(splat->mean_x == Catch::Approx(k.cx).margin(1e-12));
        CHECK(splat->mean_y == Catch::Approx(k.cy).margin(1e-12));
        const double expect = (f / z) * (f / z) * s * s + cfg.dilation;
        CHECK(splat->cov2d[0] == Catch::Approx(expect).epsilon(1e-12));
        CHECK(splat->cov2d[2] == Catch::Approx(expect).epsilon(1e-12));
        CHECK(std::abs(splat->cov2d[1]) < 1e-12);
        CHECK(splat->depth == Catch::Approx(z));
    }
    SECTION("gaussian behind the camera is culled") {
        Intrinsics k = camera_intrinsics(32, 32);
        GaussianScene scene = single_splat({0, 0, -1.0}, 0.1, 0.5, {1, 1, 1});
        CHECK_FALSE(project_gaussian(scene, 0, CameraPose{}, k, cfg).has_value());
    }
    SECTION("doubling the focal doubles the projected std pre-dilation") {
        const double z = 2.0, s = 0.1;
        GaussianScene scene = single_splat({0, 0, z}, s, 0.5, {1, 1, 1});
        auto a = project_gaussian(scene, 0, CameraPose{}, camera_intrinsics(64, 32), cfg);
        auto b = project_gaussian(scene, 0, CameraPose{}, camera_intrinsics(64, 64), cfg);
        REQUIRE(a.has_value());
        REQUIRE(b.has_value());
        const double std_a = std::sqrt(a->cov2d[0] - cfg.dilation);
        const double std_b = std::sqrt(b->cov2d[0] - cfg.dilation);
        CHECK(std_b == Catch::Approx(2.0 * std_a).epsilon(1e-10));
    }
}

TEST_CASE("sh_eval") {
    SECTION("dc-only coefficients give a direction-free color") {
        Tensor coeffs = Tensor::zeros({3, 16});
        coeffs[0] = 0.7;  // red channel dc
        Rng rng(3);
        for (int rep = 0; rep < 5; ++rep) {
            Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
            dir.normalize();
            auto rgb = sh_eval(coeffs, dir);
            CHECK(rgb[0] == Catch::Approx(0.28209479177 * 0.7 + 0.5).epsilon(1e-9));
            CHECK(rgb[1] == Catch::Approx(0.5));
        }
    }
    SECTION("degree-1 z coefficient is odd about the equator") {
        Tensor coeffs = Tensor::zeros({3, 16});
        coeffs[2] = 0.3;  // red channel, z-linear band
        auto up = sh_eval(coeffs, {0, 0, 1});
        auto down = sh_eval(coeffs, {0, 0, -1});
        CHECK(up[0] - 0.5 == Catch::Approx(-(down[0] - 0.5)).epsilon(1e-12));
    }
    SECTION("all-zero coefficients give mid-grey") {
        auto rgb = sh_eval(Tensor::zeros({3, 16}), {0, 1, 0});
        for (int c = 0; c < 3; ++c) CHECK(rgb[c] == 0.5);
    }
}

TEST_CASE("render forward") {
    RenderConfig cfg;
    SECTION("empty scene renders the background with zero support") {
        cfg.background = {0.2, 0.4, 0.6};
        GaussianScene scene;
        scene.means = Tensor(Shape{0, 3});
        scene.scales = Tensor(Shape{0, 3});
        scene.rotations = Tensor(Shape{0, 3, 3});
        scene.opacities = Tensor(Shape{0, 1});
        scene.sh = Tensor(Shape{0, 3, 16});
        Intrinsics k = camera_intrinsics(8, 8);
        RenderOutput out = render(scene, CameraPose{}, k, cfg);
        for (std::size_t p = 0; p < 64; ++p) {
            CHECK(out.color[p * 3 + 0] == 0.2);
            CHECK(out.color[p * 3 + 1] == 0.4);
            CHECK(out.color[p * 3 + 2] == 0.6);
            CHECK(out.accum[p] == 0.0);
            CHECK(out.depth[p] == 0.0);
        }
    }
    SECTION("single splat at a pixel center blends one term") {
        // principal point at (4.5, 4.5) = center of pixel (4,4); conic distance 0
        Intrinsics k;
        k.fx = k.fy = 8.0;
        k.cx = k.cy = 4.5;
        k.width = k.height = 8;
        GaussianScene scene = single_splat({0, 0, 1.0}, 0.2, 0.6, {0.9, 0.7, 0.2});
        RenderOutput out = render(scene, CameraPose{}, k, cfg);
        const std::size_t p = 4 * 8 + 4;
        CHECK(out.color[p * 3 + 0] == Catch::Approx(0.6 * 0.9).epsilon(1e-9));
        CHECK(out.color[p * 3 + 1] == Catch::Approx(0.6 * 0.7).epsilon(1e-9));
        CHECK(out.color[p * 3 + 2] == Catch::Approx(0.6 * 0.2).epsilon(1e-9));
        CHECK(out.accum[p] == Catch::Approx(0.6).epsilon(1e-12));
        CHECK(out.depth[p] == Catch::Approx(1.0).epsilon(1e-9));
    }
    SECTION("two co-located half-opacity splats accumulate to three quarters") {
        Intrinsics k;
        k.fx = k.fy = 8.0;
        k.cx = k.cy = 4.5;
        k.width = k.height = 8;
        GaussianScene one = single_splat({0, 0, 1.0}, 0.2, 0.5, {1, 1, 1});
        GaussianScene scene = concat_scenes(one, one);
        RenderOutput out = render(scene, CameraPose{}, k, cfg);
        CHECK(out.accum[4 * 8 + 4] == Catch::Approx(0.75).epsilon(1e-12));
    }
    SECTION("depth of a single-splat scene equals its view z wherever covered") {
        Rng rng(7);
        GaussianScene scene = random_scene(rng, 1);
        Intrinsics k = camera_intrinsics(32, 32);
        RenderOutput out = render(scene, CameraPose{}, k, RenderConfig{});
        const double z = scene.means[2];
        for (std::size_t p = 0; p < 32 * 32; ++p)
            if (out.accum[p] > 0.0) CHECK(out.depth[p] == Catch::Approx(z).epsilon(1e-9));
    }
}

TEST_CASE("tiled renderer is bitwise equal to the reference") {
    Rng rng(11);
    RenderConfig cfg;
    cfg.tile_size = 16;
    Intrinsics k = camera_intrinsics(32, 32);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t n = 1 + rng.index(50);
        GaussianScene scene = random_scene(rng, n);
        RenderOutput tiled = render(scene, CameraPose{}, k, cfg);
        RenderOutput ref = render_reference(scene, CameraPose{}, k, cfg);
        bool equal = true;
        for (std::size_t i = 0; i < tiled.color.numel(); ++i)
            equal = equal && tiled.color[i] == ref.color[i];
        for (std::size_t i = 0; i < tiled.depth.numel(); ++i) {
            equal = equal && tiled.depth[i] == ref.depth[i];
            equal = equal && tiled.accum[i] == ref.accum[i];
        }
        CHECK(equal);
    }
}

TEST_CASE("threaded forward matches single-threaded output bitwise") {
    Rng rng(12);
    GaussianScene scene = random_scene(rng, 30);
    Intrinsics k = camera_intrinsics(32, 32);
    RenderConfig one;
    RenderConfig four = one;
    four.threads = 4;
    RenderOutput a = render(scene, CameraPose{}, k, one);
    RenderOutput b = render(scene, CameraPose{}, k, four);
    for (std::size_t i = 0; i < a.color.numel(); ++i) CHECK(a.color[i] == b.color[i]);
}

TEST_CASE("accumulation identity and output ranges") {
    Rng rng(13);
    RenderConfig cfg;
    Intrinsics k = camera_intrinsics(32, 32);
    for (int rep = 0; rep < 3; ++rep) {
        GaussianScene scene = random_scene(rng, 20);
        // keep SH colors inside [0,1] for the range check
        for (std::size_t i = 0; i < scene.sh.numel(); ++i) scene.sh[i] *= 0.1;
        RenderOutput out = render(scene, CameraPose{}, k, cfg);

        // independent recomputation of 1 - prod(1 - alpha') per pixel
        std::vector<Splat2D> splats = project_splats(scene, CameraPose{}, k, cfg);
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                double prod = 1.0;
                for (const Splat2D& s : splats) {
                    if (prod < cfg.transmittance_min) break;
                    const double dx = px - s.mean_x, dy = py - s.mean_y;
                    const double power =
                        0.5 * (s.conic_a * dx * dx + s.conic_c * dy * dy) + s.conic_b * dx * dy;
                    if (power > cfg.power_cutoff) continue;
                    const double alpha = std::min(s.alpha * std::exp(-power), cfg.alpha_clamp);
                    if (alpha < cfg.alpha_min) continue;
                    prod *= 1.0 - alpha;
                }
                const std::size_t p = y * 32 + x;
                CHECK(std::abs(out.accum[p] - (1.0 - prod)) < 1e-9);
                CHECK(out.accum[p] >= 0.0);
                CHECK(out.accum[p] <= 1.0);
                for (int c = 0; c < 3; ++c) {
                    CHECK(out.color[p * 3 + c] >= 0.0);
                    CHECK(out.color[p * 3 + c] <= 1.0);
                }
            }
    }
}

TEST_CASE("rendering is invariant to gaussian order") {
    Rng rng(17);
    GaussianScene scene = random_scene(rng, 12);
    Intrinsics k = camera_intrinsics(32, 32);
    RenderConfig cfg;
    RenderOutput base = render(scene, CameraPose{}, k, cfg);

    // reversed storage order; depths are distinct with probability one
    GaussianScene rev;
    const std::size_t n = scene.count();
    rev.means = Tensor(Shape{n, 3});
    rev.scales = Tensor(Shape{n, 3});
    rev.rotations = Tensor(Shape{n, 3, 3});
    rev.opacities = Tensor(Shape{n, 1});
    rev.sh = Tensor(Shape{n, 3, 16});
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = n - 1 - i;
        std::copy_n(scene.means.data() + j * 3, 3, rev.means.data() + i * 3);
        std::copy_n(scene.scales.data() + j * 3, 3, rev.scales.data() + i * 3);
        std::copy_n(scene.rotations.data() + j * 9, 9, rev.rotations.data() + i * 9);
        rev.opacities[i] = scene.opacities[j];
        std::copy_n(scene.sh.data() + j * 48, 48, rev.sh.data() + i * 48);
    }
    RenderOutput out = render(rev, CameraPose{}, k, cfg);
    for (std::size_t i = 0; i < base.color.numel(); ++i) CHECK(base.color[i] == out.color[i]);
    for (std::size_t i = 0; i < base.depth.numel(); ++i) CHECK(base.depth[i] == out.depth[i]);
}

TEST_CASE("render backward") {
    SECTION("single splat opacity gradient matches finite differences") {
        Intrinsics k = camera_intrinsics(8, 8);
        RenderConfig cfg;
        GaussianScene scene = single_splat({0.05, -0.03, 1.2}, 0.15, 0.5, {0.8, 0.6, 0.4});
        auto mean_color = [&](double alpha) {
            GaussianScene s2 = scene;
            s2.opacities[0] = alpha;
            RenderOutput out = render(s2, CameraPose{}, k, cfg);
            double acc = 0.0;
            for (std::size_t i = 0; i < out.color.numel(); ++i) acc += out.color[i];
            return acc / static_cast<double>(out.color.numel());
        };
        const double eps = 1e-6;
        const double numeric = (mean_color(0.5 + eps) - mean_color(0.5 - eps)) / (2 * eps);
        Tensor g_color = Tensor::full({8, 8, 3}, 1.0 / (8 * 8 * 3));
        RenderGrads grads = render_backward(scene, CameraPose{}, k, cfg, g_color,
                                            Tensor::zeros({8, 8}), Tensor::zeros({8, 8}));
        CHECK(std::abs(grads.opacities[0] - numeric) /
                  std::max({1.0, std::abs(numeric), std::abs(grads.opacities[0])}) <
              1e-5);
    }
    SECTION("fully transparent splat gets zero color gradient") {
        Intrinsics k = camera_intrinsics(8, 8);
        GaussianScene scene = single_splat({0, 0, 1.0}, 0.2, 0.0, {0.9, 0.9, 0.9});
        RenderGrads grads = render_backward(scene, CameraPose{}, k, RenderConfig{},
                                            Tensor::full({8, 8, 3}, 1.0), Tensor::zeros({8, 8}),
                                            Tensor::zeros({8, 8}));
        for (std::size_t i = 0; i < grads.sh.numel(); ++i) CHECK(grads.sh[i] == 0.0);
    }
    SECTION("background gradient of an occluded pixel is the residual transmittance") {
        Intrinsics k;
        k.fx = k.fy = 8.0;
        k.cx = k.cy = 4.5;
        k.width = k.height = 8;
        GaussianScene wall = single_splat({0, 0, 1.0}, 1.0, 0.9, {1, 1, 1});
        GaussianScene scene = wall;
        for (int rep = 0; rep < 4; ++rep) scene = concat_scenes(scene, wall);
        Tensor g_color = Tensor::zeros({8, 8, 3});
        g_color[(4 * 8 + 4) * 3] = 1.0;  // red channel of the principal pixel
        RenderConfig cfg;
        RenderOutput out = render(scene, CameraPose{}, k, cfg);
        RenderGrads grads = render_backward(scene, CameraPose{}, k, cfg, g_color,
                                            Tensor::zeros({8, 8}), Tensor::zeros({8, 8}));
        const double t_end = 1.0 - out.accum[4 * 8 + 4];
        CHECK(t_end <= 1e-4);
        CHECK(grads.background[0] == Catch::Approx(t_end).epsilon(1e-12));
        CHECK(grads.background[1] == 0.0);
    }
    SECTION("full forward+backward finite differences on small scenes") {
        Rng rng(23);
        Intrinsics k = camera_intrinsics(8, 8);
        RenderConfig cfg;
        for (int rep = 0; rep < 2; ++rep) {
            GaussianScene scene = random_scene(rng, 3, /*tame=*/true);
            Tensor weights = Rng(101 + rep).uniform_tensor({8, 8, 5}, -1.0, 1.0);
            GraphFn fn = [&](Graph& g, const std::vector<Value>& in) {
                GaussianSceneValues sv;
                sv.count = 3;
                sv.means = in[0];
                sv.scales = in[1];
                sv.rotations = in[2];
                sv.opacities = in[3];
                sv.sh = in[4];
                RenderMaps maps = render_node(g, sv, in[5], CameraPose{}, k, cfg);
                Value packed = concat({maps.color, reshape(maps.depth, {8, 8, 1}),
                                       reshape(maps.accum, {8, 8, 1})},
                                      2);
                return sum(mul(packed, g.constant(weights)));
            };
            std::vector<Tensor> point = {scene.means,     scene.scales, scene.rotations,
                                         scene.opacities, scene.sh,     Tensor::zeros({3})};
            CHECK(grad_check(fn, point) < 1e-4);
        }
    }
}
