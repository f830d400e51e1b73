#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "helpers.hpp"
#include "tsplat/geometry.hpp"

using namespace tsplat;
using tsplat::testing::look_at;
using tsplat::testing::random_pose;
using tsplat::testing::random_rotation;
using tsplat::testing::rotation_y;

namespace {

Intrinsics toy_intrinsics(std::size_t w = 8, std::size_t h = 8) {
    Intrinsics k;
    k.fx = k.fy = static_cast<double>(w);
    k.cx = static_cast<double>(w) / 2.0;
    k.cy = static_cast<double>(h) / 2.0;
    k.width = w;
    k.height = h;
    return k;
}

CameraView pose_only_view(const CameraPose& p) {
    CameraView v;
    v.pose = p;
    v.intrinsics = toy_intrinsics();
    return v;
}

}  // namespace

TEST_CASE("average_pose") {
    SECTION("single pose is returned unchanged") {
        Rng rng(3);
        CameraPose p = random_pose(rng);
        CameraPose avg = average_pose({p});
        CHECK((avg.rotation - p.rotation).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((avg.center - p.center).norm() < 1e-12);
    }
    SECTION("two identity rotations average centers") {
        CameraPose a, b;
        b.center = Eigen::Vector3d(2, 0, 0);
        CameraPose avg = average_pose({a, b});
        CHECK((avg.center - Eigen::Vector3d(1, 0, 0)).norm() < 1e-12);
        CHECK((avg.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("symmetric y-rotations average to the middle rotation") {
        Rng rng(5);
        std::vector<CameraPose> poses;
        for (double deg : {-10.0, 0.0, 10.0}) {
            CameraPose p;
            p.rotation = rotation_y(deg);
            p.center = Eigen::Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
            poses.push_back(p);
        }
        // oracle: re-orthonormalize the analytically averaged forward axis
        Eigen::Vector3d fwd = Eigen::Vector3d::Zero();
        for (double deg : {-10.0, 0.0, 10.0})
            fwd += Eigen::Vector3d(std::sin(deg * EIGEN_PI / 180.0), 0.0,
                                   std::cos(deg * EIGEN_PI / 180.0));
        fwd.normalize();
        CHECK((fwd - Eigen::Vector3d(0, 0, 1)).norm() < 1e-12);
        CameraPose avg = average_pose(poses);
        CHECK((avg.rotation - rotation_y(0.0)).cwiseAbs().maxCoeff() < 1e-6);
    }
    SECTION("opposing forward axes are rejected") {
        CameraPose a;
        CameraPose b;
        b.rotation = Eigen::AngleAxisd(EIGEN_PI, Eigen::Vector3d::UnitY()).toRotationMatrix();
        CHECK_THROWS_AS(average_pose({a, b}), std::runtime_error);
    }
}

TEST_CASE("canonicalize") {
    SECTION("single identity view maps to identity with scale one") {
        NormalizedScene s = canonicalize({pose_only_view(CameraPose{})});
        CHECK(s.scale == 1.0);
        CHECK((s.views[0].pose.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <
              1e-12);
        CHECK(s.views[0].pose.center.norm() < 1e-12);
    }
    SECTION("two views along x normalize to a unit-diameter pair") {
        CameraPose a, b;
        b.center = Eigen::Vector3d(3, 0, 0);
        NormalizedScene s = canonicalize({pose_only_view(a), pose_only_view(b)});
        CHECK(s.scale == Catch::Approx(3.0));
        CHECK((s.views[0].pose.center - Eigen::Vector3d(-0.5, 0, 0)).norm() < 1e-12);
        CHECK((s.views[1].pose.center - Eigen::Vector3d(0.5, 0, 0)).norm() < 1e-12);
    }
    SECTION("re-canonicalizing its own output is the identity") {
        Rng rng(11);
        std::vector<CameraView> views;
        for (int i = 0; i < 4; ++i) views.push_back(pose_only_view(random_pose(rng)));
        NormalizedScene s1 = canonicalize(views);
        NormalizedScene s2 = canonicalize(s1.views);
        CHECK(s2.scale == Catch::Approx(1.0).margin(1e-9));
        for (std::size_t i = 0; i < views.size(); ++i) {
            CHECK((s2.views[i].pose.rotation - s1.views[i].pose.rotation).cwiseAbs().maxCoeff() <
                  1e-9);
            CHECK((s2.views[i].pose.center - s1.views[i].pose.center).norm() < 1e-9);
        }
    }
    SECTION("normalized diameter is one for two or more views") {
        Rng rng(13);
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<CameraView> views;
            const int n = 2 + static_cast<int>(rng.index(5));
            for (int i = 0; i < n; ++i) views.push_back(pose_only_view(random_pose(rng)));
            NormalizedScene s = canonicalize(views);
            double diameter = 0.0;
            for (std::size_t a = 0; a < s.views.size(); ++a)
                for (std::size_t b = a + 1; b < s.views.size(); ++b)
                    diameter = std::max(diameter,
                                        (s.views[a].pose.center - s.views[b].pose.center).norm());
            CHECK(diameter == Catch::Approx(1.0).margin(1e-9));
        }
    }
    SECTION("canonicalization is similarity-equivariant") {
        Rng rng(17);
        std::vector<CameraView> base;
        for (int i = 0; i < 5; ++i) base.push_back(pose_only_view(random_pose(rng)));
        NormalizedScene ref = canonicalize(base);
        for (int rep = 0; rep < 100; ++rep) {
            const Eigen::Matrix3d q = random_rotation(rng);
            const Eigen::Vector3d t(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
            const double c = rng.uniform(0.1, 10.0);
            std::vector<CameraView> moved = base;
            for (CameraView& v : moved) {
                v.pose.rotation = q * v.pose.rotation;
                v.pose.center = c * (q * v.pose.center) + t;
            }
            NormalizedScene got = canonicalize(moved);
            for (std::size_t i = 0; i < base.size(); ++i) {
                CHECK((got.views[i].pose.rotation - ref.views[i].pose.rotation)
                          .cwiseAbs()
                          .maxCoeff() < 1e-6);
                CHECK((got.views[i].pose.center - ref.views[i].pose.center).norm() < 1e-6);
            }
        }
    }
    SECTION("coincident centers with two or more views are rejected") {
        CameraPose a, b;
        b.rotation = rotation_y(5.0);
        CHECK_THROWS_AS(canonicalize({pose_only_view(a), pose_only_view(b)}), std::runtime_error);
    }
}

TEST_CASE("plucker_rays") {
    Intrinsics k = toy_intrinsics(5, 5);  // cx = cy = 2.5: pixel (2,2) is principal
    SECTION("identity pose at origin, principal pixel") {
        PluckerMap m = plucker_rays(CameraPose{}, k);
        const double* px = m.data.data() + (2 * 5 + 2) * 6;
        CHECK(px[0] == Catch::Approx(0.0).margin(1e-12));
        CHECK(px[1] == Catch::Approx(0.0).margin(1e-12));
        CHECK(px[2] == Catch::Approx(1.0).margin(1e-12));
        CHECK(px[3] == 0.0);
        CHECK(px[4] == 0.0);
        CHECK(px[5] == 0.0);
    }
    SECTION("offset camera produces the hand-computed moment") {
        CameraPose p;
        p.center = Eigen::Vector3d(1, 0, 0);
        PluckerMap m = plucker_rays(p, k);
        const double* px = m.data.data() + (2 * 5 + 2) * 6;
        CHECK(px[2] == Catch::Approx(1.0).margin(1e-12));
        // (1,0,0) x (0,0,1) = (0,-1,0)
        CHECK(px[3] == Catch::Approx(0.0).margin(1e-12));
        CHECK(px[4] == Catch::Approx(-1.0).margin(1e-12));
        CHECK(px[5] == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("unit direction and orthogonal moment at every pixel") {
        Rng rng(23);
        for (int rep = 0; rep < 5; ++rep) {
            PluckerMap m = plucker_rays(random_pose(rng), k);
            for (std::size_t i = 0; i < 25; ++i) {
                const double* px = m.data.data() + i * 6;
                const double norm = std::sqrt(px[0] * px[0] + px[1] * px[1] + px[2] * px[2]);
                const double dot = px[0] * px[3] + px[1] * px[4] + px[2] * px[5];
                CHECK(std::abs(norm - 1.0) < 1e-9);
                CHECK(std::abs(dot) < 1e-9);
            }
        }
    }
}

TEST_CASE("patchify") {
    SECTION("whole image as a single patch flattens row-major") {
        Rng rng(29);
        Tensor img = rng.uniform_tensor({8, 8, 1}, 0, 1);
        Tensor p = patchify(img, 8);
        REQUIRE(p.shape() == Shape{1, 64});
        for (std::size_t i = 0; i < 64; ++i) CHECK(p[i] == img[i]);
    }
    SECTION("patch zero covers the top-left block") {
        Tensor img(Shape{16, 16, 1});
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x) img[y * 16 + x] = static_cast<double>(y * 16 + x);
        Tensor p = patchify(img, 8);
        REQUIRE(p.shape() == Shape{4, 64});
        for (std::size_t dy = 0; dy < 8; ++dy)
            for (std::size_t dx = 0; dx < 8; ++dx)
                CHECK(p.at({0, dy * 8 + dx}) == static_cast<double>(dy * 16 + dx));
    }
    SECTION("unpatchify inverts patchify exactly") {
        Rng rng(31);
        Tensor img = rng.uniform_tensor({32, 32, 3}, -1, 1);
        Tensor back = unpatchify(patchify(img, 8), 32, 32, 3, 8);
        for (std::size_t i = 0; i < img.numel(); ++i) CHECK(back[i] == img[i]);
    }
    SECTION("non-divisible dimensions are rejected") {
        CHECK_THROWS_AS(patchify(Tensor(Shape{10, 16, 1}), 8), std::invalid_argument);
    }
}

TEST_CASE("camera_code") {
    SECTION("fourier encoding of the zero vector is all sin 0 / cos 1") {
        Tensor pe = fourier_encode(Eigen::Vector3d::Zero(), 6);
        REQUIRE(pe.numel() == 36);
        for (std::size_t k = 0; k < 6; ++k) {
            for (std::size_t c = 0; c < 3; ++c) CHECK(pe[k * 6 + c] == 0.0);
            for (std::size_t c = 0; c < 3; ++c) CHECK(pe[k * 6 + 3 + c] == 1.0);
        }
    }
    SECTION("identical views produce identical codes of ray width") {
        const std::size_t hidden = 8, ray_width = 8, freqs = 6;
        Rng rng(37);
        Graph g;
        CameraCodeParams params;
        params.mlp_w1 = g.leaf(rng.normal_tensor({4, hidden}, 0, 0.1));
        params.mlp_b1 = g.leaf(Tensor::zeros({hidden}));
        params.mlp_w2 = g.leaf(rng.normal_tensor({hidden, hidden}, 0, 0.1));
        params.mlp_b2 = g.leaf(Tensor::zeros({hidden}));
        params.proj_w = g.leaf(rng.normal_tensor({hidden + freqs * 6, ray_width}, 0, 0.1));
        params.proj_b = g.leaf(Tensor::zeros({ray_width}));
        CameraPose pose = random_pose(rng);
        Intrinsics k = toy_intrinsics();
        Value a = camera_code(g, params, pose, k, freqs);
        Value b = camera_code(g, params, pose, k, freqs);
        REQUIRE(a.val().shape() == Shape{ray_width});
        for (std::size_t i = 0; i < ray_width; ++i) CHECK(a.val()[i] == b.val()[i]);
    }
}
