#pragma once

// Camera pose algebra, scene canonicalization, and the ray/context geometry
// consumed by the encoder. Everything here is a pure function of its inputs;
// only camera_code carries learned parameters (it runs through the graph).
//
// Conventions, normative for the whole project:
//   - CameraPose.rotation is world-from-camera, +z is the look direction,
//     columns are the camera axes expressed in world coordinates.
//   - Rays use pixel centers: pixel (u, v) maps through (u + 0.5, v + 0.5).
//   - patchify ordering: patches row-major over the patch grid; inside a
//     patch, pixels row-major, channels fastest. All modules depend on this.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsplat/autodiff.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

struct CameraPose {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d center = Eigen::Vector3d::Zero();

    Eigen::Vector3d forward() const { return rotation.col(2); }
    Eigen::Vector3d up() const { return rotation.col(1); }

    void validate(double tol = 1e-9) const {
        const Eigen::Matrix3d err = rotation * rotation.transpose() - Eigen::Matrix3d::Identity();
        if (err.cwiseAbs().maxCoeff() > tol)
            throw std::invalid_argument("camera rotation is not orthonormal");
        if (std::abs(rotation.determinant() - 1.0) > tol)
            throw std::invalid_argument("camera rotation determinant must be +1");
    }
};

struct Intrinsics {
    double fx = 0.0, fy = 0.0;
    double cx = 0.0, cy = 0.0;
    std::size_t width = 0, height = 0;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0))
            throw std::invalid_argument("intrinsics: focal lengths must be positive");
        if (!(cx > 0.0) || !(cx < static_cast<double>(width)) || !(cy > 0.0) ||
            !(cy < static_cast<double>(height)))
            throw std::invalid_argument("intrinsics: principal point must lie inside the image");
    }
};

struct CameraView {
    CameraPose pose;
    Intrinsics intrinsics;
    Tensor image;  // [H, W, 3] in [0,1]; may be empty for pose-only views
};

// Per-pixel (direction, moment) 6-vectors in the frame the pose lives in.
struct PluckerMap {
    Tensor data;  // [H, W, 6], channels (dx, dy, dz, mx, my, mz)
};

struct NormalizedScene {
    std::vector<CameraView> views;
    double scale = 1.0;        // original constellation diameter
    CameraPose average_pose;   // the frame all views were re-expressed in
};

// ---------------------------------------------------------------------------

// Average camera frame: mean center; rotation from averaged forward/up axes,
// Gram-Schmidt with the forward axis kept (right = up x forward).
inline CameraPose average_pose(const std::vector<CameraPose>& poses) {
    if (poses.empty()) throw std::invalid_argument("average_pose: no poses");
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    Eigen::Vector3d fwd = Eigen::Vector3d::Zero();
    Eigen::Vector3d up = Eigen::Vector3d::Zero();
    for (const CameraPose& p : poses) {
        p.validate();
        center += p.center;
        fwd += p.forward();
        up += p.up();
    }
    center /= static_cast<double>(poses.size());
    if (fwd.norm() < 1e-8)
        throw std::runtime_error("average_pose: degenerate averaged viewing direction");
    fwd.normalize();
    up -= up.dot(fwd) * fwd;
    if (up.norm() < 1e-8)
        throw std::runtime_error("average_pose: degenerate averaged up axis");
    up.normalize();
    const Eigen::Vector3d right = up.cross(fwd);
    CameraPose out;
    out.rotation.col(0) = right;
    out.rotation.col(1) = up;
    out.rotation.col(2) = fwd;
    out.center = center;
    return out;
}

// T_hat = T_avg^-1 T, with the center additionally divided by `scale`.
inline CameraPose transform_to_frame(const CameraPose& avg, double scale, const CameraPose& pose) {
    CameraPose out;
    out.rotation = avg.rotation.transpose() * pose.rotation;
    out.center = avg.rotation.transpose() * (pose.center - avg.center) / scale;
    return out;
}

// Express all views in the average-camera frame and normalize the camera
// constellation diameter to one. With a single view the diameter is
// undefined and the division is skipped (scale reported as 1).
inline NormalizedScene canonicalize(const std::vector<CameraView>& views) {
    if (views.empty()) throw std::invalid_argument("canonicalize: no views");
    std::vector<CameraPose> poses;
    poses.reserve(views.size());
    for (const CameraView& v : views) poses.push_back(v.pose);
    const CameraPose avg = average_pose(poses);

    double scale = 1.0;
    if (views.size() >= 2) {
        double diameter = 0.0;
        for (std::size_t a = 0; a < views.size(); ++a)
            for (std::size_t b = a + 1; b < views.size(); ++b)
                diameter = std::max(diameter, (poses[a].center - poses[b].center).norm());
        if (diameter < 1e-12)
            throw std::runtime_error("canonicalize: all camera centers coincide, scale is zero");
        scale = diameter;
    }

    NormalizedScene scene;
    scene.scale = scale;
    scene.average_pose = avg;
    scene.views = views;
    for (CameraView& v : scene.views) v.pose = transform_to_frame(avg, scale, v.pose);
    return scene;
}

// Dense Plucker-ray map: direction d = normalize(R K^-1 (u+.5, v+.5, 1)),
// moment m = center x d. Satisfies |d| = 1 and d.m = 0 at every pixel.
inline PluckerMap plucker_rays(const CameraPose& pose, const Intrinsics& intr) {
    pose.validate();
    intr.validate();
    const std::size_t h = intr.height, w = intr.width;
    Tensor data(Shape{h, w, 6});
    for (std::size_t v = 0; v < h; ++v)
        for (std::size_t u = 0; u < w; ++u) {
            const Eigen::Vector3d cam((static_cast<double>(u) + 0.5 - intr.cx) / intr.fx,
                                      (static_cast<double>(v) + 0.5 - intr.cy) / intr.fy, 1.0);
            const Eigen::Vector3d d = (pose.rotation * cam).normalized();
            const Eigen::Vector3d m = pose.center.cross(d);
            double* px = data.data() + (v * w + u) * 6;
            px[0] = d.x();
            px[1] = d.y();
            px[2] = d.z();
            px[3] = m.x();
            px[4] = m.y();
            px[5] = m.z();
        }
    return PluckerMap{std::move(data)};
}

// ---------------------------------------------------------------------------
// Patch flattening. See the ordering contract at the top of this header.

inline Tensor patchify(const Tensor& map, std::size_t patch) {
    if (map.ndim() != 3) throw std::invalid_argument("patchify: input must be [H, W, F]");
    const std::size_t h = map.dim(0), w = map.dim(1), f = map.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw std::invalid_argument("patchify: dimensions " + shape_str(map.shape()) +
                                    " not divisible by patch size " + std::to_string(patch));
    const std::size_t gh = h / patch, gw = w / patch;
    Tensor out(Shape{gh * gw, patch * patch * f});
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            double* dst = out.data() + (py * gw + px) * patch * patch * f;
            for (std::size_t dy = 0; dy < patch; ++dy)
                for (std::size_t dx = 0; dx < patch; ++dx) {
                    const double* src = map.data() + ((py * patch + dy) * w + px * patch + dx) * f;
                    std::copy_n(src, f, dst + (dy * patch + dx) * f);
                }
        }
    return out;
}

inline Tensor unpatchify(const Tensor& patches, std::size_t h, std::size_t w, std::size_t f,
                         std::size_t patch) {
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw std::invalid_argument("unpatchify: dimensions not divisible by patch size");
    const std::size_t gh = h / patch, gw = w / patch;
    if (patches.ndim() != 2 || patches.dim(0) != gh * gw || patches.dim(1) != patch * patch * f)
        throw std::invalid_argument("unpatchify: patch tensor has shape " +
                                    shape_str(patches.shape()));
    Tensor out(Shape{h, w, f});
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            const double* src = patches.data() + (py * gw + px) * patch * patch * f;
            for (std::size_t dy = 0; dy < patch; ++dy)
                for (std::size_t dx = 0; dx < patch; ++dx) {
                    double* dst = out.data() + ((py * patch + dy) * w + px * patch + dx) * f;
                    std::copy_n(src + (dy * patch + dx) * f, f, dst);
                }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Per-view camera code.

// NeRF-style Fourier features: per frequency k, [sin(2^k x); cos(2^k x)]
// over the three coordinates. 6 frequencies -> 36 values.
inline Tensor fourier_encode(const Eigen::Vector3d& x, std::size_t frequencies) {
    Tensor out(Shape{frequencies * 6});
    std::size_t at = 0;
    for (std::size_t k = 0; k < frequencies; ++k) {
        const double scale = std::pow(2.0, static_cast<double>(k));
        for (int c = 0; c < 3; ++c) out[at++] = std::sin(scale * x[c]);
        for (int c = 0; c < 3; ++c) out[at++] = std::cos(scale * x[c]);
    }
    return out;
}

// Resolution-normalized intrinsics feature (fx/W, fy/H, cx/W, cy/H).
inline Tensor intrinsics_feature(const Intrinsics& intr) {
    const double w = static_cast<double>(intr.width);
    const double h = static_cast<double>(intr.height);
    return Tensor::of({1, 4}, {intr.fx / w, intr.fy / h, intr.cx / w, intr.cy / h});
}

struct CameraCodeParams {
    Value mlp_w1, mlp_b1;  // [4, hidden], [hidden]
    Value mlp_w2, mlp_b2;  // [hidden, hidden], [hidden]
    Value proj_w, proj_b;  // [hidden + pe, ray_width], [ray_width]
};

// e_i: learned intrinsics feature concatenated with Fourier features of the
// camera center, linearly projected to the ray-embedding width.
inline Value camera_code(Graph& g, const CameraCodeParams& params, const CameraPose& pose,
                         const Intrinsics& intr, std::size_t fourier_frequencies) {
    Value phi = g.constant(intrinsics_feature(intr));
    Value hid = gelu(add(matmul(phi, params.mlp_w1), params.mlp_b1));
    Value feat = add(matmul(hid, params.mlp_w2), params.mlp_b2);
    Tensor pe = fourier_encode(pose.center, fourier_frequencies);
    Value pe_row = g.constant(pe.reshaped({1, pe.numel()}));
    Value joined = concat({feat, pe_row}, 1);
    Value code = add(matmul(joined, params.proj_w), params.proj_b);
    return reshape(code, {code.val().dim(1)});
}

}  // namespace tsplat
