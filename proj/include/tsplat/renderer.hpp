#pragma once

// Differentiable CPU splatting. 3-D Gaussians are projected with the EWA
// perspective approximation, globally depth-sorted (ties by index), and
// alpha-blended front to back into color, expected-depth, and accumulation
// maps. A tiled forward path and the brute-force per-pixel reference share
// the same per-pixel arithmetic and skip rules, so their outputs are bitwise
// identical. The backward pass recomputes per-pixel blending and applies
// hand-derived adjoints through blending, the conic, the projection, and the
// spherical-harmonics color path; it is verified end to end by finite
// differences.
//
// Per-pixel contribution rule (identical in both renderers):
//   power = 1/2 d^T conic d;  skipped when power > power_cutoff (3 sigma)
//   alpha = min(opacity * exp(-power), alpha_clamp); skipped when < alpha_min
//   blending terminates once transmittance < transmittance_min

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <thread>
#include <vector>

#include "tsplat/autodiff.hpp"
#include "tsplat/decoder.hpp"
#include "tsplat/geometry.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

struct RenderConfig {
    double z_near = 0.01;
    double dilation = 0.3;            // px^2 low-pass added to the projected covariance
    double alpha_clamp = 0.99;
    double alpha_min = 1.0 / 255.0;
    double power_cutoff = 4.5;        // half squared Mahalanobis radius (3 sigma)
    double transmittance_min = 1e-4;
    std::array<double, 3> background{0.0, 0.0, 0.0};
    std::size_t tile_size = 16;
    unsigned threads = 1;
};

struct RenderOutput {
    Tensor color;  // [H, W, 3], composited over the background, unclamped
    Tensor depth;  // [H, W], expected depth normalized by accumulation
    Tensor accum;  // [H, W], 1 - product of (1 - alpha') over blended splats
};

struct Splat2D {
    double mean_x = 0.0, mean_y = 0.0;   // pixel coordinates
    double conic_a = 0.0, conic_b = 0.0, conic_c = 0.0;  // inverse 2-D covariance
    double depth = 0.0;                  // view-space z
    std::array<double, 3> color{};       // SH-evaluated rgb
    double alpha = 0.0;                  // base opacity
    // cached projection state for the backward pass
    std::array<double, 3> cov2d{};       // dilated upper triangle (a, b, c)
    std::array<double, 3> p_cam{};
    std::array<double, 3> rgb_raw{};     // pre-clamp SH output
    double radius_x = 0.0, radius_y = 0.0;
    std::size_t index = 0;               // original gaussian index
};

struct RenderGrads {
    Tensor means;       // [N, 3]
    Tensor scales;      // [N, 3]
    Tensor rotations;   // [N, 3, 3]
    Tensor opacities;   // [N, 1]
    Tensor sh;          // [N, 3, D_sh]
    Tensor background;  // [3]
};

// ---------------------------------------------------------------------------
// Real spherical harmonics, degree <= 3, in the usual splatting convention.

namespace sh {

inline constexpr double kC0 = 0.28209479177387814;
inline constexpr double kC1 = 0.48860251190291987;
inline constexpr std::array<double, 5> kC2 = {1.0925484305920792, -1.0925484305920792,
                                              0.31539156525252005, -1.0925484305920792,
                                              0.5462742152960396};
inline constexpr std::array<double, 7> kC3 = {-0.5900435899266435, 2.890611442640554,
                                              -0.4570457994644658, 0.3731763325901154,
                                              -0.4570457994644658, 1.445305721320277,
                                              -0.5900435899266435};

inline void basis(double x, double y, double z, std::size_t coeffs, double* out) {
    out[0] = kC0;
    if (coeffs <= 1) return;
    out[1] = -kC1 * y;
    out[2] = kC1 * z;
    out[3] = -kC1 * x;
    if (coeffs <= 4) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    out[4] = kC2[0] * x * y;
    out[5] = kC2[1] * y * z;
    out[6] = kC2[2] * (2.0 * zz - xx - yy);
    out[7] = kC2[3] * x * z;
    out[8] = kC2[4] * (xx - yy);
    if (coeffs <= 9) return;
    out[9] = kC3[0] * y * (3.0 * xx - yy);
    out[10] = kC3[1] * x * y * z;
    out[11] = kC3[2] * y * (4.0 * zz - xx - yy);
    out[12] = kC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = kC3[4] * x * (4.0 * zz - xx - yy);
    out[14] = kC3[5] * z * (xx - yy);
    out[15] = kC3[6] * x * (xx - 3.0 * yy);
}

// d basis / d (x, y, z), laid out [coeff][axis].
inline void basis_grad(double x, double y, double z, std::size_t coeffs, double (*out)[3]) {
    for (std::size_t i = 0; i < coeffs; ++i) out[i][0] = out[i][1] = out[i][2] = 0.0;
    if (coeffs <= 1) return;
    out[1][1] = -kC1;
    out[2][2] = kC1;
    out[3][0] = -kC1;
    if (coeffs <= 4) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    out[4][0] = kC2[0] * y;
    out[4][1] = kC2[0] * x;
    out[5][1] = kC2[1] * z;
    out[5][2] = kC2[1] * y;
    out[6][0] = kC2[2] * -2.0 * x;
    out[6][1] = kC2[2] * -2.0 * y;
    out[6][2] = kC2[2] * 4.0 * z;
    out[7][0] = kC2[3] * z;
    out[7][2] = kC2[3] * x;
    out[8][0] = kC2[4] * 2.0 * x;
    out[8][1] = kC2[4] * -2.0 * y;
    if (coeffs <= 9) return;
    out[9][0] = kC3[0] * 6.0 * x * y;
    out[9][1] = kC3[0] * (3.0 * xx - 3.0 * yy);
    out[10][0] = kC3[1] * y * z;
    out[10][1] = kC3[1] * x * z;
    out[10][2] = kC3[1] * x * y;
    out[11][0] = kC3[2] * -2.0 * x * y;
    out[11][1] = kC3[2] * (4.0 * zz - xx - 3.0 * yy);
    out[11][2] = kC3[2] * 8.0 * y * z;
    out[12][0] = kC3[3] * -6.0 * x * z;
    out[12][1] = kC3[3] * -6.0 * y * z;
    out[12][2] = kC3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13][0] = kC3[4] * (4.0 * zz - 3.0 * xx - yy);
    out[13][1] = kC3[4] * -2.0 * x * y;
    out[13][2] = kC3[4] * 8.0 * x * z;
    out[14][0] = kC3[5] * 2.0 * x * z;
    out[14][1] = kC3[5] * -2.0 * y * z;
    out[14][2] = kC3[5] * (xx - yy);
    out[15][0] = kC3[6] * (3.0 * xx - 3.0 * yy);
    out[15][1] = kC3[6] * -6.0 * x * y;
}

}  // namespace sh

// rgb = max(0, SH(dir) . coeffs + 0.5) per channel. `coeffs` is [3, D_sh].
inline std::array<double, 3> sh_eval(const Tensor& coeffs, const Eigen::Vector3d& dir) {
    if (coeffs.ndim() != 2 || coeffs.dim(0) != 3)
        throw std::invalid_argument("sh_eval: coefficients must be [3, D_sh]");
    const std::size_t n = coeffs.dim(1);
    double basis[16];
    sh::basis(dir.x(), dir.y(), dir.z(), n, basis);
    std::array<double, 3> rgb{};
    for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.5;
        for (std::size_t k = 0; k < n; ++k) acc += basis[k] * coeffs[c * n + k];
        rgb[c] = std::max(acc, 0.0);
    }
    return rgb;
}

// Sigma = R diag(s^2) R^T.
inline Eigen::Matrix3d covariance3d(const Eigen::Vector3d& scale, const Eigen::Matrix3d& rotation) {
    return rotation * scale.array().square().matrix().asDiagonal() * rotation.transpose();
}

// ---------------------------------------------------------------------------
// Projection.

inline std::optional<Splat2D> project_gaussian(const GaussianScene& scene, std::size_t i,
                                               const CameraPose& pose, const Intrinsics& intr,
                                               const RenderConfig& cfg) {
    const Eigen::Map<const Eigen::Vector3d> mean(scene.means.data() + i * 3);
    const Eigen::Map<const Eigen::Vector3d> scale(scene.scales.data() + i * 3);
    const Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> rot(
        scene.rotations.data() + i * 9);

    const Eigen::Matrix3d w = pose.rotation.transpose();  // world to camera
    const Eigen::Vector3d p_cam = w * (mean - pose.center);
    if (p_cam.z() <= cfg.z_near) return std::nullopt;

    const double z = p_cam.z();
    const double u = intr.fx * p_cam.x() / z + intr.cx;
    const double v = intr.fy * p_cam.y() / z + intr.cy;

    Eigen::Matrix<double, 2, 3> jac;
    jac << intr.fx / z, 0.0, -intr.fx * p_cam.x() / (z * z), 0.0, intr.fy / z,
        -intr.fy * p_cam.y() / (z * z);
    const Eigen::Matrix<double, 2, 3> m = jac * w;
    const Eigen::Matrix3d sigma = covariance3d(scale, Eigen::Matrix3d(rot));
    Eigen::Matrix2d cov = m * sigma * m.transpose();
    cov(0, 0) += cfg.dilation;
    cov(1, 1) += cfg.dilation;

    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
    if (!(det > 0.0)) return std::nullopt;

    Splat2D s;
    s.index = i;
    s.mean_x = u;
    s.mean_y = v;
    s.cov2d = {cov(0, 0), cov(0, 1), cov(1, 1)};
    s.conic_a = cov(1, 1) / det;
    s.conic_b = -cov(0, 1) / det;
    s.conic_c = cov(0, 0) / det;
    s.depth = z;
    s.p_cam = {p_cam.x(), p_cam.y(), p_cam.z()};
    s.radius_x = 3.0 * std::sqrt(cov(0, 0));
    s.radius_y = 3.0 * std::sqrt(cov(1, 1));

    // cull when the 3-sigma extent misses every pixel center
    const double w_px = static_cast<double>(intr.width);
    const double h_px = static_cast<double>(intr.height);
    if (u + s.radius_x < 0.5 || u - s.radius_x > w_px - 0.5 || v + s.radius_y < 0.5 ||
        v - s.radius_y > h_px - 0.5)
        return std::nullopt;

    const Eigen::Vector3d to_mean = mean - pose.center;
    const double r = to_mean.norm();
    const Eigen::Vector3d dir = r > 0.0 ? Eigen::Vector3d(to_mean / r) : Eigen::Vector3d(0, 0, 1);
    const std::size_t n_coeffs = scene.sh.dim(2);
    double basis[16];
    sh::basis(dir.x(), dir.y(), dir.z(), n_coeffs, basis);
    for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.5;
        const double* coef = scene.sh.data() + (i * 3 + c) * n_coeffs;
        for (std::size_t k = 0; k < n_coeffs; ++k) acc += basis[k] * coef[k];
        s.rgb_raw[c] = acc;
        s.color[c] = std::max(acc, 0.0);
    }
    s.alpha = scene.opacities[i];
    return s;
}

// All surviving splats sorted by view-space depth ascending, ties by index.
inline std::vector<Splat2D> project_splats(const GaussianScene& scene, const CameraPose& pose,
                                           const Intrinsics& intr, const RenderConfig& cfg) {
    std::vector<Splat2D> splats;
    const std::size_t n = scene.count();
    splats.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        if (auto s = project_gaussian(scene, i, pose, intr, cfg)) splats.push_back(*s);
    std::sort(splats.begin(), splats.end(), [](const Splat2D& a, const Splat2D& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.index < b.index;
    });
    return splats;
}

// ---------------------------------------------------------------------------
// Forward.

namespace detail {

// Blend one pixel given the candidate splats in global depth order. The
// candidate set may be any superset of the splats whose 3-sigma ellipse
// covers the pixel; the skip rules make the result independent of that
// choice.
template <class SplatRange>
inline void blend_pixel(double px, double py, const SplatRange& candidates,
                        const std::vector<Splat2D>& splats, const RenderConfig& cfg, double* rgb,
                        double* depth, double* accum) {
    double t = 1.0;
    double c0 = 0.0, c1 = 0.0, c2 = 0.0, draw = 0.0;
    for (const auto idx : candidates) {
        if (t < cfg.transmittance_min) break;
        const Splat2D& s = splats[idx];
        const double dx = px - s.mean_x;
        const double dy = py - s.mean_y;
        const double power = 0.5 * (s.conic_a * dx * dx + s.conic_c * dy * dy) +
                             s.conic_b * dx * dy;
        if (power > cfg.power_cutoff) continue;
        const double alpha = std::min(s.alpha * std::exp(-power), cfg.alpha_clamp);
        if (alpha < cfg.alpha_min) continue;
        const double w = alpha * t;
        c0 += s.color[0] * w;
        c1 += s.color[1] * w;
        c2 += s.color[2] * w;
        draw += s.depth * w;
        t *= 1.0 - alpha;
    }
    rgb[0] = c0 + cfg.background[0] * t;
    rgb[1] = c1 + cfg.background[1] * t;
    rgb[2] = c2 + cfg.background[2] * t;
    const double o = 1.0 - t;
    *accum = o;
    *depth = draw / std::max(o, 1e-6);
}

struct IndexRange {
    std::size_t n;
    struct iterator {
        std::size_t i;
        std::size_t operator*() const { return i; }
        iterator& operator++() {
            ++i;
            return *this;
        }
        bool operator!=(const iterator& o) const { return i != o.i; }
    };
    iterator begin() const { return {0}; }
    iterator end() const { return {n}; }
};

inline void run_rows(std::size_t rows, unsigned threads, const std::function<void(std::size_t)>& row_fn) {
    if (threads <= 1) {
        for (std::size_t r = 0; r < rows; ++r) row_fn(r);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t next = 0;
    const std::size_t chunk = (rows + threads - 1) / threads;
    for (unsigned ti = 0; ti < threads && next < rows; ++ti) {
        const std::size_t lo = next;
        const std::size_t hi = std::min(rows, lo + chunk);
        next = hi;
        pool.emplace_back([lo, hi, &row_fn] {
            for (std::size_t r = lo; r < hi; ++r) row_fn(r);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

// Brute-force reference: every pixel walks the full sorted splat list.
inline RenderOutput render_reference(const GaussianScene& scene, const CameraPose& pose,
                                     const Intrinsics& intr, const RenderConfig& cfg) {
    const std::size_t h = intr.height, w = intr.width;
    RenderOutput out{Tensor(Shape{h, w, 3}), Tensor(Shape{h, w}), Tensor(Shape{h, w})};
    const std::vector<Splat2D> splats = project_splats(scene, pose, intr, cfg);
    detail::IndexRange all{splats.size()};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            detail::blend_pixel(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, all,
                                splats, cfg, out.color.data() + (y * w + x) * 3,
                                out.depth.data() + y * w + x, out.accum.data() + y * w + x);
    return out;
}

// Tiled forward: splats are binned by the intersection of their 3-sigma
// bounding box with each tile's pixel-center rectangle. Bitwise equal to the
// reference because the per-pixel rules discard exactly the splats a tile
// test can exclude.
inline RenderOutput render(const GaussianScene& scene, const CameraPose& pose,
                           const Intrinsics& intr, const RenderConfig& cfg) {
    const std::size_t h = intr.height, w = intr.width;
    RenderOutput out{Tensor(Shape{h, w, 3}), Tensor(Shape{h, w}), Tensor(Shape{h, w})};
    const std::vector<Splat2D> splats = project_splats(scene, pose, intr, cfg);

    const std::size_t tile = std::max<std::size_t>(1, cfg.tile_size);
    const std::size_t tiles_x = (w + tile - 1) / tile;
    const std::size_t tiles_y = (h + tile - 1) / tile;
    std::vector<std::vector<std::size_t>> bins(tiles_x * tiles_y);
    for (std::size_t si = 0; si < splats.size(); ++si) {
        const Splat2D& s = splats[si];
        for (std::size_t ty = 0; ty < tiles_y; ++ty) {
            const double y0 = static_cast<double>(ty * tile) + 0.5;
            const double y1 = static_cast<double>(std::min(h, (ty + 1) * tile) - 1) + 0.5;
            if (s.mean_y + s.radius_y < y0 || s.mean_y - s.radius_y > y1) continue;
            for (std::size_t tx = 0; tx < tiles_x; ++tx) {
                const double x0 = static_cast<double>(tx * tile) + 0.5;
                const double x1 = static_cast<double>(std::min(w, (tx + 1) * tile) - 1) + 0.5;
                if (s.mean_x + s.radius_x < x0 || s.mean_x - s.radius_x > x1) continue;
                bins[ty * tiles_x + tx].push_back(si);
            }
        }
    }

    detail::run_rows(tiles_y, cfg.threads, [&](std::size_t ty) {
        for (std::size_t tx = 0; tx < tiles_x; ++tx) {
            const auto& bin = bins[ty * tiles_x + tx];
            for (std::size_t y = ty * tile; y < std::min(h, (ty + 1) * tile); ++y)
                for (std::size_t x = tx * tile; x < std::min(w, (tx + 1) * tile); ++x)
                    detail::blend_pixel(static_cast<double>(x) + 0.5,
                                        static_cast<double>(y) + 0.5, bin, splats, cfg,
                                        out.color.data() + (y * w + x) * 3,
                                        out.depth.data() + y * w + x,
                                        out.accum.data() + y * w + x);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Backward.

namespace detail {

struct SplatGradAccum {
    double mean2d[2] = {0, 0};
    double conic[3] = {0, 0, 0};  // w.r.t. (a, b, c) as packed scalars
    double color[3] = {0, 0, 0};
    double alpha = 0;
    double depth = 0;
};

}  // namespace detail

// Gradients of an arbitrary scalar loss w.r.t. all gaussian attributes and
// the background, given the loss gradients of the three output maps.
inline RenderGrads render_backward(const GaussianScene& scene, const CameraPose& pose,
                                   const Intrinsics& intr, const RenderConfig& cfg,
                                   const Tensor& g_color, const Tensor& g_depth,
                                   const Tensor& g_accum) {
    const std::size_t h = intr.height, w = intr.width;
    const std::size_t n = scene.count();
    const std::size_t n_coeffs = scene.sh.dim(2);
    RenderGrads grads{Tensor::zeros({n, 3}),      Tensor::zeros({n, 3}),
                      Tensor::zeros({n, 3, 3}),   Tensor::zeros({n, 1}),
                      Tensor::zeros({n, 3, n_coeffs}), Tensor::zeros({3})};

    const std::vector<Splat2D> splats = project_splats(scene, pose, intr, cfg);
    const std::size_t ns = splats.size();

    const unsigned threads = std::max(1u, cfg.threads);
    std::vector<std::vector<detail::SplatGradAccum>> accums(
        threads, std::vector<detail::SplatGradAccum>(ns));
    std::vector<std::array<double, 3>> bg_accums(threads, {0, 0, 0});

    const std::size_t chunk = (h + threads - 1) / threads;
    std::vector<std::thread> pool;
    auto worker = [&](unsigned ti, std::size_t y_lo, std::size_t y_hi) {
        std::vector<detail::SplatGradAccum>& acc = accums[ti];
        std::array<double, 3>& bg_acc = bg_accums[ti];
        std::vector<std::size_t> hit;      // blended splat ids (into `splats`)
        std::vector<double> hit_alpha;
        std::vector<double> hit_t;         // transmittance before the splat
        hit.reserve(64);
        hit_alpha.reserve(64);
        hit_t.reserve(64);
        for (std::size_t y = y_lo; y < y_hi; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double px = static_cast<double>(x) + 0.5;
                const double py = static_cast<double>(y) + 0.5;
                hit.clear();
                hit_alpha.clear();
                hit_t.clear();
                double t = 1.0;
                double draw = 0.0;
                for (std::size_t si = 0; si < ns; ++si) {
                    if (t < cfg.transmittance_min) break;
                    const Splat2D& s = splats[si];
                    const double dx = px - s.mean_x;
                    const double dy = py - s.mean_y;
                    const double power = 0.5 * (s.conic_a * dx * dx + s.conic_c * dy * dy) +
                                         s.conic_b * dx * dy;
                    if (power > cfg.power_cutoff) continue;
                    const double alpha = std::min(s.alpha * std::exp(-power), cfg.alpha_clamp);
                    if (alpha < cfg.alpha_min) continue;
                    hit.push_back(si);
                    hit_alpha.push_back(alpha);
                    hit_t.push_back(t);
                    draw += s.depth * alpha * t;
                    t *= 1.0 - alpha;
                }
                const double t_end = t;
                const double o = 1.0 - t_end;
                const double o_max = std::max(o, 1e-6);

                const double* gc = g_color.data() + (y * w + x) * 3;
                const double gd = g_depth[y * w + x];
                const double ga = g_accum[y * w + x];
                const double d_draw = gd / o_max;
                const double d_o = ga - (o > 1e-6 ? gd * draw / (o_max * o_max) : 0.0);
                // C += bg * t_end and O = 1 - t_end share the t_end path
                const double d_t_end = gc[0] * cfg.background[0] + gc[1] * cfg.background[1] +
                                       gc[2] * cfg.background[2] - d_o;
                bg_acc[0] += gc[0] * t_end;
                bg_acc[1] += gc[1] * t_end;
                bg_acc[2] += gc[2] * t_end;

                // reverse sweep with suffix sums over later splats
                double suffix_c[3] = {0, 0, 0};
                double suffix_z = 0.0;
                for (std::size_t r = hit.size(); r-- > 0;) {
                    const std::size_t si = hit[r];
                    const Splat2D& s = splats[si];
                    const double alpha = hit_alpha[r];
                    const double t_before = hit_t[r];
                    const double wgt = alpha * t_before;
                    const double one_m = 1.0 - alpha;

                    detail::SplatGradAccum& a = acc[si];
                    a.color[0] += gc[0] * wgt;
                    a.color[1] += gc[1] * wgt;
                    a.color[2] += gc[2] * wgt;
                    a.depth += d_draw * wgt;

                    double d_alpha = d_t_end * (-t_end / one_m);
                    for (int c = 0; c < 3; ++c)
                        d_alpha += gc[c] * (s.color[c] * t_before - suffix_c[c] / one_m);
                    d_alpha += d_draw * (s.depth * t_before - suffix_z / one_m);

                    suffix_c[0] += s.color[0] * wgt;
                    suffix_c[1] += s.color[1] * wgt;
                    suffix_c[2] += s.color[2] * wgt;
                    suffix_z += s.depth * wgt;

                    // alpha = min(opacity * exp(-power), clamp)
                    const double dx = px - s.mean_x;
                    const double dy = py - s.mean_y;
                    const double power = 0.5 * (s.conic_a * dx * dx + s.conic_c * dy * dy) +
                                         s.conic_b * dx * dy;
                    if (s.alpha * std::exp(-power) >= cfg.alpha_clamp) continue;  // clamped
                    const double gauss = std::exp(-power);
                    a.alpha += d_alpha * gauss;
                    const double d_power = -d_alpha * alpha;
                    a.conic[0] += d_power * 0.5 * dx * dx;
                    a.conic[1] += d_power * dx * dy;
                    a.conic[2] += d_power * 0.5 * dy * dy;
                    const double d_dx = d_power * (s.conic_a * dx + s.conic_b * dy);
                    const double d_dy = d_power * (s.conic_b * dx + s.conic_c * dy);
                    a.mean2d[0] -= d_dx;
                    a.mean2d[1] -= d_dy;
                }
            }
    };
    if (threads == 1) {
        worker(0, 0, h);
    } else {
        for (unsigned ti = 0; ti < threads; ++ti) {
            const std::size_t lo = std::min<std::size_t>(h, ti * chunk);
            const std::size_t hi = std::min<std::size_t>(h, lo + chunk);
            pool.emplace_back(worker, ti, lo, hi);
        }
        for (auto& th : pool) th.join();
    }

    // deterministic reduction in thread order
    std::vector<detail::SplatGradAccum> total(ns);
    for (unsigned ti = 0; ti < threads; ++ti) {
        for (std::size_t si = 0; si < ns; ++si) {
            detail::SplatGradAccum& d = total[si];
            const detail::SplatGradAccum& src = accums[ti][si];
            for (int k = 0; k < 2; ++k) d.mean2d[k] += src.mean2d[k];
            for (int k = 0; k < 3; ++k) d.conic[k] += src.conic[k];
            for (int k = 0; k < 3; ++k) d.color[k] += src.color[k];
            d.alpha += src.alpha;
            d.depth += src.depth;
        }
        for (int c = 0; c < 3; ++c) grads.background[c] += bg_accums[ti][c];
    }

    // per-splat projection adjoints
    const Eigen::Matrix3d wmat = pose.rotation.transpose();
    for (std::size_t si = 0; si < ns; ++si) {
        const Splat2D& s = splats[si];
        const detail::SplatGradAccum& d = total[si];
        const std::size_t i = s.index;

        grads.opacities[i] += d.alpha;

        // conic = inverse of the dilated 2-D covariance
        Eigen::Matrix2d conic;
        conic << s.conic_a, s.conic_b, s.conic_b, s.conic_c;
        Eigen::Matrix2d d_conic_full;
        d_conic_full << d.conic[0], 0.5 * d.conic[1], 0.5 * d.conic[1], d.conic[2];
        const Eigen::Matrix2d d_cov_full = -conic * d_conic_full * conic;

        // cov = M Sigma M^T + dilation I, M = J W
        const double z = s.p_cam[2];
        const double xc = s.p_cam[0];
        const double yc = s.p_cam[1];
        Eigen::Matrix<double, 2, 3> jac;
        jac << intr.fx / z, 0.0, -intr.fx * xc / (z * z), 0.0, intr.fy / z,
            -intr.fy * yc / (z * z);
        const Eigen::Matrix<double, 2, 3> m = jac * wmat;
        const Eigen::Map<const Eigen::Vector3d> scale(scene.scales.data() + i * 3);
        const Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> rot(
            scene.rotations.data() + i * 9);
        const Eigen::Matrix3d sigma = covariance3d(scale, Eigen::Matrix3d(rot));

        const Eigen::Matrix3d d_sigma = m.transpose() * d_cov_full * m;
        const Eigen::Matrix<double, 2, 3> d_m =
            (d_cov_full + d_cov_full.transpose()) * m * sigma;
        const Eigen::Matrix<double, 2, 3> d_jac = d_m * wmat.transpose();

        // Sigma = R diag(s^2) R^T
        const Eigen::Vector3d s2 = scale.array().square();
        const Eigen::Matrix3d d_rot =
            (d_sigma + d_sigma.transpose()) * Eigen::Matrix3d(rot) * s2.asDiagonal();
        const Eigen::Matrix3d rt_ds_r =
            Eigen::Matrix3d(rot).transpose() * d_sigma * Eigen::Matrix3d(rot);
        for (int k = 0; k < 3; ++k) {
            grads.scales[i * 3 + k] += rt_ds_r(k, k) * 2.0 * scale[k];
            for (int l = 0; l < 3; ++l) grads.rotations[i * 9 + 3 * k + l] += d_rot(k, l);
        }

        // camera-space position feeds the Jacobian, the 2-D mean, and depth
        Eigen::Vector3d d_pcam = Eigen::Vector3d::Zero();
        d_pcam.x() += d_jac(0, 2) * (-intr.fx / (z * z));
        d_pcam.y() += d_jac(1, 2) * (-intr.fy / (z * z));
        d_pcam.z() += d_jac(0, 0) * (-intr.fx / (z * z)) + d_jac(1, 1) * (-intr.fy / (z * z)) +
                      d_jac(0, 2) * (2.0 * intr.fx * xc / (z * z * z)) +
                      d_jac(1, 2) * (2.0 * intr.fy * yc / (z * z * z));
        d_pcam.x() += d.mean2d[0] * intr.fx / z;
        d_pcam.z() += d.mean2d[0] * (-intr.fx * xc / (z * z));
        d_pcam.y() += d.mean2d[1] * intr.fy / z;
        d_pcam.z() += d.mean2d[1] * (-intr.fy * yc / (z * z));
        d_pcam.z() += d.depth;

        Eigen::Vector3d d_mean = wmat.transpose() * d_pcam;

        // SH color path: color = max(0, basis . coeffs + 0.5)
        const Eigen::Map<const Eigen::Vector3d> mean(scene.means.data() + i * 3);
        const Eigen::Vector3d to_mean = mean - pose.center;
        const double r = to_mean.norm();
        if (r > 0.0) {
            const Eigen::Vector3d dir = to_mean / r;
            double basis[16];
            double basis_grad[16][3];
            sh::basis(dir.x(), dir.y(), dir.z(), n_coeffs, basis);
            sh::basis_grad(dir.x(), dir.y(), dir.z(), n_coeffs, basis_grad);
            Eigen::Vector3d d_dir = Eigen::Vector3d::Zero();
            for (int c = 0; c < 3; ++c) {
                if (s.rgb_raw[c] <= 0.0) continue;  // clamped channel
                const double gch = d.color[c];
                const double* coef = scene.sh.data() + (i * 3 + c) * n_coeffs;
                double* gcoef = grads.sh.data() + (i * 3 + c) * n_coeffs;
                for (std::size_t k = 0; k < n_coeffs; ++k) {
                    gcoef[k] += gch * basis[k];
                    d_dir.x() += gch * coef[k] * basis_grad[k][0];
                    d_dir.y() += gch * coef[k] * basis_grad[k][1];
                    d_dir.z() += gch * coef[k] * basis_grad[k][2];
                }
            }
            // dir = (mean - o) / |mean - o|
            d_mean += (Eigen::Matrix3d::Identity() - dir * dir.transpose()) * d_dir / r;
        }

        for (int k = 0; k < 3; ++k) grads.means[i * 3 + k] += d_mean[k];
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Graph binding: one node producing [H, W, 5] (rgb, depth, accum).

struct RenderMaps {
    Value color;  // [H, W, 3]
    Value depth;  // [H, W]
    Value accum;  // [H, W]
};

inline RenderMaps render_node(Graph& g, const GaussianSceneValues& scene, Value background,
                              const CameraPose& pose, const Intrinsics& intr,
                              const RenderConfig& cfg) {
    GaussianScene plain = materialize(scene);
    RenderConfig run_cfg = cfg;
    for (int c = 0; c < 3; ++c) run_cfg.background[c] = background.val()[c];
    RenderOutput out = render(plain, pose, intr, run_cfg);

    const std::size_t h = intr.height, w = intr.width;
    Tensor packed(Shape{h, w, 5});
    for (std::size_t p = 0; p < h * w; ++p) {
        packed[p * 5 + 0] = out.color[p * 3 + 0];
        packed[p * 5 + 1] = out.color[p * 3 + 1];
        packed[p * 5 + 2] = out.color[p * 3 + 2];
        packed[p * 5 + 3] = out.depth[p];
        packed[p * 5 + 4] = out.accum[p];
    }

    const bool rg = g.requires_grad(scene.means) || g.requires_grad(scene.scales) ||
                    g.requires_grad(scene.rotations) || g.requires_grad(scene.opacities) ||
                    g.requires_grad(scene.sh) || g.requires_grad(background);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [scene, background, pose, intr, run_cfg, plain = std::move(plain), h,
              w](Graph& gr, const Tensor& og) {
            Tensor g_color(Shape{h, w, 3});
            Tensor g_depth(Shape{h, w});
            Tensor g_accum(Shape{h, w});
            for (std::size_t p = 0; p < h * w; ++p) {
                g_color[p * 3 + 0] = og[p * 5 + 0];
                g_color[p * 3 + 1] = og[p * 5 + 1];
                g_color[p * 3 + 2] = og[p * 5 + 2];
                g_depth[p] = og[p * 5 + 3];
                g_accum[p] = og[p * 5 + 4];
            }
            RenderGrads grads =
                render_backward(plain, pose, intr, run_cfg, g_color, g_depth, g_accum);
            gr.accumulate(scene.means, grads.means);
            gr.accumulate(scene.scales, grads.scales);
            gr.accumulate(scene.rotations, grads.rotations);
            gr.accumulate(scene.opacities, grads.opacities);
            gr.accumulate(scene.sh, grads.sh);
            gr.accumulate(background, grads.background);
        };
    }
    Value node = g.make(std::move(packed), rg, std::move(bw));

    RenderMaps maps;
    maps.color = slice(node, 2, 0, 3);
    maps.depth = reshape(slice(node, 2, 3, 1), {h, w});
    maps.accum = reshape(slice(node, 2, 4, 1), {h, w});
    return maps;
}

}  // namespace tsplat
