#pragma once

// Latent-token decoding: two linear heads emit 16 raw Gaussian candidates per
// token, and a stage-dependent gated merge exposes G = 2^s Gaussians per
// token. Merging is attribute-aware: plain weighted averages for positions,
// 6-D rotation residuals and SH; log-space with a volume-preserving
// correction for scales; log-transmittance for opacity. Stage transitions
// expand the coarser stage with the inverse binary split rule and
// interpolate attribute-wise in those same domains, so both endpoints of the
// blend reproduce their stage exactly.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "tsplat/autodiff.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

struct DecoderConfig {
    std::size_t candidates_per_token = 16;  // all candidates are always predicted
    double gate_temperature = 1.0;
    std::array<double, 3> mean_offset{0.0, 0.0, 1.5};
    double log_scale_offset = -2.0;
    double opacity_logit_offset = -5.0;
    std::array<double, 6> rot6d_offset{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
    std::size_t sh_degree = 3;
    double opacity_clamp_eps = 1e-7;

    std::size_t sh_coeffs() const { return (sh_degree + 1) * (sh_degree + 1); }
    std::size_t sh_width() const { return 3 * sh_coeffs(); }
    std::size_t geo_width() const { return 3 + 3 + 6 + 1 + 1; }
};

struct StagePoint {
    int stage = 0;                // s in {0..4}, G = 2^s
    double lambda = 1.0;          // transition coefficient in [0,1]

    std::size_t gaussians_per_token() const { return std::size_t{1} << stage; }
};

// Raw candidate attributes for every token (offsets already applied, except
// raw_rot6d which keeps the pre-offset residual for regularization).
struct CandidateSet {
    Value positions;       // [M, K, 3]
    Value log_scales;      // [M, K, 3]
    Value rot6d;           // [M, K, 6]
    Value opacity_logits;  // [M, K, 1]
    Value gate_logits;     // [M, K, 1]
    Value sh;              // [M, K, 3 * D_sh]
    Value raw_rot6d;       // [M, K, 6]
    std::size_t tokens = 0;
    std::size_t candidates = 0;
};

// Merged per-group attributes, kept in the domains the merge rules use.
struct MergedAttributes {
    Value positions;   // [M, G, 3]
    Value log_scales;  // [M, G, 3]
    Value rot6d;       // [M, G, 6]
    Value sh;          // [M, G, 3 * D_sh]
    Value log_u;       // [M, G, 1], log transmittance
    std::size_t tokens = 0;
    std::size_t groups = 0;
};

struct GaussianSceneValues {
    Value means;       // [N, 3]
    Value scales;      // [N, 3], linear
    Value rotations;   // [N, 3, 3]
    Value opacities;   // [N, 1]
    Value sh;          // [N, 3, D_sh]
    std::size_t count = 0;
};

// Plain-tensor scene, the renderer/export input.
struct GaussianScene {
    Tensor means;      // [N, 3]
    Tensor scales;     // [N, 3]
    Tensor rotations;  // [N, 3, 3]
    Tensor opacities;  // [N, 1]
    Tensor sh;         // [N, 3, D_sh]

    std::size_t count() const { return means.numel() / 3; }

    void validate(double rot_tol = 1e-6) const {
        const std::size_t n = count();
        for (std::size_t i = 0; i < n; ++i) {
            for (int a = 0; a < 3; ++a)
                if (!(scales[i * 3 + a] > 0.0))
                    throw std::runtime_error("gaussian scene: non-positive scale");
            const double alpha = opacities[i];
            if (!(alpha > 0.0) || !(alpha < 1.0))
                throw std::runtime_error("gaussian scene: opacity outside (0,1)");
            Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> r(rotations.data() +
                                                                             i * 9);
            if (((r * r.transpose()) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() >
                rot_tol)
                throw std::runtime_error("gaussian scene: rotation not orthonormal");
        }
    }
};

struct DecoderParams {
    Value geo_w, geo_b;  // [d, K*14], [K*14]
    Value app_w, app_b;  // [d, K*3*D_sh], [K*3*D_sh]
};

// ---------------------------------------------------------------------------

inline CandidateSet decode_candidates(Graph& g, Value geo_stream, Value app_stream,
                                      const DecoderParams& params, const DecoderConfig& cfg) {
    const std::size_t m = geo_stream.val().dim(0);
    const std::size_t k = cfg.candidates_per_token;

    Value geo = add(matmul(geo_stream, params.geo_w), params.geo_b);
    geo = reshape(geo, {m, k, cfg.geo_width()});
    Value app = add(matmul(app_stream, params.app_w), params.app_b);

    CandidateSet set;
    set.tokens = m;
    set.candidates = k;
    set.raw_rot6d = slice(geo, 2, 6, 6);

    Value mean_off = g.constant(
        Tensor::of({3}, {cfg.mean_offset[0], cfg.mean_offset[1], cfg.mean_offset[2]}));
    set.positions = add(slice(geo, 2, 0, 3), mean_off);
    set.log_scales = slice(geo, 2, 3, 3) + cfg.log_scale_offset;
    Tensor rot_off(Shape{6});
    for (std::size_t i = 0; i < 6; ++i) rot_off[i] = cfg.rot6d_offset[i];
    set.rot6d = add(set.raw_rot6d, g.constant(rot_off));
    set.opacity_logits = slice(geo, 2, 12, 1) + cfg.opacity_logit_offset;
    set.gate_logits = slice(geo, 2, 13, 1);
    set.sh = reshape(app, {m, k, cfg.sh_width()});
    return set;
}

// Continuous 6-D rotation: Gram-Schmidt over the two raw axes; the resulting
// orthonormal vectors become the matrix columns.
inline Value rot6d_to_rotation(Value r6) {
    const std::size_t n = r6.val().dim(0);
    if (r6.val().ndim() != 2 || r6.val().dim(1) != 6)
        throw std::invalid_argument("rot6d_to_rotation: expected [N, 6], got " +
                                    shape_str(r6.val().shape()));
    Value a1 = slice(r6, 1, 0, 3);
    Value a2 = slice(r6, 1, 3, 3);
    for (std::size_t i = 0; i < n; ++i) {
        const double* p = a1.val().data() + i * 3;
        if (std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) < 1e-8)
            throw std::runtime_error("rot6d_to_rotation: first axis near zero");
    }
    Value b1 = normalize_l2(a1, 1);
    Value proj = sum(mul(a2, b1), 1, true);
    Value b2 = normalize_l2(sub(a2, mul(proj, b1)), 1);
    Value b3 = cross3(b1, b2);
    Value cols = concat({reshape(b1, {n, 3, 1}), reshape(b2, {n, 3, 1}), reshape(b3, {n, 3, 1})},
                        2);
    return cols;
}

inline Eigen::Matrix3d rot6d_to_matrix(const std::array<double, 6>& r6) {
    Eigen::Vector3d a1(r6[0], r6[1], r6[2]);
    Eigen::Vector3d a2(r6[3], r6[4], r6[5]);
    if (a1.norm() < 1e-8) throw std::runtime_error("rot6d_to_matrix: first axis near zero");
    const Eigen::Vector3d b1 = a1.normalized();
    const Eigen::Vector3d b2 = (a2 - a2.dot(b1) * b1).normalized();
    Eigen::Matrix3d r;
    r.col(0) = b1;
    r.col(1) = b2;
    r.col(2) = b1.cross(b2);
    return r;
}

// Temperature-scaled softmax over each group of b_s = K / G gate logits.
inline Value gate_weights(Value gate_logits, std::size_t groups, double tau) {
    const std::size_t m = gate_logits.val().dim(0);
    const std::size_t k = gate_logits.val().dim(1);
    if (groups == 0 || k % groups != 0)
        throw std::invalid_argument("gate_weights: candidate count " + std::to_string(k) +
                                    " not divisible into " + std::to_string(groups) + " groups");
    const std::size_t b = k / groups;
    Value grouped = reshape(gate_logits, {m, groups, b});
    return reshape(softmax(grouped, 2, tau), {m, groups, b, 1});
}

// log(1 - alpha) with the domain validated and clamped away from the
// singularity. Alphas at or above one have no defined transmittance.
inline Value log_transmittance(Value alphas, double clamp_eps) {
    const Tensor& t = alphas.val();
    for (std::size_t i = 0; i < t.numel(); ++i)
        if (t[i] >= 1.0)
            throw std::runtime_error("log_transmittance: opacity >= 1 at index " +
                                     std::to_string(i));
    Value clamped = clamp(alphas, clamp_eps, 1.0 - clamp_eps);
    return log(1.0 - clamped);
}

namespace detail {

// Weighted average over the group axis: attr [M, K, A] -> [M, G, A].
inline Value group_average(Value attr, Value weights, std::size_t groups) {
    const std::size_t m = attr.val().dim(0);
    const std::size_t k = attr.val().dim(1);
    const std::size_t a = attr.val().dim(2);
    const std::size_t b = k / groups;
    Value grouped = reshape(attr, {m, groups, b, a});
    return sum(mul(grouped, weights), 2);
}

}  // namespace detail

// Merge the K candidates of every token into G groups with gate-weighted,
// attribute-specific rules.
inline MergedAttributes merge_candidates(const CandidateSet& set, std::size_t groups,
                                         const DecoderConfig& cfg) {
    if (groups == 0 || set.candidates % groups != 0)
        throw std::invalid_argument("merge_candidates: " + std::to_string(set.candidates) +
                                    " candidates not divisible into " + std::to_string(groups) +
                                    " groups");
    const std::size_t b = set.candidates / groups;
    Value w = gate_weights(set.gate_logits, groups, cfg.gate_temperature);

    MergedAttributes out;
    out.tokens = set.tokens;
    out.groups = groups;
    out.positions = detail::group_average(set.positions, w, groups);
    out.rot6d = detail::group_average(set.rot6d, w, groups);
    out.sh = detail::group_average(set.sh, w, groups);
    // log-space merge with the volume-preserving correction log(b_s)/3
    out.log_scales = detail::group_average(set.log_scales, w, groups) +
                     std::log(static_cast<double>(b)) / 3.0;
    Value alphas = sigmoid(set.opacity_logits);
    Value log_u = log_transmittance(alphas, cfg.opacity_clamp_eps);
    out.log_u = detail::group_average(log_u, w, groups);
    return out;
}

// Inverse binary split: each parent becomes two co-located children with
// scale reduced by 2^(-1/3) per axis and transmittance square-rooted.
inline MergedAttributes split_groups(const MergedAttributes& parent) {
    auto duplicate = [&](Value v) {
        const std::size_t m = v.val().dim(0);
        const std::size_t gdim = v.val().dim(1);
        const std::size_t a = v.val().dim(2);
        Value widened = broadcast_to(reshape(v, {m, gdim, 1, a}), {m, gdim, 2, a});
        return reshape(widened, {m, gdim * 2, a});
    };
    MergedAttributes out;
    out.tokens = parent.tokens;
    out.groups = parent.groups * 2;
    out.positions = duplicate(parent.positions);
    out.rot6d = duplicate(parent.rot6d);
    out.sh = duplicate(parent.sh);
    out.log_scales = duplicate(parent.log_scales) - std::log(2.0) / 3.0;
    out.log_u = duplicate(parent.log_u) * 0.5;
    return out;
}

namespace detail {

inline MergedAttributes lerp_attributes(const MergedAttributes& a, const MergedAttributes& b,
                                        double lambda) {
    auto mix = [lambda](Value x, Value y) { return x * (1.0 - lambda) + y * lambda; };
    MergedAttributes out;
    out.tokens = b.tokens;
    out.groups = b.groups;
    out.positions = mix(a.positions, b.positions);
    out.log_scales = mix(a.log_scales, b.log_scales);
    out.rot6d = mix(a.rot6d, b.rot6d);
    out.sh = mix(a.sh, b.sh);
    out.log_u = mix(a.log_u, b.log_u);
    return out;
}

}  // namespace detail

// Turn merged attributes into an explicit scene: exponentiate scales,
// orthonormalize rotations, invert the transmittance.
inline GaussianSceneValues finalize_scene(const MergedAttributes& merged) {
    const std::size_t n = merged.tokens * merged.groups;
    const std::size_t sh_width = merged.sh.val().dim(2);
    if (sh_width % 3 != 0)
        throw std::invalid_argument("finalize_scene: SH width not a multiple of 3");
    GaussianSceneValues scene;
    scene.count = n;
    scene.means = reshape(merged.positions, {n, 3});
    scene.scales = exp(reshape(merged.log_scales, {n, 3}));
    scene.rotations = rot6d_to_rotation(reshape(merged.rot6d, {n, 6}));
    scene.opacities = 1.0 - exp(reshape(merged.log_u, {n, 1}));
    scene.sh = reshape(merged.sh, {n, 3, sh_width / 3});
    return scene;
}

// Stage-dependent decode. At lambda = 1 the scene is the current stage's
// merge; below 1 the previous stage is expanded via the split rule and the
// two are interpolated attribute-wise in the merge domains.
inline GaussianSceneValues decode_stage(const CandidateSet& set, StagePoint point,
                                        const DecoderConfig& cfg) {
    if (point.lambda < 0.0 || point.lambda > 1.0)
        throw std::invalid_argument("decode_stage: lambda " + std::to_string(point.lambda) +
                                    " outside [0, 1]");
    if (point.stage < 0 || (std::size_t{1} << point.stage) > cfg.candidates_per_token)
        throw std::invalid_argument("decode_stage: stage " + std::to_string(point.stage) +
                                    " outside the candidate budget");
    const std::size_t groups = point.gaussians_per_token();
    MergedAttributes current = merge_candidates(set, groups, cfg);
    if (point.lambda >= 1.0 || point.stage == 0)
        return finalize_scene(current);
    MergedAttributes previous = merge_candidates(set, groups / 2, cfg);
    MergedAttributes expanded = split_groups(previous);
    return finalize_scene(detail::lerp_attributes(expanded, current, point.lambda));
}

inline GaussianScene materialize(const GaussianSceneValues& scene) {
    GaussianScene out;
    out.means = scene.means.val();
    out.scales = scene.scales.val();
    out.rotations = scene.rotations.val();
    out.opacities = scene.opacities.val();
    out.sh = scene.sh.val();
    return out;
}

}  // namespace tsplat
