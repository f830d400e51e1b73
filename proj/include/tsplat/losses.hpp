#pragma once

// Training objectives: rendering loss with a self-contained perceptual
// proxy, the symmetric stop-gradient subset consistency loss, the soft
// frustum constraint, the decoder-side regularizers, and their weighted
// composition. Every term is a differentiable scalar in the graph.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsplat/autodiff.hpp"
#include "tsplat/decoder.hpp"
#include "tsplat/geometry.hpp"
#include "tsplat/renderer.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

struct LossWeights {
    double lambda_mse = 2.0;
    double lambda_perc = 1.0;
    double lambda_fru = 1e-2;
    double lambda_dec = 1e-2;
    double lambda_con_alpha = 1e-3;
    double lambda_con_depth = 1e-2;

    double alpha_max = 0.2;        // opacity hinge target
    double s_max = 0.5;            // max linear scale, scene units
    double c_max = 3.0;            // SH soft cap
    double tau_sh = 1.0;
    double sh_power = 2.0;         // p
    double frustum_tau = 0.1;
    double support_threshold = 0.5;
    double dec_inner = 1e-2;       // fixed factor inside the decoder term

    void validate() const {
        for (double v : {lambda_mse, lambda_perc, lambda_fru, lambda_dec, lambda_con_alpha,
                         lambda_con_depth, alpha_max, s_max, c_max, tau_sh, sh_power, frustum_tau,
                         support_threshold, dec_inner})
            if (v < 0.0) throw std::invalid_argument("loss weights must be nonnegative");
    }
};

// ---------------------------------------------------------------------------
// Rendering loss.

using PerceptualFn = std::function<Value(Graph&, Value rendered, Value target)>;

// Multi-scale image-gradient L1: mean absolute difference between the Sobel
// gradient maps of the two images at three dyadic scales. A self-contained
// stand-in for a pretrained perceptual network with the same structural
// emphasis.
inline Value sobel_perceptual_proxy(Graph& g, Value rendered, Value target) {
    (void)g;
    Value total{};
    Value a = rendered;
    Value b = target;
    for (int scale = 0; scale < 3; ++scale) {
        Value diff = (mean(abs(sub(sobel_x(a), sobel_x(b)))) +
                      mean(abs(sub(sobel_y(a), sobel_y(b))))) *
                     0.5;
        total = scale == 0 ? diff : add(total, diff);
        if (scale < 2) {
            a = avgpool2(a);
            b = avgpool2(b);
        }
    }
    return total / 3.0;
}

struct RenderingLoss {
    Value mse;    // raw mean squared error
    Value perc;   // raw perceptual term
    Value total;  // lambda_mse * mse + lambda_perc * perc
};

inline RenderingLoss rendering_loss(Graph& g, Value rendered, Value target,
                                    const LossWeights& weights,
                                    const PerceptualFn& perceptual = nullptr) {
    if (rendered.val().shape() != target.val().shape())
        throw std::invalid_argument("rendering_loss: dimension mismatch between " +
                                    shape_str(rendered.val().shape()) + " and " +
                                    shape_str(target.val().shape()));
    RenderingLoss out;
    out.mse = mean(square(sub(rendered, target)));
    out.perc = perceptual ? perceptual(g, rendered, target)
                          : sobel_perceptual_proxy(g, rendered, target);
    out.total = add(out.mse * weights.lambda_mse, out.perc * weights.lambda_perc);
    return out;
}

// ---------------------------------------------------------------------------
// Subset consistency.

struct ConsistencyLoss {
    Value alpha;  // raw symmetric accumulation term
    Value depth;  // raw support-masked symmetric depth term
    Value total;  // lambda-weighted sum
};

// One half of the symmetric form: mean |live - sg(stopped)|. Gradients flow
// only through the live operand.
inline Value stopgrad_l1_mean(Value live, Value stopped) {
    return mean(abs(sub(live, stop_gradient(stopped))));
}

// Masked variant normalized by `denom` instead of the element count.
inline Value stopgrad_l1_masked(Value live, Value stopped, Value mask, double denom) {
    return sum(mul(abs(sub(live, stop_gradient(stopped))), mask)) / denom;
}

// Symmetric stop-gradient consistency over rendered accumulation and depth
// maps. The depth half is restricted to pixels where both branches have
// accumulation above the support threshold, normalized by the count of such
// pixels (one if the set is empty).
inline ConsistencyLoss consistency_loss(Graph& g, Value accum_a, Value depth_a, Value accum_b,
                                        Value depth_b, const LossWeights& weights) {
    ConsistencyLoss out;
    out.alpha = add(stopgrad_l1_mean(accum_a, accum_b) * 0.5,
                    stopgrad_l1_mean(accum_b, accum_a) * 0.5);

    const Tensor& oa = accum_a.val();
    const Tensor& ob = accum_b.val();
    Tensor mask(oa.shape());
    double support = 0.0;
    for (std::size_t i = 0; i < mask.numel(); ++i) {
        const bool in = oa[i] > weights.support_threshold && ob[i] > weights.support_threshold;
        mask[i] = in ? 1.0 : 0.0;
        support += mask[i];
    }
    Value mask_v = g.constant(mask);
    const double denom = std::max(support, 1.0);
    out.depth = add(stopgrad_l1_masked(depth_a, depth_b, mask_v, denom) * 0.5,
                    stopgrad_l1_masked(depth_b, depth_a, mask_v, denom) * 0.5);

    out.total = add(out.alpha * weights.lambda_con_alpha, out.depth * weights.lambda_con_depth);
    return out;
}

// ---------------------------------------------------------------------------
// Frustum constraint.

struct FrustumCamera {
    CameraPose pose;
    Intrinsics intrinsics;
};

// Soft penalty on means outside every input frustum. Per view the violation
// is relu(z_near - z) plus the out-of-bounds excess of the [-1, 1]
// normalized image coordinates; behind the camera the lateral part is a
// fixed penalty of 2 to stay bounded near the z = 0 singularity. The
// per-gaussian violation is the minimum over views.
inline Value frustum_loss(Graph& g, Value means, const std::vector<FrustumCamera>& cameras,
                          double tau, double z_near) {
    if (cameras.empty()) throw std::invalid_argument("frustum_loss: no cameras");
    const std::size_t n = means.val().dim(0);
    Value v_min{};
    for (std::size_t ci = 0; ci < cameras.size(); ++ci) {
        const FrustumCamera& cam = cameras[ci];
        Tensor rot(Shape{3, 3});
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rot[r * 3 + c] = cam.pose.rotation(r, c);
        Tensor center(Shape{3});
        for (int c = 0; c < 3; ++c) center[c] = cam.pose.center[c];
        // rows (mu - o)^T R = camera-frame coordinates
        Value p_cam = matmul(sub(means, g.constant(center)), g.constant(rot));
        Value x = slice(p_cam, 1, 0, 1);
        Value y = slice(p_cam, 1, 1, 1);
        Value z = slice(p_cam, 1, 2, 1);

        Tensor front_mask(Shape{n, 1});
        for (std::size_t i = 0; i < n; ++i) front_mask[i] = z.val()[i] > 0.0 ? 1.0 : 0.0;
        Value front = g.constant(front_mask);
        // divide by z only where it is positive; masked out elsewhere
        Value z_div = add(mul(z, front), 1.0 - front);

        const double w = static_cast<double>(cam.intrinsics.width);
        const double h = static_cast<double>(cam.intrinsics.height);
        Value ndc_x = (div(x, z_div) * cam.intrinsics.fx + cam.intrinsics.cx) * (2.0 / w) - 1.0;
        Value ndc_y = (div(y, z_div) * cam.intrinsics.fy + cam.intrinsics.cy) * (2.0 / h) - 1.0;
        Value lateral = add(relu(abs(ndc_x) - 1.0), relu(abs(ndc_y) - 1.0));
        Value v = relu(z_near - z) + mul(front, lateral) + (1.0 - front) * 2.0;
        v_min = ci == 0 ? v : minimum(v_min, v);
    }
    return mean(log(v_min * (1.0 / tau) + 1.0));
}

// ---------------------------------------------------------------------------
// Decoder-side regularizers.

struct DecoderRegs {
    Value opacity;
    Value scale;
    Value rotation;
    Value sh;
    Value total;  // dec_inner * (sum of the four)
};

inline DecoderRegs decoder_regularizers(Graph& g, const CandidateSet& set,
                                        const LossWeights& weights) {
    (void)g;
    DecoderRegs out;
    const double t = std::log(weights.alpha_max / (1.0 - weights.alpha_max));
    out.opacity = add(mean(sigmoid(set.opacity_logits)),
                      mean(square(relu(set.opacity_logits - t))));
    out.scale = mean(square(relu(set.log_scales - std::log(weights.s_max))));
    // (1/N) sum_n |r_n|^2 over the raw pre-offset residuals
    const double n = static_cast<double>(set.tokens * set.candidates);
    out.rotation = sum(square(set.raw_rot6d)) / n;
    Value soft = softplus((abs(set.sh) - weights.c_max) * (1.0 / weights.tau_sh)) * weights.tau_sh;
    out.sh = weights.sh_power == 2.0 ? mean(square(soft))
                                     : mean(exp(log(soft) * weights.sh_power));
    out.total = (add(add(out.opacity, out.scale), add(out.rotation, out.sh))) * weights.dec_inner;
    return out;
}

// ---------------------------------------------------------------------------
// Composition.

struct BranchLosses {
    RenderingLoss rendering;
    Value frustum;
    DecoderRegs dec;
    Value reg;    // lambda_fru * frustum + lambda_dec * dec.total
    Value total;  // rendering.total + reg
};

inline BranchLosses compose_branch(const RenderingLoss& rendering, Value frustum,
                                   const DecoderRegs& dec, const LossWeights& weights) {
    BranchLosses out;
    out.rendering = rendering;
    out.frustum = frustum;
    out.dec = dec;
    out.reg = add(frustum * weights.lambda_fru, dec.total * weights.lambda_dec);
    out.total = add(rendering.total, out.reg);
    return out;
}

// Two-branch objective: total = (L_a + L_b) / 2 + L_con. With consistency
// disabled this falls back to the single-branch supervised objective.
inline Value total_objective(const BranchLosses& branch_a, const BranchLosses* branch_b,
                             const ConsistencyLoss* consistency) {
    if (branch_b == nullptr) return branch_a.total;
    Value paired = add(branch_a.total, branch_b->total) * 0.5;
    if (consistency == nullptr) return paired;
    return add(paired, consistency->total);
}

}  // namespace tsplat
