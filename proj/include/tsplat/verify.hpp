#pragma once

// The gradient verification suite behind the grad-check command and the
// acceptance gate: every differentiable op, every loss, the full decoder
// chain, and the renderer forward+backward are compared against central
// finite differences at fixed-seed random points.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tsplat/decoder.hpp"
#include "tsplat/gradcheck.hpp"
#include "tsplat/losses.hpp"
#include "tsplat/renderer.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

struct VerifyResult {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

namespace detail {

inline Tensor signed_uniform(Rng& rng, Shape shape, double lo = 0.2, double hi = 1.5) {
    Tensor t = rng.uniform_tensor(std::move(shape), lo, hi);
    for (std::size_t i = 0; i < t.numel(); ++i)
        if (rng.uniform(0.0, 1.0) < 0.5) t[i] = -t[i];
    return t;
}

inline VerifyResult check_case(const std::string& name, const GraphFn& fn,
                               const std::function<std::vector<Tensor>(Rng&)>& sample,
                               double tolerance, int repeats = 10, std::uint64_t seed = 42) {
    Rng rng(seed);
    VerifyResult result{name, 0.0, tolerance, false};
    for (int rep = 0; rep < repeats; ++rep) {
        const double err = grad_check(fn, sample(rng), 1e-6);
        result.max_rel_error = std::max(result.max_rel_error, err);
    }
    result.pass = result.max_rel_error < tolerance;
    return result;
}

inline GraphFn weighted_head(const std::function<Value(Graph&, const std::vector<Value>&)>& op) {
    return [op](Graph& g, const std::vector<Value>& in) {
        Value out = op(g, in);
        if (out.val().numel() == 1) return out;
        return sum(mul(out, g.constant(Rng(99).uniform_tensor(out.val().shape(), 0.5, 1.5))));
    };
}

}  // namespace detail

inline std::vector<VerifyResult> verify_diffcore_ops() {
    using detail::signed_uniform;
    std::vector<VerifyResult> results;
    auto small = [](Rng& r) { return std::vector<Tensor>{detail::signed_uniform(r, {2, 3})}; };
    auto positive = [](Rng& r) {
        return std::vector<Tensor>{r.uniform_tensor({2, 3}, 0.3, 2.0)};
    };
    auto pair = [](Rng& r) {
        return std::vector<Tensor>{detail::signed_uniform(r, {2, 3}),
                                   detail::signed_uniform(r, {2, 3})};
    };
    auto gapped_pair = [](Rng& r) {
        Tensor a = detail::signed_uniform(r, {2, 3});
        Tensor b = a;
        for (std::size_t i = 0; i < b.numel(); ++i) {
            const double gap = r.uniform(0.1, 0.8);
            b[i] += r.uniform(0.0, 1.0) < 0.5 ? gap : -gap;
        }
        return std::vector<Tensor>{a, b};
    };

    auto add_case = [&](const std::string& name,
                        std::function<Value(Graph&, const std::vector<Value>&)> op,
                        std::function<std::vector<Tensor>(Rng&)> sample) {
        results.push_back(detail::check_case(name, detail::weighted_head(op), sample, 1e-6));
    };

    add_case("add", [](Graph&, const std::vector<Value>& in) { return add(in[0], in[1]); }, pair);
    add_case("sub", [](Graph&, const std::vector<Value>& in) { return sub(in[0], in[1]); }, pair);
    add_case("mul", [](Graph&, const std::vector<Value>& in) { return mul(in[0], in[1]); }, pair);
    add_case("div", [](Graph&, const std::vector<Value>& in) { return div(in[0], in[1]); },
             [&](Rng& r) {
                 return std::vector<Tensor>{signed_uniform(r, {2, 3}),
                                            r.uniform_tensor({2, 3}, 0.3, 2.0)};
             });
    add_case("add broadcast",
             [](Graph&, const std::vector<Value>& in) { return add(in[0], in[1]); },
             [&](Rng& r) {
                 return std::vector<Tensor>{signed_uniform(r, {2, 3}), signed_uniform(r, {3})};
             });
    add_case("matmul",
             [](Graph&, const std::vector<Value>& in) { return matmul(in[0], in[1]); },
             [&](Rng& r) {
                 return std::vector<Tensor>{signed_uniform(r, {3, 4}), signed_uniform(r, {4, 2})};
             });
    add_case("matmul batched",
             [](Graph&, const std::vector<Value>& in) { return matmul(in[0], in[1]); },
             [&](Rng& r) {
                 return std::vector<Tensor>{signed_uniform(r, {2, 3, 4}),
                                            signed_uniform(r, {2, 4, 2})};
             });
    add_case("matmul broadcast",
             [](Graph&, const std::vector<Value>& in) { return matmul(in[0], in[1]); },
             [&](Rng& r) {
                 return std::vector<Tensor>{signed_uniform(r, {2, 3, 4}),
                                            signed_uniform(r, {4, 2})};
             });
    add_case("exp", [](Graph&, const std::vector<Value>& in) { return exp(in[0]); }, small);
    add_case("log", [](Graph&, const std::vector<Value>& in) { return log(in[0]); }, positive);
    add_case("sigmoid", [](Graph&, const std::vector<Value>& in) { return sigmoid(in[0]); },
             small);
    add_case("softplus", [](Graph&, const std::vector<Value>& in) { return softplus(in[0]); },
             small);
    add_case("relu", [](Graph&, const std::vector<Value>& in) { return relu(in[0]); }, small);
    add_case("sqrt", [](Graph&, const std::vector<Value>& in) { return sqrt(in[0]); }, positive);
    add_case("square", [](Graph&, const std::vector<Value>& in) { return square(in[0]); }, small);
    add_case("abs", [](Graph&, const std::vector<Value>& in) { return abs(in[0]); }, small);
    add_case("max_with_constant",
             [](Graph&, const std::vector<Value>& in) { return max_with_constant(in[0], 0.05); },
             small);
    add_case("min_with_constant",
             [](Graph&, const std::vector<Value>& in) { return min_with_constant(in[0], -0.05); },
             small);
    add_case("clamp",
             [](Graph&, const std::vector<Value>& in) { return clamp(in[0], -1.9, 1.9); }, small);
    add_case("clamp_soft",
             [](Graph&, const std::vector<Value>& in) { return clamp_soft(in[0], -1, 1, 2.0); },
             small);
    add_case("maximum",
             [](Graph&, const std::vector<Value>& in) { return maximum(in[0], in[1]); },
             gapped_pair);
    add_case("minimum",
             [](Graph&, const std::vector<Value>& in) { return minimum(in[0], in[1]); },
             gapped_pair);
    add_case("cross3", [](Graph&, const std::vector<Value>& in) { return cross3(in[0], in[1]); },
             [&](Rng& r) {
                 return std::vector<Tensor>{signed_uniform(r, {4, 3}), signed_uniform(r, {4, 3})};
             });
    add_case("reshape",
             [](Graph&, const std::vector<Value>& in) { return reshape(in[0], {3, 2}); }, small);
    add_case("permute",
             [](Graph&, const std::vector<Value>& in) { return permute(in[0], {1, 0}); }, small);
    add_case("broadcast_to",
             [](Graph&, const std::vector<Value>& in) { return broadcast_to(in[0], {4, 2, 3}); },
             small);
    add_case("slice", [](Graph&, const std::vector<Value>& in) { return slice(in[0], 1, 1, 2); },
             small);
    add_case("concat",
             [](Graph&, const std::vector<Value>& in) { return concat({in[0], in[1]}, 1); },
             [&](Rng& r) {
                 return std::vector<Tensor>{signed_uniform(r, {2, 3}), signed_uniform(r, {2, 2})};
             });
    add_case("sum", [](Graph&, const std::vector<Value>& in) { return sum(in[0]); }, small);
    add_case("sum axis", [](Graph&, const std::vector<Value>& in) { return sum(in[0], 1); },
             small);
    add_case("mean axis",
             [](Graph&, const std::vector<Value>& in) { return mean(in[0], 0, true); }, small);
    add_case("softmax",
             [](Graph&, const std::vector<Value>& in) { return softmax(in[0], 1, 1.0); }, small);
    add_case("softmax tempered",
             [](Graph&, const std::vector<Value>& in) { return softmax(in[0], 0, 2.5); }, small);
    add_case("layernorm",
             [](Graph&, const std::vector<Value>& in) { return layernorm(in[0], 1); }, small);
    add_case("normalize_l2",
             [](Graph&, const std::vector<Value>& in) { return normalize_l2(in[0], 1); },
             positive);
    add_case("gelu", [](Graph&, const std::vector<Value>& in) { return gelu(in[0]); }, small);
    add_case("sobel_x", [](Graph&, const std::vector<Value>& in) { return sobel_x(in[0]); },
             [&](Rng& r) { return std::vector<Tensor>{signed_uniform(r, {5, 4, 2})}; });
    add_case("sobel_y", [](Graph&, const std::vector<Value>& in) { return sobel_y(in[0]); },
             [&](Rng& r) { return std::vector<Tensor>{signed_uniform(r, {5, 4, 2})}; });
    add_case("avgpool2", [](Graph&, const std::vector<Value>& in) { return avgpool2(in[0]); },
             [&](Rng& r) { return std::vector<Tensor>{signed_uniform(r, {4, 6, 2})}; });
    return results;
}

inline std::vector<VerifyResult> verify_losses() {
    std::vector<VerifyResult> results;
    LossWeights weights;

    results.push_back(detail::check_case(
        "rendering_loss",
        [weights](Graph& g, const std::vector<Value>& in) {
            return rendering_loss(g, in[0], in[1], weights).total;
        },
        [](Rng& r) {
            return std::vector<Tensor>{r.uniform_tensor({8, 8, 3}, 0.0, 1.0),
                                       r.uniform_tensor({8, 8, 3}, 0.0, 1.0)};
        },
        1e-6, 5));

    // symmetric halves with the stopped branch frozen: the sg contract makes
    // the combined form diverge from plain finite differences by design, so
    // only the live operand is probed
    results.push_back(detail::check_case(
        "consistency_loss halves",
        [weights](Graph& g, const std::vector<Value>& in) {
            Rng frozen_rng(7);
            Value frozen_accum = g.constant(frozen_rng.uniform_tensor({6, 6}, 0.0, 1.0));
            Value frozen_depth = g.constant(frozen_rng.uniform_tensor({6, 6}, 0.5, 2.0));
            Tensor mask(Shape{6, 6});
            for (std::size_t i = 0; i < 36; ++i) mask[i] = i % 3 == 0 ? 1.0 : 0.0;
            Value alpha = stopgrad_l1_mean(in[0], frozen_accum);
            Value depth = stopgrad_l1_masked(in[1], frozen_depth, g.constant(mask), 12.0);
            return add(alpha * weights.lambda_con_alpha, depth * weights.lambda_con_depth);
        },
        [](Rng& r) {
            return std::vector<Tensor>{r.uniform_tensor({6, 6}, 0.0, 1.0),
                                       r.uniform_tensor({6, 6}, 0.5, 2.0)};
        },
        1e-6, 5));

    Intrinsics k;
    k.fx = k.fy = 32.0;
    k.cx = k.cy = 32.0;
    k.width = k.height = 64;
    results.push_back(detail::check_case(
        "frustum_loss",
        [weights, k](Graph& g, const std::vector<Value>& in) {
            return frustum_loss(g, in[0], {{CameraPose{}, k}}, weights.frustum_tau, 0.01);
        },
        [](Rng& r) {
            Tensor means(Shape{4, 3});
            for (std::size_t i = 0; i < 4; ++i) {
                means[i * 3 + 0] = r.uniform(-3.0, 3.0);
                means[i * 3 + 1] = r.uniform(-0.4, 0.4);
                means[i * 3 + 2] = r.uniform(0.6, 2.5);
            }
            return std::vector<Tensor>{means};
        },
        1e-6, 5));

    results.push_back(detail::check_case(
        "decoder_regularizers",
        [weights](Graph& g, const std::vector<Value>& in) {
            CandidateSet s;
            s.tokens = 1;
            s.candidates = 4;
            s.positions = in[0];
            s.log_scales = in[0];
            s.raw_rot6d = in[1];
            s.rot6d = in[1];
            s.opacity_logits = in[2];
            s.gate_logits = in[2];
            s.sh = in[3];
            return decoder_regularizers(g, s, weights).total;
        },
        [](Rng& r) {
            Tensor sh = r.uniform_tensor({1, 4, 6}, 0.2, 1.0);
            for (std::size_t i = 0; i < sh.numel(); ++i)
                if (r.uniform(0.0, 1.0) < 0.5) sh[i] = -sh[i];
            return std::vector<Tensor>{r.normal_tensor({1, 4, 3}, -2.0, 0.3),
                                       r.normal_tensor({1, 4, 6}, 0.0, 0.3),
                                       r.normal_tensor({1, 4, 1}, -4.0, 0.5), sh};
        },
        1e-6, 5));
    return results;
}

inline std::vector<VerifyResult> verify_decoder() {
    std::vector<VerifyResult> results;
    results.push_back(detail::check_case(
        "decode_stage chain",
        [](Graph& g, const std::vector<Value>& in) {
            CandidateSet s;
            s.tokens = 2;
            s.candidates = 8;
            s.positions = in[0];
            s.log_scales = in[1];
            s.rot6d = in[2];
            s.raw_rot6d = in[2];
            s.opacity_logits = in[3];
            s.gate_logits = in[4];
            s.sh = in[5];
            GaussianSceneValues scene = decode_stage(s, StagePoint{1, 0.4}, DecoderConfig{});
            return sum(square(scene.means)) + sum(square(scene.scales)) +
                   sum(square(scene.rotations)) + sum(square(scene.opacities)) +
                   sum(square(scene.sh));
        },
        [](Rng& r) {
            Tensor rot = r.normal_tensor({2, 8, 6}, 0.0, 0.2);
            for (std::size_t i = 0; i < 16; ++i) {
                rot[i * 6 + 0] += 1.0;
                rot[i * 6 + 4] += 1.0;
            }
            return std::vector<Tensor>{
                r.normal_tensor({2, 8, 3}, 0.0, 0.5), r.normal_tensor({2, 8, 3}, -1.5, 0.3), rot,
                r.normal_tensor({2, 8, 1}, -2.0, 0.5), r.normal_tensor({2, 8, 1}, 0.0, 0.5),
                r.normal_tensor({2, 8, 6}, 0.0, 0.3)};
        },
        1e-6, 5));
    return results;
}

inline std::vector<VerifyResult> verify_renderer() {
    std::vector<VerifyResult> results;
    Intrinsics k;
    k.fx = k.fy = 8.0;
    k.cx = k.cy = 4.0;
    k.width = k.height = 8;
    RenderConfig cfg;

    results.push_back(detail::check_case(
        "renderer forward+backward",
        [k, cfg](Graph& g, const std::vector<Value>& in) {
            GaussianSceneValues sv;
            sv.count = in[0].val().dim(0);
            sv.means = in[0];
            sv.scales = in[1];
            sv.rotations = in[2];
            sv.opacities = in[3];
            sv.sh = in[4];
            RenderMaps maps = render_node(g, sv, in[5], CameraPose{}, k, cfg);
            Value packed =
                concat({maps.color, reshape(maps.depth, {8, 8, 1}), reshape(maps.accum, {8, 8, 1})},
                       2);
            return sum(mul(packed, g.constant(Rng(99).uniform_tensor({8, 8, 5}, -1.0, 1.0))));
        },
        [](Rng& r) {
            const std::size_t n = 4;
            Tensor means(Shape{n, 3}), scales(Shape{n, 3}), rots(Shape{n, 3, 3});
            Tensor opac(Shape{n, 1}), sh(Shape{n, 3, 16});
            for (std::size_t i = 0; i < n; ++i) {
                const double z = r.uniform(1.0, 2.0);
                means[i * 3 + 0] = r.uniform(-0.3, 0.3) * z;
                means[i * 3 + 1] = r.uniform(-0.3, 0.3) * z;
                means[i * 3 + 2] = z;
                for (int a = 0; a < 3; ++a) scales[i * 3 + a] = r.uniform(0.05, 0.15);
                Eigen::Quaterniond q(r.normal(), r.normal(), r.normal(), r.normal());
                q.normalize();
                const Eigen::Matrix3d rm = q.toRotationMatrix();
                for (int a = 0; a < 3; ++a)
                    for (int b = 0; b < 3; ++b) rots[i * 9 + a * 3 + b] = rm(a, b);
                opac[i] = r.uniform(0.3, 0.6);
                for (std::size_t c = 0; c < 48; ++c) sh[i * 48 + c] = r.normal(0.0, 0.1);
            }
            return std::vector<Tensor>{means, scales, rots, opac, sh, Tensor::zeros({3})};
        },
        1e-4, 4, 23));
    return results;
}

inline std::vector<VerifyResult> run_grad_check_suite() {
    std::vector<VerifyResult> all = verify_diffcore_ops();
    for (auto& r : verify_losses()) all.push_back(std::move(r));
    for (auto& r : verify_decoder()) all.push_back(std::move(r));
    for (auto& r : verify_renderer()) all.push_back(std::move(r));
    return all;
}

}  // namespace tsplat
