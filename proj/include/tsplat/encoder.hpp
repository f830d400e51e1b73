#pragma once

// Multi-view input context and the dual-branch latent encoder. A fixed set
// of learnable scene tokens (plus register tokens) is refined by B blocks;
// inside each block the tokens are projected into parallel geometry and
// appearance streams, every stream cross-attends to the patch context and
// self-attends L times, and a two-layer mixer fuses the streams back into
// the latent state. Attention is pre-norm multi-head scaled dot-product with
// residual connections and learned per-layer scales. The latent count M
// never depends on the number of input views.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsplat/autodiff.hpp"
#include "tsplat/geometry.hpp"
#include "tsplat/optim.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

struct EncoderConfig {
    std::size_t latent_tokens = 64;  // M
    std::size_t token_dim = 64;      // d
    std::size_t blocks = 2;          // B
    std::size_t self_attn_depth = 2; // L
    std::size_t heads = 4;
    std::size_t rgb_width = 64;
    std::size_t ray_width = 32;
    std::size_t registers = 8;
    std::size_t patch_size = 8;
    std::size_t fourier_frequencies = 6;
    double init_std = 0.02;
    double layer_scale_init = 0.1;

    std::size_t context_width() const { return rgb_width + ray_width; }

    void validate() const {
        if (token_dim == 0 || token_dim % heads != 0)
            throw std::invalid_argument("encoder config: token_dim must be divisible by heads");
        if (latent_tokens == 0 || patch_size == 0)
            throw std::invalid_argument("encoder config: zero-sized field");
    }
};

struct InputContext {
    Value tokens;            // [V * P, rgb_width + ray_width]
    std::size_t views = 0;
    std::size_t patches_per_view = 0;
};

struct LatentState {
    Value scene_tokens;      // [M, d]
    Value register_tokens;   // [R, d]
    Value stream_geo;        // [M, d], final-block geometry stream
    Value stream_app;        // [M, d], final-block appearance stream
};

// ---------------------------------------------------------------------------
// Parameter registration. Linear weights are truncated-normal at init_std,
// biases zero, layernorm affine at identity, layer scales at a small
// constant so every block starts near the identity map.

namespace detail {

inline void create_linear(ParamStore& store, Rng& rng, const std::string& name, std::size_t in,
                          std::size_t out, double std) {
    store.create(name + ".w", rng.trunc_normal_tensor({in, out}, std));
    store.create(name + ".b", Tensor::zeros({out}));
}

inline void create_layernorm(ParamStore& store, const std::string& name, std::size_t dim) {
    store.create(name + ".gamma", Tensor::full({dim}, 1.0));
    store.create(name + ".beta", Tensor::zeros({dim}));
}

inline void create_attention(ParamStore& store, Rng& rng, const std::string& name,
                             std::size_t q_dim, std::size_t kv_dim, double std,
                             double layer_scale) {
    create_linear(store, rng, name + ".q", q_dim, q_dim, std);
    create_linear(store, rng, name + ".k", kv_dim, q_dim, std);
    create_linear(store, rng, name + ".v", kv_dim, q_dim, std);
    create_linear(store, rng, name + ".o", q_dim, q_dim, std);
    create_layernorm(store, name + ".ln_q", q_dim);
    create_layernorm(store, name + ".ln_kv", kv_dim);
    store.create(name + ".ls", Tensor::full({q_dim}, layer_scale));
}

inline void create_ffn(ParamStore& store, Rng& rng, const std::string& name, std::size_t dim,
                       double std, double layer_scale) {
    create_linear(store, rng, name + ".w1", dim, 4 * dim, std);
    create_linear(store, rng, name + ".w2", 4 * dim, dim, std);
    create_layernorm(store, name + ".ln", dim);
    store.create(name + ".ls", Tensor::full({dim}, layer_scale));
}

}  // namespace detail

inline void register_encoder_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.token_dim;
    const std::size_t p2 = cfg.patch_size * cfg.patch_size;

    store.create("enc.latents", rng.trunc_normal_tensor({cfg.latent_tokens, d}, cfg.init_std));
    store.create("enc.registers", rng.trunc_normal_tensor({cfg.registers, d}, cfg.init_std));

    detail::create_linear(store, rng, "enc.ctx.rgb", p2 * 3, cfg.rgb_width, cfg.init_std);
    store.create("enc.ctx.ray.w", rng.trunc_normal_tensor({p2 * 6, cfg.ray_width}, cfg.init_std));

    const std::size_t pe = cfg.fourier_frequencies * 6;
    detail::create_linear(store, rng, "enc.cam.mlp1", 4, cfg.ray_width, cfg.init_std);
    detail::create_linear(store, rng, "enc.cam.mlp2", cfg.ray_width, cfg.ray_width, cfg.init_std);
    detail::create_linear(store, rng, "enc.cam.proj", cfg.ray_width + pe, cfg.ray_width,
                          cfg.init_std);

    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const std::string blk = "enc.blk" + std::to_string(b);
        for (const char* stream : {"geo", "app"}) {
            const std::string base = blk + "." + stream;
            detail::create_linear(store, rng, base + ".proj", d, d, cfg.init_std);
            detail::create_attention(store, rng, base + ".ca", d, cfg.context_width(),
                                     cfg.init_std, cfg.layer_scale_init);
            detail::create_ffn(store, rng, base + ".cf", d, cfg.init_std, cfg.layer_scale_init);
            for (std::size_t l = 0; l < cfg.self_attn_depth; ++l) {
                detail::create_attention(store, rng, base + ".sa" + std::to_string(l), d, d,
                                         cfg.init_std, cfg.layer_scale_init);
                detail::create_ffn(store, rng, base + ".sf" + std::to_string(l), d, cfg.init_std,
                                   cfg.layer_scale_init);
            }
        }
        detail::create_linear(store, rng, blk + ".mix1", 2 * d, 4 * d, cfg.init_std);
        detail::create_linear(store, rng, blk + ".mix2", 4 * d, d, cfg.init_std);
    }
}

// ---------------------------------------------------------------------------
// Building blocks.

namespace detail {

inline Value linear(Graph& g, ParamStore& store, const std::string& name, Value x) {
    return add(matmul(x, store.use(g, name + ".w")), store.use(g, name + ".b"));
}

inline Value layernorm_affine(Graph& g, ParamStore& store, const std::string& name, Value x) {
    Value normed = layernorm(x, 1);
    return add(mul(normed, store.use(g, name + ".gamma")), store.use(g, name + ".beta"));
}

struct AttentionOut {
    Value output;  // [Tq, d]
    Value probs;   // [heads, Tq, Tk]
};

// Pre-norm multi-head scaled dot-product attention. The softmax temperature
// sqrt(d_head) realizes the usual 1/sqrt(d_k) score scaling.
inline AttentionOut attention(Graph& g, ParamStore& store, const std::string& name, Value queries,
                              Value keysvalues, std::size_t heads) {
    const std::size_t tq = queries.val().dim(0);
    const std::size_t tk = keysvalues.val().dim(0);
    const std::size_t d = store.value(name + ".q.w").dim(1);
    const std::size_t dh = d / heads;

    Value qn = layernorm_affine(g, store, name + ".ln_q", queries);
    Value kn = layernorm_affine(g, store, name + ".ln_kv", keysvalues);
    Value q = linear(g, store, name + ".q", qn);
    Value k = linear(g, store, name + ".k", kn);
    Value v = linear(g, store, name + ".v", kn);

    auto split_heads = [&](Value x, std::size_t t) {
        return permute(reshape(x, {t, heads, dh}), {1, 0, 2});  // [h, T, dh]
    };
    Value qh = split_heads(q, tq);
    Value kh = split_heads(k, tk);
    Value vh = split_heads(v, tk);

    Value scores = matmul(qh, permute(kh, {0, 2, 1}));  // [h, Tq, Tk]
    Value probs = softmax(scores, 2, std::sqrt(static_cast<double>(dh)));
    Value ctx = matmul(probs, vh);                       // [h, Tq, dh]
    Value merged = reshape(permute(ctx, {1, 0, 2}), {tq, d});
    Value out = linear(g, store, name + ".o", merged);
    return {mul(out, store.use(g, name + ".ls")), probs};
}

inline Value ffn(Graph& g, ParamStore& store, const std::string& name, Value x) {
    Value h = layernorm_affine(g, store, name + ".ln", x);
    h = gelu(linear(g, store, name + ".w1", h));
    h = linear(g, store, name + ".w2", h);
    return mul(h, store.use(g, name + ".ls"));
}

}  // namespace detail

// ---------------------------------------------------------------------------

// Per-view patch tokens: concat(camera token, rgb token) where the camera
// token is the linearly embedded Plucker patch plus the per-view camera code
// broadcast to all patches.
inline InputContext build_context(Graph& g, ParamStore& store, const NormalizedScene& scene,
                                  const EncoderConfig& cfg) {
    if (scene.views.empty()) throw std::invalid_argument("build_context: no views");
    const std::size_t h = scene.views[0].intrinsics.height;
    const std::size_t w = scene.views[0].intrinsics.width;
    for (const CameraView& v : scene.views)
        if (v.intrinsics.height != h || v.intrinsics.width != w)
            throw std::invalid_argument("build_context: mixed image sizes across views");
    if (h % cfg.patch_size != 0 || w % cfg.patch_size != 0)
        throw std::invalid_argument("build_context: image size not divisible by patch size");

    CameraCodeParams code_params;
    code_params.mlp_w1 = store.use(g, "enc.cam.mlp1.w");
    code_params.mlp_b1 = store.use(g, "enc.cam.mlp1.b");
    code_params.mlp_w2 = store.use(g, "enc.cam.mlp2.w");
    code_params.mlp_b2 = store.use(g, "enc.cam.mlp2.b");
    code_params.proj_w = store.use(g, "enc.cam.proj.w");
    code_params.proj_b = store.use(g, "enc.cam.proj.b");
    Value ray_w = store.use(g, "enc.ctx.ray.w");

    std::vector<Value> view_tokens;
    view_tokens.reserve(scene.views.size());
    for (const CameraView& view : scene.views) {
        if (view.image.ndim() != 3 || view.image.dim(0) != h || view.image.dim(1) != w)
            throw std::invalid_argument("build_context: image missing or mis-sized");
        PluckerMap rays = plucker_rays(view.pose, view.intrinsics);
        Value ray_patches = g.constant(patchify(rays.data, cfg.patch_size));
        Value ray_emb = matmul(ray_patches, ray_w);
        Value code = camera_code(g, code_params, view.pose, view.intrinsics,
                                 cfg.fourier_frequencies);
        Value cam_tokens = add(ray_emb, code);

        Value rgb_patches = g.constant(patchify(view.image, cfg.patch_size));
        Value rgb_tokens = detail::linear(g, store, "enc.ctx.rgb", rgb_patches);
        view_tokens.push_back(concat({cam_tokens, rgb_tokens}, 1));
    }

    InputContext ctx;
    ctx.views = scene.views.size();
    ctx.patches_per_view = (h / cfg.patch_size) * (w / cfg.patch_size);
    ctx.tokens = view_tokens.size() == 1 ? view_tokens[0] : concat(view_tokens, 0);
    return ctx;
}

namespace detail {

inline Value run_stream(Graph& g, ParamStore& store, const std::string& base, Value latents_full,
                        Value ctx_tokens, const EncoderConfig& cfg) {
    Value f = linear(g, store, base + ".proj", latents_full);
    f = add(f, attention(g, store, base + ".ca", f, ctx_tokens, cfg.heads).output);
    f = add(f, ffn(g, store, base + ".cf", f));
    for (std::size_t l = 0; l < cfg.self_attn_depth; ++l) {
        const std::string idx = std::to_string(l);
        f = add(f, attention(g, store, base + ".sa" + idx, f, f, cfg.heads).output);
        f = add(f, ffn(g, store, base + ".sf" + idx, f));
    }
    return f;
}

}  // namespace detail

struct BlockOut {
    Value latents_full;  // [M + R, d]
    Value stream_geo;    // [M + R, d]
    Value stream_app;    // [M + R, d]
};

// One dual-branch block over the full latent set (scene + register tokens).
inline BlockOut dual_branch_block(Graph& g, ParamStore& store, Value latents_full,
                                  const InputContext& ctx, const EncoderConfig& cfg,
                                  std::size_t block_index) {
    const std::string blk = "enc.blk" + std::to_string(block_index);
    Value f_geo = detail::run_stream(g, store, blk + ".geo", latents_full, ctx.tokens, cfg);
    Value f_app = detail::run_stream(g, store, blk + ".app", latents_full, ctx.tokens, cfg);
    Value mixed = concat({f_geo, f_app}, 1);
    mixed = gelu(detail::linear(g, store, blk + ".mix1", mixed));
    mixed = detail::linear(g, store, blk + ".mix2", mixed);
    return {add(latents_full, mixed), f_geo, f_app};
}

// Refine the learnable latents through B blocks. Register tokens take part
// in every attention but are dropped from the returned streams.
inline LatentState encode(Graph& g, ParamStore& store, const NormalizedScene& scene,
                          const EncoderConfig& cfg) {
    cfg.validate();
    const std::size_t m = cfg.latent_tokens;
    Value latents = store.use(g, "enc.latents");
    Value registers = store.use(g, "enc.registers");
    Value full = cfg.registers > 0 ? concat({latents, registers}, 0) : latents;

    LatentState state;
    if (cfg.blocks == 0) {
        state.scene_tokens = latents;
        state.register_tokens = registers;
        state.stream_geo = latents;
        state.stream_app = latents;
        return state;
    }

    InputContext ctx = build_context(g, store, scene, cfg);
    BlockOut out{full, full, full};
    for (std::size_t b = 0; b < cfg.blocks; ++b) out = dual_branch_block(g, store, out.latents_full, ctx, cfg, b);

    state.scene_tokens = slice(out.latents_full, 0, 0, m);
    state.register_tokens = cfg.registers > 0 ? slice(out.latents_full, 0, m, cfg.registers)
                                              : g.constant(Tensor(Shape{0, cfg.token_dim}));
    state.stream_geo = slice(out.stream_geo, 0, 0, m);
    state.stream_app = slice(out.stream_app, 0, 0, m);
    return state;
}

}  // namespace tsplat
