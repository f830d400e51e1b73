#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "tsplat/encoder.hpp"
#include "tsplat/gradcheck.hpp"

using namespace tsplat;
using tsplat::testing::look_at;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.latent_tokens = 8;
    cfg.token_dim = 16;
    cfg.blocks = 1;
    cfg.self_attn_depth = 1;
    cfg.heads = 4;
    cfg.rgb_width = 12;
    cfg.ray_width = 8;
    cfg.registers = 2;
    cfg.patch_size = 8;
    return cfg;
}

Intrinsics square_intrinsics(std::size_t size) {
    Intrinsics k;
    k.fx = k.fy = static_cast<double>(size);
    k.cx = k.cy = static_cast<double>(size) / 2.0;
    k.width = k.height = size;
    return k;
}

CameraView arc_view(Rng& rng, double angle_deg, std::size_t size) {
    const double a = angle_deg * EIGEN_PI / 180.0;
    CameraView v;
    v.pose = look_at({2.0 * std::sin(a), 0.1, -2.0 * std::cos(a)}, {0, 0, 0});
    v.intrinsics = square_intrinsics(size);
    v.image = rng.uniform_tensor({size, size, 3}, 0.0, 1.0);
    return v;
}

NormalizedScene toy_scene(Rng& rng, std::size_t views, std::size_t size) {
    std::vector<CameraView> vs;
    for (std::size_t i = 0; i < views; ++i)
        vs.push_back(arc_view(rng, -30.0 + 60.0 * static_cast<double>(i) /
                                         std::max<std::size_t>(1, views - 1),
                              size));
    return canonicalize(vs);
}

}  // namespace

TEST_CASE("build_context") {
    EncoderConfig cfg = tiny_config();
    SECTION("one 64x64 view with patch 8 yields 64 tokens") {
        Rng rng(3);
        ParamStore store;
        register_encoder_params(store, cfg, rng);
        Graph g;
        std::vector<CameraView> vs = {arc_view(rng, 0.0, 64)};
        NormalizedScene scene{vs, 1.0, CameraPose{}};
        InputContext ctx = build_context(g, store, scene, cfg);
        CHECK(ctx.tokens.val().shape() == Shape{64, cfg.context_width()});
        CHECK(ctx.patches_per_view == 64);
    }
    SECTION("identical views produce identical token blocks") {
        Rng rng(5);
        ParamStore store;
        register_encoder_params(store, cfg, rng);
        Graph g;
        CameraView v = arc_view(rng, 10.0, 16);
        NormalizedScene scene{{v, v}, 1.0, CameraPose{}};
        InputContext ctx = build_context(g, store, scene, cfg);
        const Tensor& t = ctx.tokens.val();
        const std::size_t p = ctx.patches_per_view;
        REQUIRE(t.dim(0) == 2 * p);
        for (std::size_t i = 0; i < p * cfg.context_width(); ++i)
            CHECK(t[i] == t[p * cfg.context_width() + i]);
    }
    SECTION("zeroed camera-code parameters reduce cam tokens to the ray embedding") {
        Rng rng(7);
        ParamStore store;
        register_encoder_params(store, cfg, rng);
        for (const char* name :
             {"enc.cam.mlp1.w", "enc.cam.mlp1.b", "enc.cam.mlp2.w", "enc.cam.mlp2.b",
              "enc.cam.proj.w", "enc.cam.proj.b"}) {
            Tensor& t = store.entry(name).value;
            std::fill(t.vec().begin(), t.vec().end(), 0.0);
        }
        Graph g;
        CameraView v = arc_view(rng, -20.0, 16);
        NormalizedScene scene{{v}, 1.0, CameraPose{}};
        InputContext ctx = build_context(g, store, scene, cfg);

        PluckerMap rays = plucker_rays(v.pose, v.intrinsics);
        Graph g2;
        Value expect = matmul(g2.constant(patchify(rays.data, cfg.patch_size)),
                              g2.constant(store.value("enc.ctx.ray.w")));
        const std::size_t p = ctx.patches_per_view;
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < cfg.ray_width; ++j)
                CHECK(ctx.tokens.val().at({i, j}) == expect.val().at({i, j}));
    }
    SECTION("mixed image sizes are rejected") {
        Rng rng(9);
        ParamStore store;
        register_encoder_params(store, cfg, rng);
        Graph g;
        NormalizedScene scene{{arc_view(rng, 0.0, 16), arc_view(rng, 10.0, 32)}, 1.0,
                              CameraPose{}};
        CHECK_THROWS_AS(build_context(g, store, scene, cfg), std::invalid_argument);
    }
}

TEST_CASE("attention building block") {
    EncoderConfig cfg = tiny_config();
    Rng rng(11);
    ParamStore store;
    register_encoder_params(store, cfg, rng);
    const std::string name = "enc.blk0.geo.ca";

    SECTION("a single context token receives weight one from every query") {
        Graph g;
        Value kv = g.constant(rng.normal_tensor({1, cfg.context_width()}));
        Value q1 = g.constant(rng.normal_tensor({5, cfg.token_dim}));
        Value q2 = g.constant(rng.normal_tensor({5, cfg.token_dim}));
        auto a1 = detail::attention(g, store, name, q1, kv, cfg.heads);
        auto a2 = detail::attention(g, store, name, q2, kv, cfg.heads);
        for (std::size_t i = 0; i < a1.probs.val().numel(); ++i)
            CHECK(a1.probs.val()[i] == Catch::Approx(1.0).margin(1e-12));
        // the attended value is the context token's value projection either way
        for (std::size_t i = 0; i < a1.output.val().numel(); ++i)
            CHECK(a1.output.val()[i] == Catch::Approx(a2.output.val()[i]).margin(1e-12));
        store.clear_bindings();
    }
    SECTION("attention rows sum to one") {
        Graph g;
        Value kv = g.constant(rng.normal_tensor({7, cfg.context_width()}));
        Value q = g.constant(rng.normal_tensor({5, cfg.token_dim}));
        auto a = detail::attention(g, store, name, q, kv, cfg.heads);
        const Tensor& p = a.probs.val();
        for (std::size_t hq = 0; hq < cfg.heads * 5; ++hq) {
            double row = 0.0;
            for (std::size_t k = 0; k < 7; ++k) row += p[hq * 7 + k];
            CHECK(row == Catch::Approx(1.0).margin(1e-9));
        }
        store.clear_bindings();
    }
}

TEST_CASE("encode") {
    EncoderConfig cfg = tiny_config();
    SECTION("zero blocks return the initial learnable latents") {
        Rng rng(13);
        ParamStore store;
        EncoderConfig cfg0 = cfg;
        cfg0.blocks = 0;
        register_encoder_params(store, cfg0, rng);
        Graph g;
        NormalizedScene scene = toy_scene(rng, 2, 16);
        LatentState state = encode(g, store, scene, cfg0);
        const Tensor& init = store.value("enc.latents");
        for (std::size_t i = 0; i < init.numel(); ++i)
            CHECK(state.scene_tokens.val()[i] == init[i]);
    }
    SECTION("latent shape is fixed regardless of view count") {
        Rng rng(17);
        ParamStore store;
        register_encoder_params(store, cfg, rng);
        for (std::size_t v : {2u, 4u, 8u}) {
            Graph g;
            NormalizedScene scene = toy_scene(rng, v, 16);
            LatentState state = encode(g, store, scene, cfg);
            CHECK(state.scene_tokens.val().shape() == Shape{cfg.latent_tokens, cfg.token_dim});
            CHECK(state.stream_geo.val().shape() == Shape{cfg.latent_tokens, cfg.token_dim});
            store.clear_bindings();
        }
    }
    SECTION("latent state stays finite through the blocks") {
        Rng rng(19);
        ParamStore store;
        EncoderConfig big = cfg;
        big.blocks = 3;
        register_encoder_params(store, big, rng);
        Graph g;
        NormalizedScene scene = toy_scene(rng, 3, 16);
        LatentState state = encode(g, store, scene, big);
        CHECK(state.scene_tokens.val().all_finite());
        CHECK(state.stream_app.val().all_finite());
    }
    SECTION("permuting the input views leaves the latents unchanged") {
        Rng rng(23);
        ParamStore store;
        register_encoder_params(store, cfg, rng);
        std::vector<CameraView> views;
        for (int i = 0; i < 3; ++i) views.push_back(arc_view(rng, -25.0 + 25.0 * i, 16));

        auto run = [&](const std::vector<CameraView>& vs) {
            Graph g;
            LatentState state = encode(g, store, canonicalize(vs), cfg);
            Tensor out = state.scene_tokens.val();
            store.clear_bindings();
            return out;
        };
        Tensor base = run(views);
        std::vector<CameraView> permuted = {views[2], views[0], views[1]};
        Tensor other = run(permuted);
        double worst = 0.0;
        for (std::size_t i = 0; i < base.numel(); ++i)
            worst = std::max(worst, std::abs(base[i] - other[i]));
        CHECK(worst < 1e-9);
    }
}

TEST_CASE("encoder gradients pass finite differences over every parameter") {
    EncoderConfig cfg = tiny_config();
    cfg.registers = 2;
    Rng rng(29);
    ParamStore store;
    register_encoder_params(store, cfg, rng);
    NormalizedScene scene = toy_scene(rng, 2, 16);
    Tensor head = Rng(99).uniform_tensor({cfg.latent_tokens, cfg.token_dim}, -1.0, 1.0);

    StoreGraphFn fn = [&](Graph& g, ParamStore& s) {
        LatentState state = encode(g, s, scene, cfg);
        Value mixed = add(state.scene_tokens, mul(state.stream_geo, state.stream_app));
        return sum(mul(mixed, g.constant(head)));
    };
    StoreGradCheckResult res = grad_check_store(fn, store);
    INFO("worst parameter: " << res.worst_param << "[" << res.worst_coord << "]");
    CHECK(res.max_rel_error < 1e-5);
}
