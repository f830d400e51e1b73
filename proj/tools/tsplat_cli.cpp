// Command-line surface: train, render, export-ply, merge-demo, grad-check,
// and eval. See README for file formats and examples.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tsplat/checkpoint.hpp"
#include "tsplat/config.hpp"
#include "tsplat/data.hpp"
#include "tsplat/decoder.hpp"
#include "tsplat/image.hpp"
#include "tsplat/metrics.hpp"
#include "tsplat/ply.hpp"
#include "tsplat/renderer.hpp"
#include "tsplat/training.hpp"
#include "tsplat/verify.hpp"

namespace {

using namespace tsplat;

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return parse_config(read_file(path));
}

// Peak resident set size in kB (Linux); 0 when unavailable. Used as the
// peak-memory proxy in eval reports.
std::size_t peak_rss_kb() {
    std::ifstream status("/proc/self/status");
    std::string line;
    while (std::getline(status, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::size_t kb = 0;
            std::sscanf(line.c_str(), "VmHWM: %zu", &kb);
            return kb;
        }
    }
    return 0;
}

struct DataOverride {
    std::string dataset_dir;
    std::optional<std::uint64_t> synthetic_seed;

    void apply(RunConfig& cfg) const {
        if (!dataset_dir.empty()) cfg.io.dataset_dir = dataset_dir;
        if (synthetic_seed) {
            cfg.io.dataset_dir.clear();
            cfg.training.seed = *synthetic_seed;
        }
    }
};

// Camera spec file: a [camera] section with either rotation (9 row-major
// values) + center, or eye + target (+ optional up), plus intrinsics.
struct CameraSpec {
    CameraPose pose;
    Intrinsics intrinsics;
};

CameraSpec parse_camera_spec(const std::string& path) {
    auto kv = tsplat::detail::parse_kv_sections(read_file(path));
    auto take = [&](const std::string& key) -> std::optional<std::string> {
        auto it = kv.find("camera." + key);
        if (it == kv.end()) return std::nullopt;
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto require = [&](const std::string& key) {
        auto v = take(key);
        if (!v) throw std::runtime_error("camera spec: missing key " + key);
        return *v;
    };

    CameraSpec spec;
    if (auto rot = take("rotation")) {
        spec.pose = pose_from_arrays(
            tsplat::detail::parse_number_list(*rot, "rotation"),
            tsplat::detail::parse_number_list(require("center"), "center"));
    } else {
        auto vec3 = [&](const std::string& key) {
            auto v = tsplat::detail::parse_number_list(require(key), key);
            if (v.size() != 3) throw std::runtime_error("camera spec: " + key + " needs 3 values");
            return Eigen::Vector3d(v[0], v[1], v[2]);
        };
        const Eigen::Vector3d eye = vec3("eye");
        const Eigen::Vector3d target = vec3("target");
        Eigen::Vector3d up = Eigen::Vector3d::UnitY();
        if (auto u = take("up")) {
            auto v = tsplat::detail::parse_number_list(*u, "up");
            up = Eigen::Vector3d(v[0], v[1], v[2]);
        }
        spec.pose = look_at_pose(eye, target, up);
    }
    spec.intrinsics.fx = std::stod(require("fx"));
    spec.intrinsics.fy = std::stod(require("fy"));
    spec.intrinsics.cx = std::stod(require("cx"));
    spec.intrinsics.cy = std::stod(require("cy"));
    spec.intrinsics.width = std::stoul(require("width"));
    spec.intrinsics.height = std::stoul(require("height"));
    spec.intrinsics.validate();
    if (!kv.empty()) throw std::runtime_error("camera spec: unknown key " + kv.begin()->first);
    return spec;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::size_t steps,
              const std::string& dump_config) {
    RunConfig cfg = load_config_or_default(config_path);
    if (!out_dir.empty()) cfg.io.out_dir = out_dir;
    if (steps > 0) cfg.training.total_steps = steps;
    if (!dump_config.empty()) {
        atomic_write_file(dump_config, serialize_config(cfg));
        std::cout << "wrote config to " << dump_config << "\n";
        return 0;
    }
    TrainResult result = train(cfg, &std::cout);
    std::cout << "checkpoint: " << result.checkpoint_path << "\n";
    std::cout << "metrics:    " << result.metrics_path << "\n";
    std::cout << "final held-out psnr: " << result.final_psnr << " dB\n";
    return 0;
}

int cmd_render(const std::string& ply_path, const std::string& ckpt_path,
               const DataOverride& data, std::size_t context, const std::string& camera_path,
               const std::string& out_path) {
    const CameraSpec camera = parse_camera_spec(camera_path);
    RenderConfig render_cfg;
    GaussianScene scene;
    CameraPose pose = camera.pose;

    if (!ply_path.empty()) {
        scene = import_splat_ply(ply_path);
    } else if (!ckpt_path.empty()) {
        Checkpoint ckpt = load_checkpoint(ckpt_path);
        data.apply(ckpt.config);
        render_cfg = ckpt.config.renderer;
        Trainer trainer(std::move(ckpt));
        const std::size_t n =
            context > 0 ? context : trainer.config().training.context_views;
        NormalizedScene normalized;
        scene = trainer.reconstruct(n, std::nullopt, &normalized);
        // the decoded scene lives in the canonical frame of its context
        pose = transform_to_frame(normalized.average_pose, normalized.scale, camera.pose);
    } else {
        throw std::runtime_error("render: need --ply or --checkpoint");
    }

    RenderOutput out = render(scene, pose, camera.intrinsics, render_cfg);
    write_ppm(out_path, out.color);
    std::cout << "rendered " << scene.count() << " gaussians to " << out_path << "\n";
    return 0;
}

int cmd_export_ply(const std::string& ckpt_path, const DataOverride& data, std::size_t context,
                   const std::string& out_path) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    data.apply(ckpt.config);
    Trainer trainer(std::move(ckpt));
    const std::size_t n = context > 0 ? context : trainer.config().training.context_views;
    GaussianScene scene = trainer.reconstruct(n, std::nullopt);
    const std::string bytes = write_splat_ply(scene);
    atomic_write_file(out_path, bytes);
    std::cout << "wrote " << scene.count() << " gaussians, " << bytes.size() << " bytes to "
              << out_path << "\n";
    return 0;
}

int cmd_merge_demo(int stage, double lambda) {
    Graph g;
    DecoderConfig cfg;
    std::cout << "stage s=" << stage << " lambda=" << lambda
              << ": G=" << (std::size_t{1} << stage)
              << " gaussians/token, group size b_s=" << (16 >> stage) << "\n\n";

    {
        Value logits = g.constant(Tensor::of({1, 2, 1}, {1.0, 0.0}));
        Value w = gate_weights(logits, 1, cfg.gate_temperature);
        std::printf("gate softmax       logits (1, 0), tau=%g -> weights (%.6f, %.6f)\n",
                    cfg.gate_temperature, w.val()[0], w.val()[1]);
    }
    {
        CandidateSet s;
        s.tokens = 1;
        s.candidates = 8;
        s.positions = g.constant(Tensor::zeros({1, 8, 3}));
        s.log_scales = g.constant(Tensor::full({1, 8, 3}, std::log(0.5)));
        s.rot6d = g.constant(Tensor::zeros({1, 8, 6}));
        s.raw_rot6d = s.rot6d;
        s.opacity_logits = g.constant(Tensor::zeros({1, 8, 1}));
        s.gate_logits = g.constant(Tensor::zeros({1, 8, 1}));
        s.sh = g.constant(Tensor::zeros({1, 8, 3}));
        MergedAttributes m = merge_candidates(s, 1, cfg);
        std::printf("scale merge        8 candidates at 0.5 -> %.9f  (volume correction log(8)/3)\n",
                    std::exp(m.log_scales.val()[0]));
        std::printf("opacity merge      alphas (0.5, 0.5)   -> %.9f  (log-transmittance mean)\n",
                    1.0 - std::exp(m.log_u.val()[0]));
    }
    {
        MergedAttributes parent;
        parent.tokens = 1;
        parent.groups = 1;
        parent.positions = g.constant(Tensor::zeros({1, 1, 3}));
        parent.log_scales = g.constant(Tensor::zeros({1, 1, 3}));
        parent.rot6d = g.constant(Tensor::of({1, 1, 6}, {1, 0, 0, 0, 1, 0}));
        parent.sh = g.constant(Tensor::zeros({1, 1, 3}));
        parent.log_u = g.constant(Tensor::full({1, 1, 1}, std::log(0.25)));
        MergedAttributes kids = split_groups(parent);
        const double child_alpha = 1.0 - std::exp(kids.log_u.val()[0]);
        std::printf("split              parent alpha 0.75   -> children %.9f\n", child_alpha);
        std::printf("split              parent scale 1.0    -> children %.9f  (2^(-1/3))\n",
                    std::exp(kids.log_scales.val()[0]));
        std::printf("composite check    1 - (1 - %.4f)^2    = %.9f\n", child_alpha,
                    1.0 - (1.0 - child_alpha) * (1.0 - child_alpha));
    }
    {
        Rng rng(5);
        CandidateSet s;
        s.tokens = 4;
        s.candidates = cfg.candidates_per_token;
        Tensor rot = rng.normal_tensor({4, 16, 6}, 0.0, 0.2);
        for (std::size_t i = 0; i < 64; ++i) {
            rot[i * 6 + 0] += 1.0;
            rot[i * 6 + 4] += 1.0;
        }
        s.positions = g.constant(rng.normal_tensor({4, 16, 3}, 0.0, 0.5));
        s.log_scales = g.constant(rng.normal_tensor({4, 16, 3}, -2.0, 0.3));
        s.rot6d = g.constant(rot);
        s.raw_rot6d = s.rot6d;
        s.opacity_logits = g.constant(rng.normal_tensor({4, 16, 1}, -3.0, 0.5));
        s.gate_logits = g.constant(rng.normal_tensor({4, 16, 1}, 0.0, 0.5));
        s.sh = g.constant(rng.normal_tensor({4, 16, 48}, 0.0, 0.2));
        GaussianSceneValues scene = decode_stage(s, StagePoint{stage, lambda}, cfg);
        std::printf("\nrandom 4-token set -> %zu gaussians at stage %d (M * 2^s)\n", scene.count,
                    stage);
    }
    return 0;
}

int cmd_grad_check() {
    const std::vector<VerifyResult> results = run_grad_check_suite();
    bool all_pass = true;
    for (const VerifyResult& r : results) {
        std::printf("%-28s max rel err %.3e  (tol %.0e)  %s\n", r.name.c_str(), r.max_rel_error,
                    r.tolerance, r.pass ? "ok" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    std::printf("%zu checks, %s\n", results.size(), all_pass ? "all passed" : "FAILURES");
    return all_pass ? 0 : 1;
}

int cmd_eval(const std::string& ckpt_path, const DataOverride& data, std::size_t context,
             int timing_samples) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    data.apply(ckpt.config);
    Trainer trainer(std::move(ckpt));
    const std::size_t n_context =
        context > 0 ? context : trainer.config().training.context_views;
    const std::size_t frames = trainer.source().frames();
    if (n_context >= frames)
        throw std::runtime_error("eval: context count exceeds available frames");

    // timing protocol: measure scene prediction, discard the first sample
    double total_ms = 0.0;
    NormalizedScene normalized;
    GaussianScene scene;
    for (int s = 0; s < timing_samples + 1; ++s) {
        const auto t0 = std::chrono::steady_clock::now();
        scene = trainer.reconstruct(n_context, std::nullopt, &normalized);
        const auto t1 = std::chrono::steady_clock::now();
        if (s > 0) total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    const double encode_ms = total_ms / std::max(1, timing_samples);

    const std::vector<std::size_t> ctx = trainer.context_indices(n_context, std::nullopt);
    const std::set<std::size_t> ctx_set(ctx.begin(), ctx.end());
    std::vector<std::size_t> targets;
    for (std::size_t f = 0; f < frames && targets.size() < 8; ++f)
        if (ctx_set.count(f) == 0 && (f % std::max<std::size_t>(1, frames / 16) == 0))
            targets.push_back(f);
    if (targets.empty())
        for (std::size_t f = 0; f < frames; ++f)
            if (ctx_set.count(f) == 0) {
                targets.push_back(f);
                break;
            }

    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (std::size_t f : targets) {
        const CameraPose pose =
            transform_to_frame(normalized.average_pose, normalized.scale, trainer.source().pose(f));
        RenderOutput out =
            render(scene, pose, trainer.source().intrinsics(), trainer.config().renderer);
        const Tensor target = trainer.source().view(f).image;
        const double p = psnr(out.color, target);
        const double s = ssim(out.color, target);
        psnr_sum += std::isfinite(p) ? p : 99.0;
        ssim_sum += s;
        std::printf("view %3zu  psnr %6.2f dB  ssim %.4f\n", f, p, s);
    }

    nlohmann::json rec;
    rec["context_views"] = n_context;
    rec["held_out_views"] = targets.size();
    rec["gaussians"] = scene.count();
    rec["encode_ms"] = encode_ms;
    rec["timing_samples"] = timing_samples;
    rec["peak_rss_kb"] = peak_rss_kb();
    rec["mean_psnr"] = psnr_sum / static_cast<double>(targets.size());
    rec["mean_ssim"] = ssim_sum / static_cast<double>(targets.size());
    std::cout << rec.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tsplat: feed-forward 3D gaussian splatting at desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir, dump_config;
    std::size_t steps = 0;
    auto* train_cmd = app.add_subcommand("train", "run the training loop");
    train_cmd->add_option("--config", config_path, "run configuration file");
    train_cmd->add_option("--out", out_dir, "output directory override");
    train_cmd->add_option("--steps", steps, "override training.total_steps");
    train_cmd->add_option("--write-default-config", dump_config,
                          "write the effective config and exit");

    std::string ply_path, ckpt_path, camera_path, out_path;
    DataOverride data;
    std::uint64_t synthetic_seed = 0;
    bool has_synthetic = false;
    std::size_t context = 0;
    auto* render_cmd = app.add_subcommand("render", "render one view from a checkpoint or ply");
    render_cmd->add_option("--ply", ply_path, "gaussian splat ply asset");
    render_cmd->add_option("--checkpoint", ckpt_path, "training checkpoint");
    render_cmd->add_option("--dataset", data.dataset_dir, "posed-image directory for context");
    auto* render_syn = render_cmd->add_option("--synthetic", synthetic_seed,
                                              "use a synthetic scene with this seed");
    render_cmd->add_option("--context", context, "number of context views");
    render_cmd->add_option("--camera", camera_path, "camera spec file")->required();
    render_cmd->add_option("--out", out_path, "output image (ppm)")->required();

    std::string export_ckpt, export_out;
    DataOverride export_data;
    std::uint64_t export_seed = 0;
    std::size_t export_context = 0;
    auto* export_cmd = app.add_subcommand("export-ply", "encode views and write the splat asset");
    export_cmd->add_option("--checkpoint", export_ckpt, "training checkpoint")->required();
    export_cmd->add_option("--dataset", export_data.dataset_dir, "posed-image directory");
    auto* export_syn =
        export_cmd->add_option("--synthetic", export_seed, "synthetic scene seed");
    export_cmd->add_option("--context", export_context, "number of context views");
    export_cmd->add_option("--out", export_out, "output ply path")->required();

    int demo_stage = 3;
    double demo_lambda = 1.0;
    auto* demo_cmd = app.add_subcommand("merge-demo", "print a worked merge/split example table");
    demo_cmd->add_option("--stage", demo_stage, "curriculum stage (0..4)");
    demo_cmd->add_option("--lambda", demo_lambda, "transition coefficient in [0, 1]");

    auto* check_cmd = app.add_subcommand("grad-check", "run the gradient verification suite");

    std::string eval_ckpt;
    DataOverride eval_data;
    std::uint64_t eval_seed = 0;
    std::size_t eval_context = 0;
    int timing_samples = 3;
    auto* eval_cmd = app.add_subcommand("eval", "held-out metrics, budget and timing report");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "training checkpoint")->required();
    eval_cmd->add_option("--dataset", eval_data.dataset_dir, "posed-image directory");
    auto* eval_syn = eval_cmd->add_option("--synthetic", eval_seed, "synthetic scene seed");
    eval_cmd->add_option("--context", eval_context, "number of context views");
    eval_cmd->add_option("--timing-samples", timing_samples,
                         "timed encode repetitions (first extra sample discarded)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(config_path, out_dir, steps, dump_config);
        if (render_cmd->parsed()) {
            if (render_syn->count() > 0) data.synthetic_seed = synthetic_seed;
            (void)has_synthetic;
            return cmd_render(ply_path, ckpt_path, data, context, camera_path, out_path);
        }
        if (export_cmd->parsed()) {
            if (export_syn->count() > 0) export_data.synthetic_seed = export_seed;
            return cmd_export_ply(export_ckpt, export_data, export_context, export_out);
        }
        if (demo_cmd->parsed()) return cmd_merge_demo(demo_stage, demo_lambda);
        if (check_cmd->parsed()) return cmd_grad_check();
        if (eval_cmd->parsed()) {
            if (eval_syn->count() > 0) eval_data.synthetic_seed = eval_seed;
            return cmd_eval(eval_ckpt, eval_data, eval_context, timing_samples);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
