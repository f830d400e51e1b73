#pragma once

// View/subset sampling, the stage schedule, and the end-to-end training
// loop: sample a window, split the context into two anchored subsets, encode
// each subset, decode at the scheduled stage, render the shared targets,
// compose the objective, and take a clipped optimizer step.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsplat/checkpoint.hpp"
#include "tsplat/config.hpp"
#include "tsplat/data.hpp"
#include "tsplat/decoder.hpp"
#include "tsplat/encoder.hpp"
#include "tsplat/losses.hpp"
#include "tsplat/metrics.hpp"
#include "tsplat/optim.hpp"
#include "tsplat/renderer.hpp"

namespace tsplat {

struct SampleSpec {
    std::size_t context_views = 13;
    std::size_t target_views = 12;
    std::size_t window_min = 40;
    std::size_t window_max = 220;

    std::size_t total_sampled() const { return context_views + target_views; }
};

struct ViewSample {
    std::size_t start = 0;
    std::size_t window = 0;
    std::vector<std::size_t> context;  // ascending frame indices
    std::vector<std::size_t> targets;  // ascending frame indices
};

// Random window of length U[window_min, window_max]; context + target views
// sampled uniformly without replacement inside it, targets chosen uniformly
// among the sampled set.
inline ViewSample sample_views(std::size_t sequence_length, const SampleSpec& spec, Rng& rng) {
    const std::size_t total = spec.total_sampled();
    if (sequence_length < spec.window_min || total > spec.window_min)
        throw std::invalid_argument("sample_views: sequence of " +
                                    std::to_string(sequence_length) +
                                    " frames is too short for the sampling window");
    ViewSample out;
    const std::size_t hi = std::min(spec.window_max, sequence_length);
    out.window = spec.window_min + rng.index(hi - spec.window_min + 1);
    out.start = rng.index(sequence_length - out.window + 1);

    // partial Fisher-Yates over the window indices
    std::vector<std::size_t> pool(out.window);
    for (std::size_t i = 0; i < out.window; ++i) pool[i] = out.start + i;
    std::vector<std::size_t> chosen;
    chosen.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        const std::size_t j = i + rng.index(pool.size() - i);
        std::swap(pool[i], pool[j]);
        chosen.push_back(pool[i]);
    }
    std::sort(chosen.begin(), chosen.end());

    std::vector<std::size_t> slots(total);
    for (std::size_t i = 0; i < total; ++i) slots[i] = i;
    for (std::size_t i = 0; i < spec.target_views; ++i) {
        const std::size_t j = i + rng.index(slots.size() - i);
        std::swap(slots[i], slots[j]);
    }
    std::vector<bool> is_target(total, false);
    for (std::size_t i = 0; i < spec.target_views; ++i) is_target[slots[i]] = true;
    for (std::size_t i = 0; i < total; ++i)
        (is_target[i] ? out.targets : out.context).push_back(chosen[i]);
    return out;
}

struct SubsetSplit {
    std::vector<std::size_t> a;  // anchors first, then odd-indexed intermediates
    std::vector<std::size_t> b;  // anchors first, then even-indexed intermediates
};

// Interleaved split with shared anchors: both subsets keep the first and
// last context views; intermediates alternate by their 1-based order.
inline SubsetSplit split_subsets(const std::vector<std::size_t>& ordered_context) {
    if (ordered_context.size() < 3)
        throw std::invalid_argument("split_subsets: need at least 3 context views");
    SubsetSplit split;
    split.a = {ordered_context.front(), ordered_context.back()};
    split.b = {ordered_context.front(), ordered_context.back()};
    for (std::size_t i = 1; i + 1 < ordered_context.size(); ++i)
        (i % 2 == 1 ? split.a : split.b).push_back(ordered_context[i]);
    return split;
}

struct StageSchedule {
    std::vector<double> stage_starts{0, 10000, 20000, 50000};  // first step of stages 0..S
    std::size_t transition_steps = 2000;
};

// Stage per the schedule table; lambda ramps linearly over the first
// transition_steps of each stage and is 1 elsewhere. Stage 0 has lambda = 1
// from the very first step.
inline StagePoint stage_at(std::size_t step, const StageSchedule& schedule) {
    if (schedule.stage_starts.empty() || schedule.stage_starts[0] != 0.0)
        throw std::invalid_argument("stage schedule must start stage 0 at step 0");
    int stage = 0;
    for (std::size_t s = 0; s < schedule.stage_starts.size(); ++s)
        if (static_cast<double>(step) >= schedule.stage_starts[s]) stage = static_cast<int>(s);
    StagePoint point;
    point.stage = stage;
    if (stage == 0 || schedule.transition_steps == 0) {
        point.lambda = 1.0;
    } else {
        const double into = static_cast<double>(step) - schedule.stage_starts[stage];
        point.lambda = std::clamp(into / static_cast<double>(schedule.transition_steps), 0.0, 1.0);
    }
    return point;
}

// ---------------------------------------------------------------------------

struct StepMetrics {
    std::size_t step = 0;
    std::map<std::string, double> terms;
    double total = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    int stage = 0;
    double lambda = 1.0;
    int forward_passes = 0;
    std::optional<double> psnr;
};

class Trainer {
public:
    explicit Trainer(RunConfig config) : cfg_(std::move(config)) {
        cfg_.encoder.validate();
        cfg_.losses.validate();
        Rng init_rng(cfg_.training.seed);
        register_encoder_params(store_, cfg_.encoder, init_rng);
        register_decoder_params(init_rng);
        build_source();
    }

    explicit Trainer(Checkpoint ckpt) : cfg_(ckpt.config), store_(std::move(ckpt.params)) {
        step_ = ckpt.step;
        build_source();
    }

    const RunConfig& config() const { return cfg_; }
    std::size_t current_step() const { return step_; }
    const FrameSource& source() const { return *source_; }
    ParamStore& params() { return store_; }

    StageSchedule schedule() const {
        return StageSchedule{cfg_.training.stage_starts, cfg_.training.transition_steps};
    }

    SampleSpec sample_spec() const {
        SampleSpec spec;
        spec.context_views = cfg_.training.context_views;
        spec.target_views = cfg_.training.target_views;
        spec.window_min = cfg_.training.window_min;
        spec.window_max = cfg_.training.window_max;
        return spec;
    }

    Checkpoint checkpoint() const {
        Checkpoint ckpt;
        ckpt.config = cfg_;
        ckpt.step = step_;
        for (const auto& [name, entry] : store_.entries()) {
            ckpt.params.create(name, entry.value);
            ckpt.params.entry(name).moment1 = entry.moment1;
            ckpt.params.entry(name).moment2 = entry.moment2;
        }
        return ckpt;
    }

    // One optimization step. Deterministic given (seed, step, thread count);
    // the per-step RNG stream depends only on those.
    StepMetrics step() {
        Rng rng = step_rng(step_);
        const ViewSample sample = sample_views(source_->frames(), sample_spec(), rng);
        const StagePoint stage = stage_at(step_, schedule());

        StepMetrics metrics;
        metrics.step = step_;
        metrics.stage = stage.stage;
        metrics.lambda = stage.lambda;

        Graph graph;
        Value total{};
        if (cfg_.training.consistency) {
            const SubsetSplit split = split_subsets(sample.context);
            BranchOutputs a = run_branch(graph, split.a, sample.targets, stage, "a", metrics);
            BranchOutputs b = run_branch(graph, split.b, sample.targets, stage, "b", metrics);
            metrics.forward_passes = 2;

            Value con_alpha{};
            Value con_depth{};
            for (std::size_t t = 0; t < sample.targets.size(); ++t) {
                ConsistencyLoss c = consistency_loss(graph, a.maps[t].accum, a.maps[t].depth,
                                                     b.maps[t].accum, b.maps[t].depth,
                                                     cfg_.losses);
                con_alpha = t == 0 ? c.alpha : add(con_alpha, c.alpha);
                con_depth = t == 0 ? c.depth : add(con_depth, c.depth);
            }
            const double nt = static_cast<double>(sample.targets.size());
            ConsistencyLoss con;
            con.alpha = con_alpha / nt;
            con.depth = con_depth / nt;
            con.total = add(con.alpha * cfg_.losses.lambda_con_alpha,
                            con.depth * cfg_.losses.lambda_con_depth);
            metrics.terms["con_alpha"] = con.alpha.val().item();
            metrics.terms["con_depth"] = con.depth.val().item();
            total = total_objective(a.losses, &b.losses, &con);
        } else {
            BranchOutputs a = run_branch(graph, sample.context, sample.targets, stage, "a", metrics);
            metrics.forward_passes = 1;
            total = total_objective(a.losses, nullptr, nullptr);
        }

        metrics.total = total.val().item();
        if (!std::isfinite(metrics.total)) {
            std::string breakdown;
            for (const auto& [k, v] : metrics.terms) breakdown += " " + k + "=" + std::to_string(v);
            throw std::runtime_error("non-finite loss at step " + std::to_string(step_) + ":" +
                                     breakdown);
        }

        store_.zero_grads();
        graph.backward(total);
        store_.collect_grads(graph);

        OptimizerConfig opt;
        opt.lr = lr_schedule(step_ + 1, cfg_.training.total_steps, cfg_.training.warmup_steps,
                             cfg_.training.lr);
        opt.weight_decay = cfg_.training.weight_decay;
        opt.beta1 = cfg_.training.beta1;
        opt.beta2 = cfg_.training.beta2;
        opt.eps = cfg_.training.adam_eps;
        opt.clip_norm = cfg_.training.clip_norm;
        metrics.lr = opt.lr;
        metrics.grad_norm = optimizer_step(store_, opt, step_ + 1);

        ++step_;
        return metrics;
    }

    // Scene decoded from `n_context` evenly spaced frames at the currently
    // scheduled stage. The graph is forward-only.
    GaussianScene reconstruct(std::size_t n_context, std::optional<std::size_t> exclude_frame,
                              NormalizedScene* normalized_out = nullptr) {
        std::vector<std::size_t> indices = spread_indices(n_context, exclude_frame);
        std::vector<CameraView> views;
        views.reserve(indices.size());
        for (std::size_t idx : indices) views.push_back(source_->view(idx));
        NormalizedScene normalized = canonicalize(views);

        Graph graph;
        GaussianSceneValues scene = decode_latents(graph, normalized, stage_at(step_, schedule()));
        GaussianScene out = materialize(scene);
        store_.clear_bindings();
        if (normalized_out != nullptr) *normalized_out = normalized;
        return out;
    }

    // PSNR of the held-out center frame rendered from evenly spaced context.
    double eval_psnr(std::size_t n_context) {
        const std::size_t held = source_->frames() / 2;
        NormalizedScene normalized;
        GaussianScene scene = reconstruct(n_context, held, &normalized);
        const CameraPose target_pose =
            transform_to_frame(normalized.average_pose, normalized.scale, source_->pose(held));
        RenderOutput out = render(scene, target_pose, source_->intrinsics(), cfg_.renderer);
        return psnr(out.color, source_->view(held).image);
    }

    GaussianSceneValues decode_latents(Graph& graph, const NormalizedScene& normalized,
                                       StagePoint stage) {
        LatentState latents = encode(graph, store_, normalized, cfg_.encoder);
        DecoderParams dec;
        dec.geo_w = store_.use(graph, "dec.geo.w");
        dec.geo_b = store_.use(graph, "dec.geo.b");
        dec.app_w = store_.use(graph, "dec.app.w");
        dec.app_b = store_.use(graph, "dec.app.b");
        CandidateSet candidates =
            decode_candidates(graph, latents.stream_geo, latents.stream_app, dec, cfg_.decoder);
        last_candidates_ = candidates;
        return decode_stage(candidates, stage, cfg_.decoder);
    }

    Rng step_rng(std::size_t step) const {
        return Rng(cfg_.training.seed * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull +
                   static_cast<std::uint64_t>(step));
    }

    // Evenly spread context frame indices, optionally dodging one frame.
    std::vector<std::size_t> context_indices(std::size_t n,
                                             std::optional<std::size_t> exclude) const {
        return spread_indices(n, exclude);
    }

private:
    struct BranchOutputs {
        BranchLosses losses;
        std::vector<RenderMaps> maps;  // one per target view
    };

    void register_decoder_params(Rng& rng) {
        const std::size_t d = cfg_.encoder.token_dim;
        const std::size_t k = cfg_.decoder.candidates_per_token;
        store_.create("dec.geo.w",
                      rng.trunc_normal_tensor({d, k * cfg_.decoder.geo_width()},
                                              cfg_.encoder.init_std));
        store_.create("dec.geo.b", Tensor::zeros({k * cfg_.decoder.geo_width()}));
        store_.create("dec.app.w",
                      rng.trunc_normal_tensor({d, k * cfg_.decoder.sh_width()},
                                              cfg_.encoder.init_std));
        store_.create("dec.app.b", Tensor::zeros({k * cfg_.decoder.sh_width()}));
    }

    void build_source() {
        if (!cfg_.io.dataset_dir.empty()) {
            auto loaded = std::make_unique<LoadedDataset>(
                load_dataset(cfg_.io.dataset_dir, cfg_.training.image_size,
                             cfg_.encoder.patch_size));
            source_ = std::move(loaded);
        } else {
            source_ = make_synthetic_scene(cfg_.training.seed, cfg_.training.synthetic_blobs,
                                           cfg_.training, cfg_.renderer);
        }
    }

    std::vector<std::size_t> spread_indices(std::size_t n,
                                            std::optional<std::size_t> exclude) const {
        const std::size_t frames = source_->frames();
        std::vector<std::size_t> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t idx =
                n == 1 ? 0
                       : static_cast<std::size_t>(std::lround(
                             static_cast<double>(i) * static_cast<double>(frames - 1) /
                             static_cast<double>(n - 1)));
            if (exclude && idx == *exclude) idx = idx + 1 < frames ? idx + 1 : idx - 1;
            out.push_back(idx);
        }
        return out;
    }

    BranchOutputs run_branch(Graph& graph, const std::vector<std::size_t>& context_frames,
                             const std::vector<std::size_t>& target_frames, StagePoint stage,
                             const std::string& tag, StepMetrics& metrics) {
        std::vector<CameraView> views;
        views.reserve(context_frames.size());
        for (std::size_t idx : context_frames) views.push_back(source_->view(idx));
        NormalizedScene normalized = canonicalize(views);

        GaussianSceneValues scene = decode_latents(graph, normalized, stage);

        Tensor bg(Shape{3});
        for (int c = 0; c < 3; ++c) bg[c] = cfg_.renderer.background[c];
        Value background = graph.constant(bg);

        BranchOutputs out;
        Value mse{};
        Value perc{};
        for (std::size_t t = 0; t < target_frames.size(); ++t) {
            const CameraPose pose = transform_to_frame(normalized.average_pose, normalized.scale,
                                                       source_->pose(target_frames[t]));
            RenderMaps maps = render_node(graph, scene, background, pose, source_->intrinsics(),
                                          cfg_.renderer);
            Value target = graph.constant(source_->view(target_frames[t]).image);
            RenderingLoss ren = rendering_loss(graph, maps.color, target, cfg_.losses);
            mse = t == 0 ? ren.mse : add(mse, ren.mse);
            perc = t == 0 ? ren.perc : add(perc, ren.perc);
            out.maps.push_back(maps);
        }
        const double nt = static_cast<double>(target_frames.size());
        RenderingLoss ren;
        ren.mse = mse / nt;
        ren.perc = perc / nt;
        ren.total = add(ren.mse * cfg_.losses.lambda_mse, ren.perc * cfg_.losses.lambda_perc);

        std::vector<FrustumCamera> frustum_cams;
        frustum_cams.reserve(normalized.views.size());
        for (const CameraView& v : normalized.views)
            frustum_cams.push_back({v.pose, v.intrinsics});
        Value frustum = frustum_loss(graph, scene.means, frustum_cams, cfg_.losses.frustum_tau,
                                     cfg_.renderer.z_near);
        DecoderRegs dec = decoder_regularizers(graph, last_candidates_, cfg_.losses);

        out.losses = compose_branch(ren, frustum, dec, cfg_.losses);
        metrics.terms["mse_" + tag] = ren.mse.val().item();
        metrics.terms["perc_" + tag] = ren.perc.val().item();
        metrics.terms["fru_" + tag] = frustum.val().item();
        metrics.terms["dec_" + tag] = dec.total.val().item();
        return out;
    }

    RunConfig cfg_;
    ParamStore store_;
    std::unique_ptr<FrameSource> source_;
    CandidateSet last_candidates_;
    std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    std::size_t steps = 0;
    double final_psnr = 0.0;
};

// Full training loop: metrics as line-delimited JSON records, periodic and
// final checkpoints, held-out PSNR probes.
inline TrainResult train(const RunConfig& config, std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    Trainer trainer(config);
    fs::create_directories(config.io.out_dir);
    const std::string metrics_path = (fs::path(config.io.out_dir) / "metrics.jsonl").string();
    const std::string ckpt_path = (fs::path(config.io.out_dir) / "checkpoint.bin").string();
    std::ofstream metrics_file(metrics_path, std::ios::trunc);
    if (!metrics_file) throw std::runtime_error("cannot open metrics log: " + metrics_path);

    TrainResult result;
    result.metrics_path = metrics_path;
    result.checkpoint_path = ckpt_path;

    const std::size_t total = config.training.total_steps;
    for (std::size_t s = 0; s < total; ++s) {
        StepMetrics m = trainer.step();
        const bool probe =
            config.training.eval_every > 0 &&
            ((m.step + 1) % config.training.eval_every == 0 || m.step + 1 == total || m.step == 0);
        if (probe) m.psnr = trainer.eval_psnr(config.training.context_views);

        nlohmann::json rec;
        rec["step"] = m.step;
        rec["total"] = m.total;
        rec["lr"] = m.lr;
        rec["grad_norm"] = m.grad_norm;
        rec["stage"] = m.stage;
        rec["lambda"] = m.lambda;
        for (const auto& [k, v] : m.terms) rec[k] = v;
        if (m.psnr) rec["psnr"] = std::isfinite(*m.psnr) ? *m.psnr : 999.0;
        metrics_file << rec.dump() << "\n";
        metrics_file.flush();
        if (log != nullptr && (probe || m.step % 50 == 0)) {
            *log << "step " << m.step << " loss " << m.total << " stage " << m.stage;
            if (m.psnr) *log << " psnr " << *m.psnr;
            *log << "\n";
            log->flush();
        }

        if (config.training.checkpoint_every > 0 &&
            (m.step + 1) % config.training.checkpoint_every == 0)
            save_checkpoint(ckpt_path, trainer.checkpoint());
    }
    save_checkpoint(ckpt_path, trainer.checkpoint());

    // a compact held-out dataset for downstream evaluation
    std::vector<std::size_t> dump;
    for (std::size_t i = 0; i < trainer.source().frames(); i += 10) dump.push_back(i);
    save_dataset((fs::path(config.io.out_dir) / "eval_dataset").string(), trainer.source(), dump);

    result.steps = total;
    result.final_psnr = trainer.eval_psnr(config.training.context_views);
    return result;
}

}  // namespace tsplat
