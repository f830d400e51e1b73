#pragma once

// Named parameter storage and the decoupled-weight-decay adaptive-moment
// optimizer used for training, plus the warmup/cosine learning-rate schedule.

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsplat/autodiff.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

struct ParamEntry {
    Tensor value;
    Tensor grad;
    Tensor moment1;
    Tensor moment2;
};

class ParamStore {
public:
    Tensor& create(const std::string& name, Tensor init) {
        auto [it, inserted] = params_.emplace(name, ParamEntry{});
        if (!inserted) throw std::invalid_argument("parameter already registered: " + name);
        ParamEntry& e = it->second;
        e.grad = Tensor::zeros(init.shape());
        e.moment1 = Tensor::zeros(init.shape());
        e.moment2 = Tensor::zeros(init.shape());
        e.value = std::move(init);
        return e.value;
    }

    bool has(const std::string& name) const { return params_.count(name) > 0; }

    ParamEntry& entry(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return it->second;
    }

    const ParamEntry& entry(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return it->second;
    }

    const Tensor& value(const std::string& name) const { return entry(name).value; }

    // Wire a parameter into a graph as a differentiable leaf. The binding is
    // remembered so collect_grads() can pull the leaf gradients back out.
    Value use(Graph& graph, const std::string& name) {
        Value v = graph.leaf(entry(name).value);
        bindings_.emplace_back(name, v);
        return v;
    }

    void collect_grads(Graph& graph) {
        for (auto& [name, v] : bindings_) {
            if (v.graph != &graph) continue;
            const Tensor& g = graph.grad(v);
            Tensor& acc = entry(name).grad;
            for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
        }
        std::erase_if(bindings_, [&](const auto& b) { return b.second.graph == &graph; });
    }

    void zero_grads() {
        for (auto& [name, e] : params_)
            std::fill(e.grad.vec().begin(), e.grad.vec().end(), 0.0);
    }

    // Forget bindings without collecting (e.g. throwaway evaluation graphs).
    void clear_bindings() { bindings_.clear(); }

    // Ordered (lexicographic) iteration keeps every reduction deterministic.
    std::map<std::string, ParamEntry>& entries() { return params_; }
    const std::map<std::string, ParamEntry>& entries() const { return params_; }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& [name, e] : params_) n += e.value.numel();
        return n;
    }

private:
    std::map<std::string, ParamEntry> params_;
    std::vector<std::pair<std::string, Value>> bindings_;
};

struct OptimizerConfig {
    double lr = 5e-4;
    double weight_decay = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

// Global-norm clipping happens before the moment update; weight decay is
// decoupled (applied to the parameter directly, never through the moments).
// `step` is 1-based for bias correction.
inline double optimizer_step(ParamStore& store, const OptimizerConfig& cfg, std::size_t step) {
    if (step == 0) throw std::invalid_argument("optimizer_step: step must be >= 1");
    double sq_norm = 0.0;
    for (const auto& [name, e] : store.entries()) {
        for (std::size_t i = 0; i < e.grad.numel(); ++i) {
            const double g = e.grad[i];
            if (!std::isfinite(g))
                throw std::runtime_error("non-finite gradient in parameter: " + name);
            sq_norm += g * g;
        }
    }
    const double norm = std::sqrt(sq_norm);
    double scale = 1.0;
    if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) scale = cfg.clip_norm / norm;

    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (auto& [name, e] : store.entries()) {
        for (std::size_t i = 0; i < e.value.numel(); ++i) {
            const double g = e.grad[i] * scale;
            e.moment1[i] = cfg.beta1 * e.moment1[i] + (1.0 - cfg.beta1) * g;
            e.moment2[i] = cfg.beta2 * e.moment2[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = e.moment1[i] / bc1;
            const double vhat = e.moment2[i] / bc2;
            e.value[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                    cfg.weight_decay * e.value[i]);
        }
    }
    return norm;
}

// Linear warmup to base_lr over warmup_steps, then cosine decay reaching
// exactly zero at total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                          double base_lr) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return 0.0;
    const double span = static_cast<double>(total_steps - warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) / span;
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace tsplat
