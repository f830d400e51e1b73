#pragma once

// Central finite-difference verification of reverse-mode gradients. The
// numeric side never touches the analytic backward path, so it serves as an
// independent oracle for every differentiable operation in the project.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsplat/autodiff.hpp"
#include "tsplat/optim.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

// Builds a scalar-valued graph from the given differentiable inputs.
using GraphFn = std::function<Value(Graph&, const std::vector<Value>&)>;

// Variant over a parameter store: the scalar function reads whatever
// parameters it needs through store.use().
using StoreGraphFn = std::function<Value(Graph&, ParamStore&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_coord = 0;
};

inline GradCheckResult grad_check_full(const GraphFn& fn, const std::vector<Tensor>& point,
                                       double eps = 1e-6) {
    for (const Tensor& t : point)
        if (!t.all_finite()) throw std::invalid_argument("grad_check: non-finite input point");

    Graph graph;
    std::vector<Value> inputs;
    inputs.reserve(point.size());
    for (const Tensor& t : point) inputs.push_back(graph.leaf(t));
    Value out = fn(graph, inputs);
    if (out.val().numel() != 1)
        throw std::invalid_argument("grad_check: fn must produce a scalar, got shape " +
                                    shape_str(out.val().shape()));
    if (!out.val().all_finite()) throw std::runtime_error("grad_check: non-finite forward value");
    graph.backward(out);

    std::vector<Tensor> analytic;
    analytic.reserve(inputs.size());
    for (Value v : inputs) {
        const Tensor& g = graph.grad(v);
        if (!g.all_finite()) throw std::runtime_error("grad_check: non-finite analytic gradient");
        analytic.push_back(g);
    }

    auto eval_at = [&](const std::vector<Tensor>& p) {
        Graph g2;
        std::vector<Value> ins;
        ins.reserve(p.size());
        for (const Tensor& t : p) ins.push_back(g2.constant(t));
        const double v = fn(g2, ins).val().item();
        if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite perturbed value");
        return v;
    };

    GradCheckResult result;
    std::vector<Tensor> probe = point;
    for (std::size_t t = 0; t < point.size(); ++t) {
        for (std::size_t i = 0; i < point[t].numel(); ++i) {
            const double saved = probe[t][i];
            probe[t][i] = saved + eps;
            const double fp = eval_at(probe);
            probe[t][i] = saved - eps;
            const double fm = eval_at(probe);
            probe[t][i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[t][i];
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_input = t;
                result.worst_coord = i;
            }
        }
    }
    return result;
}

inline double grad_check(const GraphFn& fn, const std::vector<Tensor>& point, double eps = 1e-6) {
    return grad_check_full(fn, point, eps).max_rel_error;
}

// Checks the gradient of fn w.r.t. every coordinate of every parameter in
// the store. Returns the worst relative error and the parameter it hit.
struct StoreGradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_coord = 0;
};

inline StoreGradCheckResult grad_check_store(const StoreGraphFn& fn, ParamStore& store,
                                             double eps = 1e-6) {
    store.zero_grads();
    Graph graph;
    Value out = fn(graph, store);
    if (out.val().numel() != 1)
        throw std::invalid_argument("grad_check_store: fn must produce a scalar");
    graph.backward(out);
    store.collect_grads(graph);

    auto eval = [&] {
        Graph g2;
        const double v = fn(g2, store).val().item();
        store.clear_bindings();
        if (!std::isfinite(v))
            throw std::runtime_error("grad_check_store: non-finite perturbed value");
        return v;
    };

    StoreGradCheckResult result;
    for (auto& [name, entry] : store.entries()) {
        for (std::size_t i = 0; i < entry.value.numel(); ++i) {
            const double saved = entry.value[i];
            entry.value[i] = saved + eps;
            const double fp = eval();
            entry.value[i] = saved - eps;
            const double fm = eval();
            entry.value[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = entry.grad[i];
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_param = name;
                result.worst_coord = i;
            }
        }
    }
    store.zero_grads();
    return result;
}

}  // namespace tsplat
