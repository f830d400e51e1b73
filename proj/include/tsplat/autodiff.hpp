#pragma once

// Reverse-mode automatic differentiation over dense fp64 arrays.
//
// A Graph is a tape: every operation appends one node holding the forward
// value and a closure that scatters the node's gradient into its parents.
// Creation order is a topological order, so the backward pass is a single
// reverse sweep that visits each node exactly once. Gradient accumulation is
// additive: a node consumed k times receives the sum of k contributions.
// Construction and backward are single-threaded; matrix products go through
// single-threaded BLAS, so a fixed construction order gives bitwise
// deterministic gradients.

#include <algorithm>
#include <array>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <cblas.h>

#include "tsplat/tensor.hpp"

namespace tsplat {

namespace detail {

inline void force_single_thread_blas() {
    static const bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t n = std::max(a.size(), b.size());
    Shape out(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        const std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("shape mismatch: cannot broadcast " + shape_str(a) +
                                        " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Per-output-axis element strides of `in` viewed under `out`; 0 on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t s = 1;
    for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t axis = out.size() - 1 - i;
        const std::size_t din = in[in.size() - 1 - i];
        strides[axis] = (din == 1) ? 0 : s;
        s *= din;
    }
    return strides;
}

template <class F>
void for_each_broadcast_pair(const Tensor& a, const Tensor& b, const Shape& out, F&& f) {
    const std::size_t n = shape_numel(out);
    const std::size_t nd = out.size();
    const auto sa = broadcast_strides(a.shape(), out);
    const auto sb = broadcast_strides(b.shape(), out);
    std::vector<std::size_t> idx(nd, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        f(flat, ia, ib);
        for (std::size_t k = nd; k-- > 0;) {
            ++idx[k];
            ia += sa[k];
            ib += sb[k];
            if (idx[k] < out[k]) break;
            idx[k] = 0;
            ia -= sa[k] * out[k];
            ib -= sb[k] * out[k];
        }
    }
}

// Sum `g` down to `target` (inverse of broadcasting).
inline Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor out(target, 0.0);
    const std::size_t nd = g.ndim();
    const auto st = broadcast_strides(target, g.shape());
    std::vector<std::size_t> idx(nd, 0);
    std::size_t it = 0;
    for (std::size_t flat = 0; flat < g.numel(); ++flat) {
        out[it] += g[flat];
        for (std::size_t k = nd; k-- > 0;) {
            ++idx[k];
            it += st[k];
            if (idx[k] < g.shape()[k]) break;
            idx[k] = 0;
            it -= st[k] * g.shape()[k];
        }
    }
    return out;
}

inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c, double beta) {
    force_single_thread_blas();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, a, static_cast<int>(trans_a ? m : k), b,
                static_cast<int>(trans_b ? k : n), beta, c, static_cast<int>(n));
}

}  // namespace detail

class Graph;

struct Value {
    Graph* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    const Tensor& val() const;
    const Shape& shape() const;
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

    Value constant(Tensor t) { return make(std::move(t), false, nullptr); }
    Value leaf(Tensor t) { return make(std::move(t), true, nullptr); }
    Value scalar(double v) { return constant(Tensor::scalar(v)); }

    Value make(Tensor value, bool requires_grad, BackwardFn backward) {
        Node node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
        return Value{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(Value v) const { return nodes_.at(v.id).value; }

    bool requires_grad(Value v) const { return nodes_.at(v.id).requires_grad; }

    // Gradient of `v` after backward(); zeros if nothing reached it.
    const Tensor& grad(Value v) {
        Node& node = nodes_.at(v.id);
        if (!node.grad_set) {
            node.grad = Tensor::zeros(node.value.shape());
            node.grad_set = true;
        }
        return node.grad;
    }

    void accumulate(Value v, const Tensor& g) {
        Node& node = nodes_.at(v.id);
        if (!node.requires_grad) return;
        if (g.shape() != node.value.shape())
            throw std::logic_error("gradient shape " + shape_str(g.shape()) +
                                   " does not match value shape " + shape_str(node.value.shape()));
        if (!node.grad_set) {
            node.grad = g;
            node.grad_set = true;
            return;
        }
        for (std::size_t i = 0; i < g.numel(); ++i) node.grad[i] += g[i];
    }

    void backward(Value root) {
        if (value(root).numel() != 1)
            throw std::logic_error("backward() root must be scalar, got shape " +
                                   shape_str(value(root).shape()));
        backward(root, Tensor::full(value(root).shape(), 1.0));
    }

    void backward(Value root, Tensor seed) {
        accumulate(root, seed);
        for (int id = root.id; id >= 0; --id) {
            Node& node = nodes_[id];
            if (node.grad_set && node.backward) node.backward(*this, node.grad);
        }
    }

    std::size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool grad_set = false;
        bool requires_grad = false;
        BackwardFn backward;
    };

    std::deque<Node> nodes_;
};

inline const Tensor& Value::val() const { return graph->value(*this); }
inline const Shape& Value::shape() const { return graph->value(*this).shape(); }

namespace detail {

inline void check_same_graph(Value a, Value b) {
    if (a.graph != b.graph) throw std::logic_error("values belong to different graphs");
}

template <class FwdF, class BwdA, class BwdB>
Value binary_elementwise(Value a, Value b, FwdF f, BwdA dfa, BwdB dfb) {
    check_same_graph(a, b);
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    const Shape out_shape = broadcast_shape(ta.shape(), tb.shape());
    Tensor out(out_shape);
    for_each_broadcast_pair(ta, tb, out_shape,
                            [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                out[o] = f(ta[ia], tb[ib]);
                            });
    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a, b, dfa, dfb, out_shape](Graph& gr, const Tensor& og) {
            const Tensor& ta = a.val();
            const Tensor& tb = b.val();
            if (gr.requires_grad(a)) {
                Tensor ga(out_shape);
                for_each_broadcast_pair(ta, tb, out_shape,
                                        [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                            ga[o] = og[o] * dfa(ta[ia], tb[ib]);
                                        });
                gr.accumulate(a, reduce_to_shape(ga, ta.shape()));
            }
            if (gr.requires_grad(b)) {
                Tensor gb(out_shape);
                for_each_broadcast_pair(ta, tb, out_shape,
                                        [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                            gb[o] = og[o] * dfb(ta[ia], tb[ib]);
                                        });
                gr.accumulate(b, reduce_to_shape(gb, tb.shape()));
            }
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

// dfo receives (input, output) so ops like exp can reuse the forward value.
template <class FwdF, class BwdF>
Value unary_elementwise(Value a, FwdF f, BwdF dfo) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < ta.numel(); ++i) out[i] = f(ta[i]);
    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        Tensor saved = out;
        bw = [a, dfo, saved = std::move(saved)](Graph& gr, const Tensor& og) {
            const Tensor& ta = a.val();
            Tensor ga(ta.shape());
            for (std::size_t i = 0; i < ta.numel(); ++i) ga[i] = og[i] * dfo(ta[i], saved[i]);
            gr.accumulate(a, std::move(ga));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic

inline Value add(Value a, Value b) {
    return detail::binary_elementwise(
        a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Value sub(Value a, Value b) {
    return detail::binary_elementwise(
        a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Value mul(Value a, Value b) {
    return detail::binary_elementwise(
        a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Value div(Value a, Value b) {
    return detail::binary_elementwise(
        a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }
inline Value operator/(Value a, Value b) { return div(a, b); }
inline Value operator+(Value a, double c) { return add(a, a.graph->scalar(c)); }
inline Value operator-(Value a, double c) { return sub(a, a.graph->scalar(c)); }
inline Value operator*(Value a, double c) { return mul(a, a.graph->scalar(c)); }
inline Value operator/(Value a, double c) { return div(a, a.graph->scalar(c)); }
inline Value operator+(double c, Value a) { return add(a.graph->scalar(c), a); }
inline Value operator-(double c, Value a) { return sub(a.graph->scalar(c), a); }
inline Value operator*(double c, Value a) { return mul(a.graph->scalar(c), a); }
inline Value operator/(double c, Value a) { return div(a.graph->scalar(c), a); }
inline Value operator-(Value a) { return mul(a, a.graph->scalar(-1.0)); }

// ---------------------------------------------------------------------------
// Elementwise functions

inline Value exp(Value a) {
    return detail::unary_elementwise(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Value log(Value a) {
    return detail::unary_elementwise(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Value sigmoid(Value a) {
    return detail::unary_elementwise(
        a, [](double x) { return detail::stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Value softplus(Value a) {
    return detail::unary_elementwise(
        a, [](double x) { return detail::stable_softplus(x); },
        [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Value relu(Value a) {
    return detail::unary_elementwise(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Value sqrt(Value a) {
    return detail::unary_elementwise(
        a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Value square(Value a) {
    return detail::unary_elementwise(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Value abs(Value a) {
    return detail::unary_elementwise(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Value max_with_constant(Value a, double c) {
    return detail::unary_elementwise(
        a, [c](double x) { return x > c ? x : c; },
        [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

inline Value min_with_constant(Value a, double c) {
    return detail::unary_elementwise(
        a, [c](double x) { return x < c ? x : c; },
        [c](double x, double) { return x < c ? 1.0 : 0.0; });
}

inline Value clamp(Value a, double lo, double hi) {
    return min_with_constant(max_with_constant(a, lo), hi);
}

// Smooth two-sided clamp: softplus-blended max against `lo` then min against
// `hi`. beta controls sharpness; differentiable everywhere.
inline Value clamp_soft(Value a, double lo, double hi, double beta = 1.0) {
    if (!(lo < hi)) throw std::invalid_argument("clamp_soft requires lo < hi");
    auto smoothmax = [beta](double x, double c) {
        return c + detail::stable_softplus(beta * (x - c)) / beta;
    };
    return detail::unary_elementwise(
        a,
        [=](double x) {
            const double m = smoothmax(x, lo);
            return hi - detail::stable_softplus(beta * (hi - m)) / beta;
        },
        [=](double x, double) {
            const double m = smoothmax(x, lo);
            return detail::stable_sigmoid(beta * (hi - m)) * detail::stable_sigmoid(beta * (x - lo));
        });
}

inline Value maximum(Value a, Value b) {
    return detail::binary_elementwise(
        a, b, [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

inline Value minimum(Value a, Value b) {
    return detail::binary_elementwise(
        a, b, [](double x, double y) { return x <= y ? x : y; },
        [](double x, double y) { return x <= y ? 1.0 : 0.0; },
        [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

inline Value stop_gradient(Value a) {
    return a.graph->make(a.val(), false, nullptr);
}

// Sigmoid-weighted linear unit; the usual smooth gelu stand-in.
inline Value gelu(Value a) { return mul(a, sigmoid(a * 1.702)); }

// ---------------------------------------------------------------------------
// Shape manipulation

inline Value reshape(Value a, Shape shape) {
    Graph& g = *a.graph;
    Tensor out = a.val().reshaped(shape);
    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a](Graph& gr, const Tensor& og) {
            gr.accumulate(a, og.reshaped(a.val().shape()));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

inline Value permute(Value a, std::vector<std::size_t> perm) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    const std::size_t nd = ta.ndim();
    if (perm.size() != nd) throw std::invalid_argument("permute: rank mismatch");
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = ta.dim(perm[i]);

    auto apply = [nd](const Tensor& src, const std::vector<std::size_t>& p, const Shape& oshape) {
        Tensor dst(oshape);
        std::vector<std::size_t> in_strides(nd, 1);
        for (std::size_t i = nd - 1; i-- > 0;)
            in_strides[i] = in_strides[i + 1] * src.dim(i + 1);
        std::vector<std::size_t> strides(nd);
        for (std::size_t i = 0; i < nd; ++i) strides[i] = in_strides[p[i]];
        std::vector<std::size_t> idx(nd, 0);
        std::size_t is = 0;
        for (std::size_t flat = 0; flat < dst.numel(); ++flat) {
            dst[flat] = src[is];
            for (std::size_t k = nd; k-- > 0;) {
                ++idx[k];
                is += strides[k];
                if (idx[k] < oshape[k]) break;
                idx[k] = 0;
                is -= strides[k] * oshape[k];
            }
        }
        return dst;
    };

    Tensor out = nd == 0 ? ta : apply(ta, perm, out_shape);
    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        std::vector<std::size_t> inv(nd);
        for (std::size_t i = 0; i < nd; ++i) inv[perm[i]] = i;
        bw = [a, inv, apply](Graph& gr, const Tensor& og) {
            gr.accumulate(a, apply(og, inv, a.val().shape()));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

inline Value broadcast_to(Value a, Shape shape) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    const Shape check = detail::broadcast_shape(ta.shape(), shape);
    if (check != shape)
        throw std::invalid_argument("cannot broadcast " + shape_str(ta.shape()) + " to " +
                                    shape_str(shape));
    Tensor out(shape);
    detail::for_each_broadcast_pair(ta, Tensor::scalar(0.0), shape,
                                    [&](std::size_t o, std::size_t ia, std::size_t) {
                                        out[o] = ta[ia];
                                    });
    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a](Graph& gr, const Tensor& og) {
            gr.accumulate(a, detail::reduce_to_shape(og, a.val().shape()));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

inline Value slice(Value a, std::size_t axis, std::size_t start, std::size_t len) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    if (axis >= ta.ndim()) throw std::invalid_argument("slice: axis out of range");
    if (start + len > ta.dim(axis)) throw std::invalid_argument("slice: range out of bounds");
    Shape out_shape = ta.shape();
    out_shape[axis] = len;

    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ta.ndim(); ++i) inner *= ta.dim(i);
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ta.dim(i);
    const std::size_t in_axis = ta.dim(axis);

    Tensor out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j)
            std::copy_n(ta.data() + (o * in_axis + start + j) * inner, inner,
                        out.data() + (o * len + j) * inner);

    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a, axis, start, len, inner, outer, in_axis](Graph& gr, const Tensor& og) {
            Tensor ga = Tensor::zeros(a.val().shape());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < len; ++j) {
                    const double* src = og.data() + (o * len + j) * inner;
                    double* dst = ga.data() + (o * in_axis + start + j) * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
            gr.accumulate(a, std::move(ga));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

inline Value concat(const std::vector<Value>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Graph& g = *parts[0].graph;
    const std::size_t nd = parts[0].val().ndim();
    if (axis >= nd) throw std::invalid_argument("concat: axis out of range");
    std::size_t axis_total = 0;
    for (const Value& p : parts) {
        detail::check_same_graph(parts[0], p);
        if (p.val().ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t i = 0; i < nd; ++i)
            if (i != axis && p.val().dim(i) != parts[0].val().dim(i))
                throw std::invalid_argument("concat: shape mismatch between " +
                                            shape_str(parts[0].val().shape()) + " and " +
                                            shape_str(p.val().shape()));
        axis_total += p.val().dim(axis);
    }
    Shape out_shape = parts[0].val().shape();
    out_shape[axis] = axis_total;

    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < nd; ++i) inner *= out_shape[i];
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];

    Tensor out(out_shape);
    std::size_t offset = 0;
    for (const Value& p : parts) {
        const Tensor& tp = p.val();
        const std::size_t plen = tp.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(tp.data() + o * plen * inner, plen * inner,
                        out.data() + (o * axis_total + offset) * inner);
        offset += plen;
    }

    bool rg = false;
    for (const Value& p : parts) rg = rg || g.requires_grad(p);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        std::vector<Value> ps = parts;
        bw = [ps, axis_total, inner, outer](Graph& gr, const Tensor& og) {
            std::size_t offset = 0;
            for (const Value& p : ps) {
                const std::size_t len = p.val().numel() / (outer * inner);
                if (gr.requires_grad(p)) {
                    Tensor gp(p.val().shape());
                    for (std::size_t o = 0; o < outer; ++o)
                        std::copy_n(og.data() + (o * axis_total + offset) * inner, len * inner,
                                    gp.data() + o * len * inner);
                    gr.accumulate(p, std::move(gp));
                }
                offset += len;
            }
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

// ---------------------------------------------------------------------------
// Reductions

inline Value sum(Value a) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    double total = 0.0;
    for (std::size_t i = 0; i < ta.numel(); ++i) total += ta[i];
    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a](Graph& gr, const Tensor& og) {
            gr.accumulate(a, Tensor::full(a.val().shape(), og[0]));
        };
    }
    return g.make(Tensor::scalar(total), rg, std::move(bw));
}

inline Value sum(Value a, std::size_t axis, bool keepdims = false) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    if (axis >= ta.ndim()) throw std::invalid_argument("sum: axis out of range");
    const std::size_t n_axis = ta.dim(axis);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ta.ndim(); ++i) inner *= ta.dim(i);
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ta.dim(i);

    Shape out_shape;
    for (std::size_t i = 0; i < ta.ndim(); ++i) {
        if (i == axis) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(ta.dim(i));
        }
    }
    Tensor out(out_shape, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n_axis; ++j) {
            const double* src = ta.data() + (o * n_axis + j) * inner;
            double* dst = out.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }

    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a, n_axis, inner, outer](Graph& gr, const Tensor& og) {
            Tensor ga(a.val().shape());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < n_axis; ++j)
                    std::copy_n(og.data() + o * inner, inner,
                                ga.data() + (o * n_axis + j) * inner);
            gr.accumulate(a, std::move(ga));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

inline Value mean(Value a) { return sum(a) / static_cast<double>(a.val().numel()); }

inline Value mean(Value a, std::size_t axis, bool keepdims = false) {
    return sum(a, axis, keepdims) / static_cast<double>(a.val().dim(axis));
}

// ---------------------------------------------------------------------------
// Matrix product: 2-D [m,k]x[k,n], or batched 3-D with a broadcastable batch
// dimension on either side. Backed by (single-threaded) BLAS.

inline Value matmul(Value a, Value b) {
    detail::check_same_graph(a, b);
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    if (ta.ndim() < 2 || ta.ndim() > 3 || tb.ndim() < 2 || tb.ndim() > 3)
        throw std::invalid_argument("matmul: operands must be 2-D or 3-D, got " +
                                    shape_str(ta.shape()) + " and " + shape_str(tb.shape()));
    const std::size_t batch_a = ta.ndim() == 3 ? ta.dim(0) : 1;
    const std::size_t batch_b = tb.ndim() == 3 ? tb.dim(0) : 1;
    if (batch_a != batch_b && batch_a != 1 && batch_b != 1)
        throw std::invalid_argument("matmul: batch mismatch between " + shape_str(ta.shape()) +
                                    " and " + shape_str(tb.shape()));
    const std::size_t batch = std::max(batch_a, batch_b);
    const std::size_t m = ta.dim(ta.ndim() - 2);
    const std::size_t k = ta.dim(ta.ndim() - 1);
    const std::size_t kb = tb.dim(tb.ndim() - 2);
    const std::size_t n = tb.dim(tb.ndim() - 1);
    if (k != kb)
        throw std::invalid_argument("matmul: inner dimension mismatch between " +
                                    shape_str(ta.shape()) + " and " + shape_str(tb.shape()));

    const bool batched_out = ta.ndim() == 3 || tb.ndim() == 3;
    Shape out_shape = batched_out ? Shape{batch, m, n} : Shape{m, n};
    Tensor out(out_shape);
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* pa = ta.data() + (batch_a == 1 ? 0 : bi) * m * k;
        const double* pb = tb.data() + (batch_b == 1 ? 0 : bi) * k * n;
        detail::gemm(false, false, m, n, k, pa, pb, out.data() + bi * m * n, 0.0);
    }

    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a, b, batch, batch_a, batch_b, m, n, k](Graph& gr, const Tensor& og) {
            const Tensor& ta = a.val();
            const Tensor& tb = b.val();
            if (gr.requires_grad(a)) {
                Tensor ga = Tensor::zeros(ta.shape());
                for (std::size_t bi = 0; bi < batch; ++bi) {
                    const double* pg = og.data() + bi * m * n;
                    const double* pb = tb.data() + (batch_b == 1 ? 0 : bi) * k * n;
                    double* pa = ga.data() + (batch_a == 1 ? 0 : bi) * m * k;
                    // dA = dC * B^T; accumulate when A is broadcast over batch
                    detail::gemm(false, true, m, k, n, pg, pb, pa,
                                 (batch_a == 1 && bi > 0) ? 1.0 : 0.0);
                }
                gr.accumulate(a, std::move(ga));
            }
            if (gr.requires_grad(b)) {
                Tensor gb = Tensor::zeros(tb.shape());
                for (std::size_t bi = 0; bi < batch; ++bi) {
                    const double* pg = og.data() + bi * m * n;
                    const double* pa = ta.data() + (batch_a == 1 ? 0 : bi) * m * k;
                    double* pb = gb.data() + (batch_b == 1 ? 0 : bi) * k * n;
                    // dB = A^T * dC
                    detail::gemm(true, false, k, n, m, pa, pg, pb,
                                 (batch_b == 1 && bi > 0) ? 1.0 : 0.0);
                }
                gr.accumulate(b, std::move(gb));
            }
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

// ---------------------------------------------------------------------------
// Normalizations and softmax

inline Value softmax(Value a, std::size_t axis, double temperature = 1.0) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    if (axis >= ta.ndim()) throw std::invalid_argument("softmax: axis out of range");
    if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
    const std::size_t n_axis = ta.dim(axis);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ta.ndim(); ++i) inner *= ta.dim(i);
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ta.dim(i);

    Tensor out(ta.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n_axis * inner + i;
            double hi = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n_axis; ++j) hi = std::max(hi, ta[base + j * inner]);
            double denom = 0.0;
            for (std::size_t j = 0; j < n_axis; ++j) {
                const double e = std::exp((ta[base + j * inner] - hi) / temperature);
                out[base + j * inner] = e;
                denom += e;
            }
            for (std::size_t j = 0; j < n_axis; ++j) out[base + j * inner] /= denom;
        }

    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        Tensor saved = out;
        bw = [a, n_axis, inner, outer, temperature, saved = std::move(saved)](Graph& gr,
                                                                              const Tensor& og) {
            Tensor ga(a.val().shape());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * n_axis * inner + i;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n_axis; ++j)
                        dot += og[base + j * inner] * saved[base + j * inner];
                    for (std::size_t j = 0; j < n_axis; ++j) {
                        const std::size_t idx = base + j * inner;
                        ga[idx] = saved[idx] * (og[idx] - dot) / temperature;
                    }
                }
            gr.accumulate(a, std::move(ga));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

inline Value layernorm(Value a, std::size_t axis, double eps = 1e-6) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    if (axis >= ta.ndim()) throw std::invalid_argument("layernorm: axis out of range");
    const std::size_t n_axis = ta.dim(axis);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ta.ndim(); ++i) inner *= ta.dim(i);
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ta.dim(i);

    Tensor out(ta.shape());
    Tensor inv_std(Shape{outer, inner});
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n_axis * inner + i;
            double mu = 0.0;
            for (std::size_t j = 0; j < n_axis; ++j) mu += ta[base + j * inner];
            mu /= static_cast<double>(n_axis);
            double var = 0.0;
            for (std::size_t j = 0; j < n_axis; ++j) {
                const double d = ta[base + j * inner] - mu;
                var += d * d;
            }
            var /= static_cast<double>(n_axis);
            const double s = 1.0 / std::sqrt(var + eps);
            inv_std[o * inner + i] = s;
            for (std::size_t j = 0; j < n_axis; ++j)
                out[base + j * inner] = (ta[base + j * inner] - mu) * s;
        }

    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        Tensor saved_y = out;
        bw = [a, n_axis, inner, outer, saved_y = std::move(saved_y),
              inv_std = std::move(inv_std)](Graph& gr, const Tensor& og) {
            Tensor ga(a.val().shape());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * n_axis * inner + i;
                    double mean_g = 0.0, mean_gy = 0.0;
                    for (std::size_t j = 0; j < n_axis; ++j) {
                        const std::size_t idx = base + j * inner;
                        mean_g += og[idx];
                        mean_gy += og[idx] * saved_y[idx];
                    }
                    mean_g /= static_cast<double>(n_axis);
                    mean_gy /= static_cast<double>(n_axis);
                    const double s = inv_std[o * inner + i];
                    for (std::size_t j = 0; j < n_axis; ++j) {
                        const std::size_t idx = base + j * inner;
                        ga[idx] = (og[idx] - mean_g - saved_y[idx] * mean_gy) * s;
                    }
                }
            gr.accumulate(a, std::move(ga));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

inline Value normalize_l2(Value a, std::size_t axis, double eps = 1e-12) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    if (axis >= ta.ndim()) throw std::invalid_argument("normalize_l2: axis out of range");
    const std::size_t n_axis = ta.dim(axis);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ta.ndim(); ++i) inner *= ta.dim(i);
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ta.dim(i);

    Tensor out(ta.shape());
    Tensor norms(Shape{outer, inner});
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n_axis * inner + i;
            double sq = 0.0;
            for (std::size_t j = 0; j < n_axis; ++j) {
                const double v = ta[base + j * inner];
                sq += v * v;
            }
            const double norm = std::max(std::sqrt(sq), eps);
            norms[o * inner + i] = norm;
            for (std::size_t j = 0; j < n_axis; ++j)
                out[base + j * inner] = ta[base + j * inner] / norm;
        }

    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        Tensor saved_y = out;
        bw = [a, n_axis, inner, outer, saved_y = std::move(saved_y),
              norms = std::move(norms)](Graph& gr, const Tensor& og) {
            Tensor ga(a.val().shape());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * n_axis * inner + i;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n_axis; ++j) {
                        const std::size_t idx = base + j * inner;
                        dot += og[idx] * saved_y[idx];
                    }
                    const double norm = norms[o * inner + i];
                    for (std::size_t j = 0; j < n_axis; ++j) {
                        const std::size_t idx = base + j * inner;
                        ga[idx] = (og[idx] - saved_y[idx] * dot) / norm;
                    }
                }
            gr.accumulate(a, std::move(ga));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

// ---------------------------------------------------------------------------
// Cross product over a trailing axis of size 3.

inline Value cross3(Value a, Value b) {
    detail::check_same_graph(a, b);
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    if (!ta.same_shape(tb) || ta.ndim() == 0 || ta.dim(ta.ndim() - 1) != 3)
        throw std::invalid_argument("cross3: operands must share a shape ending in 3, got " +
                                    shape_str(ta.shape()) + " and " + shape_str(tb.shape()));
    const std::size_t rows = ta.numel() / 3;
    auto cross_into = [rows](const Tensor& x, const Tensor& y, Tensor& out) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* u = x.data() + 3 * r;
            const double* v = y.data() + 3 * r;
            double* w = out.data() + 3 * r;
            w[0] = u[1] * v[2] - u[2] * v[1];
            w[1] = u[2] * v[0] - u[0] * v[2];
            w[2] = u[0] * v[1] - u[1] * v[0];
        }
    };
    Tensor out(ta.shape());
    cross_into(ta, tb, out);

    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a, b, cross_into](Graph& gr, const Tensor& og) {
            // d(a x b): da += b x g, db += g x a
            if (gr.requires_grad(a)) {
                Tensor ga(a.val().shape());
                cross_into(b.val(), og, ga);
                gr.accumulate(a, std::move(ga));
            }
            if (gr.requires_grad(b)) {
                Tensor gb(b.val().shape());
                cross_into(og, a.val(), gb);
                gr.accumulate(b, std::move(gb));
            }
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

// ---------------------------------------------------------------------------
// Small image ops on [H, W, C] maps (used by the perceptual proxy loss).

namespace detail {

// Depthwise 3x3 correlation with replicate (edge-clamped) padding, so a
// constant image filters to exactly zero under zero-sum kernels.
inline Value conv3x3_depthwise(Value a, const std::array<double, 9>& kernel) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    if (ta.ndim() != 3) throw std::invalid_argument("conv3x3: input must be [H, W, C]");
    const std::size_t h = ta.dim(0), w = ta.dim(1), c = ta.dim(2);

    auto clamp_idx = [](long v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1));
    };

    Tensor out(ta.shape());
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const std::size_t yy = clamp_idx(static_cast<long>(y) + dy, h);
                        const std::size_t xx = clamp_idx(static_cast<long>(x) + dx, w);
                        acc += kernel[(dy + 1) * 3 + dx + 1] * ta[(yy * w + xx) * c + ch];
                    }
                out[(y * w + x) * c + ch] = acc;
            }

    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a, kernel, h, w, c, clamp_idx](Graph& gr, const Tensor& og) {
            Tensor ga = Tensor::zeros(a.val().shape());
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double gv = og[(y * w + x) * c + ch];
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const std::size_t yy = clamp_idx(static_cast<long>(y) + dy, h);
                                const std::size_t xx = clamp_idx(static_cast<long>(x) + dx, w);
                                ga[(yy * w + xx) * c + ch] +=
                                    kernel[(dy + 1) * 3 + dx + 1] * gv;
                            }
                    }
            gr.accumulate(a, std::move(ga));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

}  // namespace detail

inline Value sobel_x(Value a) {
    return detail::conv3x3_depthwise(
        a, {-0.125, 0.0, 0.125, -0.25, 0.0, 0.25, -0.125, 0.0, 0.125});
}

inline Value sobel_y(Value a) {
    return detail::conv3x3_depthwise(
        a, {-0.125, -0.25, -0.125, 0.0, 0.0, 0.0, 0.125, 0.25, 0.125});
}

inline Value avgpool2(Value a) {
    Graph& g = *a.graph;
    const Tensor& ta = a.val();
    if (ta.ndim() != 3) throw std::invalid_argument("avgpool2: input must be [H, W, C]");
    const std::size_t h = ta.dim(0), w = ta.dim(1), c = ta.dim(2);
    if (h % 2 != 0 || w % 2 != 0)
        throw std::invalid_argument("avgpool2: spatial dims must be even, got " +
                                    shape_str(ta.shape()));
    Tensor out(Shape{h / 2, w / 2, c});
    for (std::size_t y = 0; y < h / 2; ++y)
        for (std::size_t x = 0; x < w / 2; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v = ta[((2 * y) * w + 2 * x) * c + ch] +
                                 ta[((2 * y) * w + 2 * x + 1) * c + ch] +
                                 ta[((2 * y + 1) * w + 2 * x) * c + ch] +
                                 ta[((2 * y + 1) * w + 2 * x + 1) * c + ch];
                out[(y * (w / 2) + x) * c + ch] = 0.25 * v;
            }
    const bool rg = g.requires_grad(a);
    Graph::BackwardFn bw = nullptr;
    if (rg) {
        bw = [a, h, w, c](Graph& gr, const Tensor& og) {
            Tensor ga(a.val().shape());
            for (std::size_t y = 0; y < h / 2; ++y)
                for (std::size_t x = 0; x < w / 2; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double gv = 0.25 * og[(y * (w / 2) + x) * c + ch];
                        ga[((2 * y) * w + 2 * x) * c + ch] += gv;
                        ga[((2 * y) * w + 2 * x + 1) * c + ch] += gv;
                        ga[((2 * y + 1) * w + 2 * x) * c + ch] += gv;
                        ga[((2 * y + 1) * w + 2 * x + 1) * c + ch] += gv;
                    }
            gr.accumulate(a, std::move(ga));
        };
    }
    return g.make(std::move(out), rg, std::move(bw));
}

}  // namespace tsplat
