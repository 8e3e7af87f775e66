// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records ops in topological order; backward() walks the record in
// reverse and accumulates into per-node gradients, finally adding leaf
// gradients into caller-owned sink tensors. Forward math lives in free
// functions (ops::*) shared with the tape-free eager path, so the frozen
// world model, target-network passes, and evaluation rollouts run the exact
// same arithmetic as the training graph.
//
// The op set is the closed vocabulary the models need: matrix products,
// elementwise arithmetic/nonlinearities, row softmaxes, layer norm, causal
// single-head self-attention (fused), one-hot gathers for discrete inputs,
// sequence assembly, and reductions.
#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <utility>
#include <vector>

#include "sicql/tensor.hpp"

namespace sicql {

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace ops {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
        throw TensorError("matmul shape mismatch");
    }
    Tensor c({a.shape()[0], b.shape()[1]});
    kernels::matmul(a.data(), b.data(), c.data(), a.shape()[0], a.shape()[1], b.shape()[1], false);
    return c;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw TensorError("add shape mismatch");
    Tensor c(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    const int64_t n = a.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) pc[i] = pa[i] + pb[i];
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw TensorError("sub shape mismatch");
    Tensor c(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    const int64_t n = a.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) pc[i] = pa[i] - pb[i];
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw TensorError("mul shape mismatch");
    Tensor c(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    const int64_t n = a.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) pc[i] = pa[i] * pb[i];
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c(a.shape());
    const double* pa = a.data();
    double* pc = c.data();
    const int64_t n = a.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) pc[i] = s * pa[i];
    return c;
}

// a [m,n] + bias [n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
    if (a.ndim() != 2 || bias.numel() != a.shape()[1]) throw TensorError("add_rowvec shape mismatch");
    Tensor c(a.shape());
    const int64_t m = a.shape()[0], n = a.shape()[1];
    for (int64_t i = 0; i < m; ++i) {
        const double* pa = a.data() + i * n;
        const double* pb = bias.data();
        double* pc = c.data() + i * n;
#pragma omp simd
        for (int64_t j = 0; j < n; ++j) pc[j] = pa[j] + pb[j];
    }
    return c;
}

// x [items*T, n] + table [T, n], tiled per item (positional embeddings).
inline Tensor add_rows_tiled(const Tensor& x, const Tensor& table, int64_t T) {
    if (x.ndim() != 2 || table.ndim() != 2 || table.shape()[1] != x.shape()[1] ||
        table.shape()[0] < T || x.shape()[0] % T != 0) {
        throw TensorError("add_rows_tiled shape mismatch");
    }
    Tensor c(x.shape());
    const int64_t rows = x.shape()[0], n = x.shape()[1];
    for (int64_t i = 0; i < rows; ++i) {
        const double* pa = x.data() + i * n;
        const double* pt = table.data() + (i % T) * n;
        double* pc = c.data() + i * n;
#pragma omp simd
        for (int64_t j = 0; j < n; ++j) pc[j] = pa[j] + pt[j];
    }
    return c;
}

inline Tensor relu(const Tensor& a) {
    Tensor c(a.shape());
    const double* pa = a.data();
    double* pc = c.data();
    const int64_t n = a.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) pc[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    return c;
}

inline Tensor exp(const Tensor& a) {
    Tensor c(a.shape());
    const double* pa = a.data();
    double* pc = c.data();
    const int64_t n = a.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) pc[i] = std::exp(pa[i]);
    return c;
}

inline Tensor log(const Tensor& a) {
    Tensor c(a.shape());
    const double* pa = a.data();
    double* pc = c.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (!(pa[i] > 0.0)) throw TensorError("log of non-positive value");
        pc[i] = std::log(pa[i]);
    }
    return c;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor c(a.shape());
    const double* pa = a.data();
    double* pc = c.data();
    const int64_t n = a.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) pc[i] = 1.0 / (1.0 + std::exp(-pa[i]));
    return c;
}

inline Tensor tanh(const Tensor& a) {
    Tensor c(a.shape());
    const double* pa = a.data();
    double* pc = c.data();
    const int64_t n = a.numel();
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) pc[i] = std::tanh(pa[i]);
    return c;
}

inline Tensor softmax_rows(const Tensor& a) {
    if (a.ndim() != 2) throw TensorError("softmax_rows requires 2-D");
    Tensor c(a.shape());
    const int64_t m = a.shape()[0], n = a.shape()[1];
    for (int64_t i = 0; i < m; ++i) kernels::softmax_row(a.data() + i * n, c.data() + i * n, n);
    return c;
}

// Returns log-probs; probs_out (if non-null) receives exp(out) for backward reuse.
inline Tensor log_softmax_rows(const Tensor& a, Tensor* probs_out = nullptr) {
    if (a.ndim() != 2) throw TensorError("log_softmax_rows requires 2-D");
    Tensor c(a.shape());
    const int64_t m = a.shape()[0], n = a.shape()[1];
    for (int64_t i = 0; i < m; ++i) kernels::log_softmax_row(a.data() + i * n, c.data() + i * n, n);
    if (probs_out) {
        *probs_out = exp(c);
    }
    return c;
}

// Pre-affine layer norm per row; stats_out [m,2] stores (mean, rstd) per row.
inline Tensor layer_norm_rows(const Tensor& x, double eps, Tensor* stats_out) {
    if (x.ndim() != 2) throw TensorError("layer_norm requires 2-D");
    const int64_t m = x.shape()[0], n = x.shape()[1];
    Tensor y(x.shape());
    if (stats_out) *stats_out = Tensor({m, 2});
    double mean, rstd;
    for (int64_t i = 0; i < m; ++i) {
        kernels::layer_norm_row(x.data() + i * n, y.data() + i * n, n, eps, &mean, &rstd);
        if (stats_out) {
            stats_out->at(i, 0) = mean;
            stats_out->at(i, 1) = rstd;
        }
    }
    return y;
}

// Fused causal single-head self-attention over `items` packed sequences of
// length T. qkv is [items*T, 3*dim] laid out [Q|K|V]; output is [items*T, dim].
// probs_out receives the packed lower-triangular softmax rows (row i of an
// item holds i+1 entries) for the backward pass.
inline Tensor causal_attention(const Tensor& qkv, int64_t items, int64_t T, int64_t dim,
                               Tensor* probs_out) {
    if (qkv.ndim() != 2 || qkv.shape()[0] != items * T || qkv.shape()[1] != 3 * dim) {
        throw TensorError("causal_attention shape mismatch");
    }
    Tensor ctx({items * T, dim});
    const int64_t tri = T * (T + 1) / 2;
    if (probs_out) *probs_out = Tensor({items * tri});
    const double sc = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<double> srow(static_cast<size_t>(T));
    for (int64_t b = 0; b < items; ++b) {
        const double* base = qkv.data() + b * T * 3 * dim;
        double* pr = probs_out ? probs_out->data() + b * tri : nullptr;
        for (int64_t i = 0; i < T; ++i) {
            const double* qi = base + i * 3 * dim;
            for (int64_t j = 0; j <= i; ++j) {
                const double* kj = base + j * 3 * dim + dim;
                double acc = 0.0;
#pragma omp simd reduction(+ : acc)
                for (int64_t d = 0; d < dim; ++d) acc += qi[d] * kj[d];
                srow[static_cast<size_t>(j)] = acc * sc;
            }
            kernels::softmax_row(srow.data(), srow.data(), i + 1);
            double* ci = ctx.data() + (b * T + i) * dim;
            std::memset(ci, 0, sizeof(double) * static_cast<size_t>(dim));
            for (int64_t j = 0; j <= i; ++j) {
                const double p = srow[static_cast<size_t>(j)];
                const double* vj = base + j * 3 * dim + 2 * dim;
#pragma omp simd
                for (int64_t d = 0; d < dim; ++d) ci[d] += p * vj[d];
            }
            if (pr) {
                std::memcpy(pr + i * (i + 1) / 2, srow.data(),
                            sizeof(double) * static_cast<size_t>(i + 1));
            }
        }
    }
    return ctx;
}

// out[i,:] = W[idx[i],:]
inline Tensor gather_rows(const Tensor& W, const std::vector<int32_t>& idx) {
    if (W.ndim() != 2) throw TensorError("gather_rows requires 2-D table");
    const int64_t n = W.shape()[1];
    Tensor c({static_cast<int64_t>(idx.size()), n});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= W.shape()[0]) throw TensorError("gather_rows index out of range");
        std::memcpy(c.data() + static_cast<int64_t>(i) * n, W.data() + idx[i] * n,
                    sizeof(double) * static_cast<size_t>(n));
    }
    return c;
}

// out[i,:] = coeffs[i] * w
inline Tensor rows_outer(const std::vector<double>& coeffs, const Tensor& w) {
    if (w.ndim() != 1) throw TensorError("rows_outer requires 1-D weight");
    const int64_t n = w.numel();
    Tensor c({static_cast<int64_t>(coeffs.size()), n});
    for (size_t i = 0; i < coeffs.size(); ++i) {
        const double s = coeffs[i];
        double* pc = c.data() + static_cast<int64_t>(i) * n;
        const double* pw = w.data();
#pragma omp simd
        for (int64_t j = 0; j < n; ++j) pc[j] = s * pw[j];
    }
    return c;
}

inline Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
    if (a.ndim() != 2 || c0 < 0 || c1 > a.shape()[1] || c0 >= c1) {
        throw TensorError("slice_cols out of range");
    }
    const int64_t m = a.shape()[0], n = a.shape()[1], w = c1 - c0;
    Tensor c({m, w});
    for (int64_t i = 0; i < m; ++i) {
        std::memcpy(c.data() + i * w, a.data() + i * n + c0, sizeof(double) * static_cast<size_t>(w));
    }
    return c;
}

// Interleave a query row per item with its h prompt rows:
// out rows = [q_0, p_{0,0..h-1}, q_1, p_{1,0..h-1}, ...].
inline Tensor seq_assemble(const Tensor& q, const Tensor& p, int64_t items, int64_t h) {
    const int64_t n = q.shape()[1];
    if (q.shape()[0] != items || (h > 0 && (p.shape()[0] != items * h || p.shape()[1] != n))) {
        throw TensorError("seq_assemble shape mismatch");
    }
    const int64_t T = h + 1;
    Tensor c({items * T, n});
    for (int64_t b = 0; b < items; ++b) {
        std::memcpy(c.data() + b * T * n, q.data() + b * n, sizeof(double) * static_cast<size_t>(n));
        if (h > 0) {
            std::memcpy(c.data() + (b * T + 1) * n, p.data() + b * h * n,
                        sizeof(double) * static_cast<size_t>(h * n));
        }
    }
    return c;
}

// out[i] = a[i, idx[i]]
inline Tensor pick(const Tensor& a, const std::vector<int32_t>& idx) {
    if (a.ndim() != 2 || static_cast<int64_t>(idx.size()) != a.shape()[0]) {
        throw TensorError("pick shape mismatch");
    }
    Tensor c({a.shape()[0]});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.shape()[1]) throw TensorError("pick index out of range");
        c.at(static_cast<int64_t>(i)) = a.at(static_cast<int64_t>(i), idx[i]);
    }
    return c;
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    const double* pa = a.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) s += pa[i];
    return Tensor::scalar(s);
}

inline Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw TensorError("mean of empty tensor");
    return Tensor::scalar(sum_all(a).value() / static_cast<double>(a.numel()));
}

inline Tensor one_hot(const std::vector<int32_t>& idx, int64_t classes) {
    Tensor c({static_cast<int64_t>(idx.size()), classes});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= classes) throw TensorError("one_hot index out of range");
        c.at(static_cast<int64_t>(i), idx[i]) = 1.0;
    }
    return c;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
    enum class Op : uint8_t {
        leaf,
        constant,
        matmul,
        add,
        sub,
        mul,
        scale,
        add_rowvec,
        add_rows_tiled,
        relu,
        exp,
        log,
        sigmoid,
        tanh,
        softmax_rows,
        log_softmax_rows,
        layer_norm,
        causal_attention,
        gather_rows,
        rows_outer,
        slice_cols,
        seq_assemble,
        pick,
        sum_all,
        mean_all,
    };

    struct Node {
        Op op;
        int32_t a = -1, b = -1, c = -1;
        Tensor out;
        Tensor aux;                // op-specific saved forward state
        double alpha = 0.0;
        int64_t i0 = 0, i1 = 0, i2 = 0;
        std::vector<int32_t> idx;
        std::vector<double> coeffs;
        bool needs_grad = false;
        Tensor* grad_sink = nullptr;  // leaves only
        Tensor grad;                  // allocated lazily during backward
    };

public:
    // Registers a parameter leaf. The value is snapshotted; gradients are
    // accumulated into *grad_sink by backward().
    Var param(const Tensor& value, Tensor* grad_sink) {
        Node n;
        n.op = Op::leaf;
        n.out = value;
        n.needs_grad = true;
        n.grad_sink = grad_sink;
        return push(std::move(n));
    }

    // A constant input: participates in forward math, receives no gradient.
    Var constant(Tensor value) {
        Node n;
        n.op = Op::constant;
        n.out = std::move(value);
        return push(std::move(n));
    }

    Var detach(Var v) { return constant(val(v)); }

    Var matmul(Var a, Var b) {
        Node n = binary(Op::matmul, a, b);
        n.out = ops::matmul(val(a), val(b));
        return push(std::move(n));
    }
    Var add(Var a, Var b) {
        Node n = binary(Op::add, a, b);
        n.out = ops::add(val(a), val(b));
        return push(std::move(n));
    }
    Var sub(Var a, Var b) {
        Node n = binary(Op::sub, a, b);
        n.out = ops::sub(val(a), val(b));
        return push(std::move(n));
    }
    Var mul(Var a, Var b) {
        Node n = binary(Op::mul, a, b);
        n.out = ops::mul(val(a), val(b));
        return push(std::move(n));
    }
    Var scale(Var a, double s) {
        Node n = unary(Op::scale, a);
        n.alpha = s;
        n.out = ops::scale(val(a), s);
        return push(std::move(n));
    }
    Var add_rowvec(Var a, Var bias) {
        Node n = binary(Op::add_rowvec, a, bias);
        n.out = ops::add_rowvec(val(a), val(bias));
        return push(std::move(n));
    }
    Var add_rows_tiled(Var x, Var table, int64_t T) {
        Node n = binary(Op::add_rows_tiled, x, table);
        n.i0 = T;
        n.out = ops::add_rows_tiled(val(x), val(table), T);
        return push(std::move(n));
    }
    Var relu(Var a) {
        Node n = unary(Op::relu, a);
        n.out = ops::relu(val(a));
        return push(std::move(n));
    }
    Var exp_(Var a) {
        Node n = unary(Op::exp, a);
        n.out = ops::exp(val(a));
        return push(std::move(n));
    }
    Var log_(Var a) {
        Node n = unary(Op::log, a);
        n.out = ops::log(val(a));
        return push(std::move(n));
    }
    Var sigmoid(Var a) {
        Node n = unary(Op::sigmoid, a);
        n.out = ops::sigmoid(val(a));
        return push(std::move(n));
    }
    Var tanh_(Var a) {
        Node n = unary(Op::tanh, a);
        n.out = ops::tanh(val(a));
        return push(std::move(n));
    }
    Var softmax_rows(Var a) {
        Node n = unary(Op::softmax_rows, a);
        n.out = ops::softmax_rows(val(a));
        return push(std::move(n));
    }
    Var log_softmax_rows(Var a) {
        Node n = unary(Op::log_softmax_rows, a);
        n.out = ops::log_softmax_rows(val(a), &n.aux);
        return push(std::move(n));
    }
    // y = norm(x) * gain + bias, gain/bias broadcast over rows.
    Var layer_norm(Var x, Var gain, Var bias, double eps) {
        Node n;
        n.op = Op::layer_norm;
        n.a = x.id;
        n.b = gain.id;
        n.c = bias.id;
        n.alpha = eps;
        n.needs_grad = needs(x) || needs(gain) || needs(bias);
        Tensor normed = ops::layer_norm_rows(val(x), eps, &n.aux);
        const int64_t m = normed.shape()[0], w = normed.shape()[1];
        Tensor y({m, w});
        const double* pg = val(gain).data();
        const double* pb = val(bias).data();
        for (int64_t i = 0; i < m; ++i) {
            const double* pn = normed.data() + i * w;
            double* py = y.data() + i * w;
#pragma omp simd
            for (int64_t j = 0; j < w; ++j) py[j] = pn[j] * pg[j] + pb[j];
        }
        n.out = std::move(y);
        return push(std::move(n));
    }
    Var causal_attention(Var qkv, int64_t items, int64_t T, int64_t dim) {
        Node n = unary(Op::causal_attention, qkv);
        n.i0 = items;
        n.i1 = T;
        n.i2 = dim;
        n.out = ops::causal_attention(val(qkv), items, T, dim, &n.aux);
        return push(std::move(n));
    }
    Var gather_rows(Var W, std::vector<int32_t> idx) {
        Node n = unary(Op::gather_rows, W);
        n.out = ops::gather_rows(val(W), idx);
        n.idx = std::move(idx);
        return push(std::move(n));
    }
    Var rows_outer(std::vector<double> coeffs, Var w) {
        Node n = unary(Op::rows_outer, w);
        n.out = ops::rows_outer(coeffs, val(w));
        n.coeffs = std::move(coeffs);
        return push(std::move(n));
    }
    Var slice_cols(Var a, int64_t c0, int64_t c1) {
        Node n = unary(Op::slice_cols, a);
        n.i0 = c0;
        n.i1 = c1;
        n.out = ops::slice_cols(val(a), c0, c1);
        return push(std::move(n));
    }
    Var seq_assemble(Var q, Var p, int64_t items, int64_t h) {
        Node n = binary(Op::seq_assemble, q, p);
        n.i0 = items;
        n.i1 = h;
        n.out = ops::seq_assemble(val(q), val(p), items, h);
        return push(std::move(n));
    }
    Var pick(Var a, std::vector<int32_t> idx) {
        Node n = unary(Op::pick, a);
        n.out = ops::pick(val(a), idx);
        n.idx = std::move(idx);
        return push(std::move(n));
    }
    Var sum_all(Var a) {
        Node n = unary(Op::sum_all, a);
        n.out = ops::sum_all(val(a));
        return push(std::move(n));
    }
    Var mean_all(Var a) {
        Node n = unary(Op::mean_all, a);
        n.out = ops::mean_all(val(a));
        return push(std::move(n));
    }

    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].out; }

    size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // Reverse-mode accumulation from a scalar loss. May be called several
    // times per tape (losses sharing subgraphs); gradients add up.
    void backward(Var loss) {
        Node& ln = nodes_[static_cast<size_t>(loss.id)];
        if (ln.out.numel() != 1) throw GraphError("backward requires a scalar loss");
        if (!std::isfinite(ln.out.value())) throw GraphError("non-finite loss in backward");
        ensure_grad(ln);
        ln.grad.at(0) += 1.0;
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || n.grad.numel() == 0) continue;
            step_backward(n);
            if (n.op == Op::leaf) {
                if (!n.grad_sink->same_shape(n.out)) *n.grad_sink = Tensor(n.out.shape());
                const int64_t cnt = n.grad.numel();
                double* dst = n.grad_sink->data();
                const double* src = n.grad.data();
                for (int64_t j = 0; j < cnt; ++j) dst[j] += src[j];
            }
            n.grad = Tensor();  // free as we go
        }
    }

private:
    std::vector<Node> nodes_;

    bool needs(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

    Node unary(Op op, Var a) {
        Node n;
        n.op = op;
        n.a = a.id;
        n.needs_grad = needs(a);
        return n;
    }
    Node binary(Op op, Var a, Var b) {
        Node n;
        n.op = op;
        n.a = a.id;
        n.b = b.id;
        n.needs_grad = needs(a) || needs(b);
        return n;
    }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    static void ensure_grad(Node& n) {
        if (n.grad.numel() == 0) n.grad = Tensor(n.out.shape());
    }

    Tensor* grad_of(int32_t id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad) return nullptr;
        ensure_grad(n);
        return &n.grad;
    }

    void step_backward(Node& n) {
        const Tensor& g = n.grad;
        switch (n.op) {
            case Op::leaf:
            case Op::constant:
                break;
            case Op::matmul: {
                const Tensor& A = nodes_[n.a].out;
                const Tensor& B = nodes_[n.b].out;
                if (Tensor* da = grad_of(n.a)) {
                    kernels::matmul_a_bt(g.data(), B.data(), da->data(), A.shape()[0], B.shape()[1],
                                         A.shape()[1], true);
                }
                if (Tensor* db = grad_of(n.b)) {
                    kernels::matmul_at_b(A.data(), g.data(), db->data(), A.shape()[1], A.shape()[0],
                                         B.shape()[1], true);
                }
                break;
            }
            case Op::add: {
                accumulate(n.a, g);
                accumulate(n.b, g);
                break;
            }
            case Op::sub: {
                accumulate(n.a, g);
                if (Tensor* db = grad_of(n.b)) {
                    axpy(-1.0, g, *db);
                }
                break;
            }
            case Op::mul: {
                if (Tensor* da = grad_of(n.a)) mul_acc(g, nodes_[n.b].out, *da);
                if (Tensor* db = grad_of(n.b)) mul_acc(g, nodes_[n.a].out, *db);
                break;
            }
            case Op::scale: {
                if (Tensor* da = grad_of(n.a)) axpy(n.alpha, g, *da);
                break;
            }
            case Op::add_rowvec: {
                accumulate(n.a, g);
                if (Tensor* db = grad_of(n.b)) {
                    const int64_t m = g.shape()[0], w = g.shape()[1];
                    for (int64_t i = 0; i < m; ++i) {
                        const double* pg = g.data() + i * w;
                        double* pd = db->data();
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) pd[j] += pg[j];
                    }
                }
                break;
            }
            case Op::add_rows_tiled: {
                accumulate(n.a, g);
                if (Tensor* db = grad_of(n.b)) {
                    const int64_t rows = g.shape()[0], w = g.shape()[1], T = n.i0;
                    for (int64_t i = 0; i < rows; ++i) {
                        const double* pg = g.data() + i * w;
                        double* pd = db->data() + (i % T) * w;
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) pd[j] += pg[j];
                    }
                }
                break;
            }
            case Op::relu: {
                if (Tensor* da = grad_of(n.a)) {
                    const Tensor& x = nodes_[n.a].out;
                    const int64_t cnt = g.numel();
                    const double* px = x.data();
                    const double* pg = g.data();
                    double* pd = da->data();
#pragma omp simd
                    for (int64_t i = 0; i < cnt; ++i) pd[i] += px[i] > 0.0 ? pg[i] : 0.0;
                }
                break;
            }
            case Op::exp: {
                if (Tensor* da = grad_of(n.a)) mul_acc(g, n.out, *da);
                break;
            }
            case Op::log: {
                if (Tensor* da = grad_of(n.a)) {
                    const Tensor& x = nodes_[n.a].out;
                    const int64_t cnt = g.numel();
                    const double* px = x.data();
                    const double* pg = g.data();
                    double* pd = da->data();
#pragma omp simd
                    for (int64_t i = 0; i < cnt; ++i) pd[i] += pg[i] / px[i];
                }
                break;
            }
            case Op::sigmoid: {
                if (Tensor* da = grad_of(n.a)) {
                    const int64_t cnt = g.numel();
                    const double* po = n.out.data();
                    const double* pg = g.data();
                    double* pd = da->data();
#pragma omp simd
                    for (int64_t i = 0; i < cnt; ++i) pd[i] += pg[i] * po[i] * (1.0 - po[i]);
                }
                break;
            }
            case Op::tanh: {
                if (Tensor* da = grad_of(n.a)) {
                    const int64_t cnt = g.numel();
                    const double* po = n.out.data();
                    const double* pg = g.data();
                    double* pd = da->data();
#pragma omp simd
                    for (int64_t i = 0; i < cnt; ++i) pd[i] += pg[i] * (1.0 - po[i] * po[i]);
                }
                break;
            }
            case Op::softmax_rows: {
                if (Tensor* da = grad_of(n.a)) {
                    const int64_t m = g.shape()[0], w = g.shape()[1];
                    for (int64_t i = 0; i < m; ++i) {
                        const double* po = n.out.data() + i * w;
                        const double* pg = g.data() + i * w;
                        double* pd = da->data() + i * w;
                        double dot = 0.0;
                        for (int64_t j = 0; j < w; ++j) dot += po[j] * pg[j];
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) pd[j] += po[j] * (pg[j] - dot);
                    }
                }
                break;
            }
            case Op::log_softmax_rows: {
                if (Tensor* da = grad_of(n.a)) {
                    const int64_t m = g.shape()[0], w = g.shape()[1];
                    for (int64_t i = 0; i < m; ++i) {
                        const double* pp = n.aux.data() + i * w;  // softmax probs
                        const double* pg = g.data() + i * w;
                        double* pd = da->data() + i * w;
                        double gsum = 0.0;
                        for (int64_t j = 0; j < w; ++j) gsum += pg[j];
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) pd[j] += pg[j] - pp[j] * gsum;
                    }
                }
                break;
            }
            case Op::layer_norm: {
                const Tensor& x = nodes_[n.a].out;
                const Tensor& gain = nodes_[n.b].out;
                const int64_t m = x.shape()[0], w = x.shape()[1];
                Tensor* dx = grad_of(n.a);
                Tensor* dgain = grad_of(n.b);
                Tensor* dbias = grad_of(n.c);
                std::vector<double> xhat(static_cast<size_t>(w));
                for (int64_t i = 0; i < m; ++i) {
                    const double mean = n.aux.at(i, 0);
                    const double rstd = n.aux.at(i, 1);
                    const double* px = x.data() + i * w;
                    const double* pg = g.data() + i * w;
                    for (int64_t j = 0; j < w; ++j) xhat[static_cast<size_t>(j)] = (px[j] - mean) * rstd;
                    if (dgain) {
                        double* pd = dgain->data();
                        for (int64_t j = 0; j < w; ++j) pd[j] += pg[j] * xhat[static_cast<size_t>(j)];
                    }
                    if (dbias) {
                        double* pd = dbias->data();
                        for (int64_t j = 0; j < w; ++j) pd[j] += pg[j];
                    }
                    if (dx) {
                        const double* pgn = gain.data();
                        double sum_d = 0.0, sum_dx = 0.0;
                        for (int64_t j = 0; j < w; ++j) {
                            const double dyg = pg[j] * pgn[j];
                            sum_d += dyg;
                            sum_dx += dyg * xhat[static_cast<size_t>(j)];
                        }
                        const double inv_n = 1.0 / static_cast<double>(w);
                        double* pd = dx->data() + i * w;
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) {
                            const double dyg = pg[j] * pgn[j];
                            pd[j] += rstd * (dyg - inv_n * sum_d -
                                             xhat[static_cast<size_t>(j)] * inv_n * sum_dx);
                        }
                    }
                }
                break;
            }
            case Op::causal_attention: {
                Tensor* dqkv = grad_of(n.a);
                if (!dqkv) break;
                const Tensor& qkv = nodes_[n.a].out;
                const int64_t items = n.i0, T = n.i1, dim = n.i2;
                const int64_t tri = T * (T + 1) / 2;
                const double sc = 1.0 / std::sqrt(static_cast<double>(dim));
                std::vector<double> dp(static_cast<size_t>(T)), ds(static_cast<size_t>(T));
                for (int64_t b = 0; b < items; ++b) {
                    const double* base = qkv.data() + b * T * 3 * dim;
                    double* dbase = dqkv->data() + b * T * 3 * dim;
                    const double* probs = n.aux.data() + b * tri;
                    for (int64_t i = 0; i < T; ++i) {
                        const double* gi = g.data() + (b * T + i) * dim;
                        const double* pi = probs + i * (i + 1) / 2;
                        // dV and dp
                        for (int64_t j = 0; j <= i; ++j) {
                            const double* vj = base + j * 3 * dim + 2 * dim;
                            double* dvj = dbase + j * 3 * dim + 2 * dim;
                            const double p = pi[j];
                            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
                            for (int64_t d = 0; d < dim; ++d) {
                                dvj[d] += p * gi[d];
                                acc += gi[d] * vj[d];
                            }
                            dp[static_cast<size_t>(j)] = acc;
                        }
                        // softmax jacobian
                        double dot = 0.0;
                        for (int64_t j = 0; j <= i; ++j) dot += pi[j] * dp[static_cast<size_t>(j)];
                        for (int64_t j = 0; j <= i; ++j) {
                            ds[static_cast<size_t>(j)] = pi[j] * (dp[static_cast<size_t>(j)] - dot) * sc;
                        }
                        // dQ_i, dK_j
                        const double* qi = base + i * 3 * dim;
                        double* dqi = dbase + i * 3 * dim;
                        for (int64_t j = 0; j <= i; ++j) {
                            const double s = ds[static_cast<size_t>(j)];
                            const double* kj = base + j * 3 * dim + dim;
                            double* dkj = dbase + j * 3 * dim + dim;
#pragma omp simd
                            for (int64_t d = 0; d < dim; ++d) {
                                dqi[d] += s * kj[d];
                                dkj[d] += s * qi[d];
                            }
                        }
                    }
                }
                break;
            }
            case Op::gather_rows: {
                if (Tensor* dw = grad_of(n.a)) {
                    const int64_t w = g.shape()[1];
                    for (size_t i = 0; i < n.idx.size(); ++i) {
                        const double* pg = g.data() + static_cast<int64_t>(i) * w;
                        double* pd = dw->data() + n.idx[i] * w;
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) pd[j] += pg[j];
                    }
                }
                break;
            }
            case Op::rows_outer: {
                if (Tensor* dw = grad_of(n.a)) {
                    const int64_t w = g.shape()[1];
                    double* pd = dw->data();
                    for (size_t i = 0; i < n.coeffs.size(); ++i) {
                        const double s = n.coeffs[i];
                        const double* pg = g.data() + static_cast<int64_t>(i) * w;
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) pd[j] += s * pg[j];
                    }
                }
                break;
            }
            case Op::slice_cols: {
                if (Tensor* da = grad_of(n.a)) {
                    const int64_t m = g.shape()[0], w = g.shape()[1];
                    const int64_t full = da->shape()[1];
                    for (int64_t i = 0; i < m; ++i) {
                        const double* pg = g.data() + i * w;
                        double* pd = da->data() + i * full + n.i0;
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) pd[j] += pg[j];
                    }
                }
                break;
            }
            case Op::seq_assemble: {
                const int64_t items = n.i0, h = n.i1, T = h + 1;
                const int64_t w = g.shape()[1];
                if (Tensor* dq = grad_of(n.a)) {
                    for (int64_t b = 0; b < items; ++b) {
                        const double* pg = g.data() + b * T * w;
                        double* pd = dq->data() + b * w;
#pragma omp simd
                        for (int64_t j = 0; j < w; ++j) pd[j] += pg[j];
                    }
                }
                if (h > 0) {
                    if (Tensor* dp2 = grad_of(n.b)) {
                        for (int64_t b = 0; b < items; ++b) {
                            const double* pg = g.data() + (b * T + 1) * w;
                            double* pd = dp2->data() + b * h * w;
                            const int64_t cnt = h * w;
#pragma omp simd
                            for (int64_t j = 0; j < cnt; ++j) pd[j] += pg[j];
                        }
                    }
                }
                break;
            }
            case Op::pick: {
                if (Tensor* da = grad_of(n.a)) {
                    const int64_t w = da->shape()[1];
                    for (size_t i = 0; i < n.idx.size(); ++i) {
                        da->data()[static_cast<int64_t>(i) * w + n.idx[i]] += g.at(static_cast<int64_t>(i));
                    }
                }
                break;
            }
            case Op::sum_all: {
                if (Tensor* da = grad_of(n.a)) {
                    const double s = g.value();
                    double* pd = da->data();
                    const int64_t cnt = da->numel();
#pragma omp simd
                    for (int64_t i = 0; i < cnt; ++i) pd[i] += s;
                }
                break;
            }
            case Op::mean_all: {
                if (Tensor* da = grad_of(n.a)) {
                    const double s = g.value() / static_cast<double>(da->numel());
                    double* pd = da->data();
                    const int64_t cnt = da->numel();
#pragma omp simd
                    for (int64_t i = 0; i < cnt; ++i) pd[i] += s;
                }
                break;
            }
        }
    }

    void accumulate(int32_t id, const Tensor& g) {
        if (Tensor* d = grad_of(id)) axpy(1.0, g, *d);
    }

    static void axpy(double a, const Tensor& x, Tensor& y) {
        const int64_t n = x.numel();
        const double* px = x.data();
        double* py = y.data();
#pragma omp simd
        for (int64_t i = 0; i < n; ++i) py[i] += a * px[i];
    }

    static void mul_acc(const Tensor& g, const Tensor& other, Tensor& dst) {
        const int64_t n = g.numel();
        const double* pg = g.data();
        const double* po = other.data();
        double* pd = dst.data();
#pragma omp simd
        for (int64_t i = 0; i < n; ++i) pd[i] += pg[i] * po[i];
    }
};

}  // namespace sicql
