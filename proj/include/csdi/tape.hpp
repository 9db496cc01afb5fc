#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Tape owns an ordered list of primitive nodes; building an expression
// evaluates it eagerly and records it. Two reverse passes are provided:
//
//   * backward(scalar)      numeric accumulation into per-node grad slots,
//   * vjp(out, v, wrt)      numeric vector-Jacobian product J^T v,
//   * vjp_nodes(out, v, wrt) the same contraction but *emitted as tape
//     nodes*, so the resulting cotangents are themselves differentiable.
//
// The traced variant is what makes a loss built from VJPs (the probe
// orthogonality regularizer) trainable with a single first-order backward
// pass: the adjoint chain references the weight variables directly, so the
// terminal backward() sees them like any other forward computation.
//
// Tapes are single-owner, one per forward pass, and freed by scope.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "csdi/tensor.hpp"

namespace csdi::ad {

using csdi::ShapeError;
using csdi::Tensor;

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ConstMatMap as_mat(const Tensor& t) {
    return ConstMatMap(t.v.data(), static_cast<Eigen::Index>(t.rows()),
                       static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_mat(Tensor& t) {
    return MatMap(t.v.data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

// Instrumentation for the complexity audit: how many reverse traversals ran
// and how much Jacobian-related storage was held (explicit Jacobian matrices,
// probe vectors, cross-term accumulators). Counts are per audited sample.
struct CostCounters {
    std::uint64_t backward_passes = 0;
    std::size_t jacobian_matrix_floats = 0;
    std::size_t probe_vector_floats = 0;
    std::size_t accumulator_floats = 0;

    void note_jacobian_matrix(std::size_t floats) {
        jacobian_matrix_floats = std::max(jacobian_matrix_floats, floats);
    }
    void note_probe_vector(std::size_t floats) {
        probe_vector_floats = std::max(probe_vector_floats, floats);
    }
    void note_accumulator(std::size_t floats) {
        accumulator_floats = std::max(accumulator_floats, floats);
    }
    std::size_t peak_jacobian_floats() const {
        return jacobian_matrix_floats + probe_vector_floats + accumulator_floats;
    }
};

enum class Op : std::uint8_t {
    leaf,
    matmul_nn,  // A @ B
    matmul_nt,  // A @ B^T
    matmul_tn,  // A^T @ B
    add,
    sub,
    add_rowvec,
    mul,
    divide,
    scale,
    add_const,
    leaky,
    leaky_mask,
    tanh_fn,
    sigmoid_fn,
    log_fn,
    clamp,
    clamp_mask,
    concat_cols,
    split_cols,
    pad_cols,
    sum_all,
    rowsum,
    colsum,
    broadcast_scalar,
    broadcast_col,
    broadcast_row,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::matmul_nn: return "matmul_nn";
        case Op::matmul_nt: return "matmul_nt";
        case Op::matmul_tn: return "matmul_tn";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::add_rowvec: return "add_rowvec";
        case Op::mul: return "mul";
        case Op::divide: return "divide";
        case Op::scale: return "scale";
        case Op::add_const: return "add_const";
        case Op::leaky: return "leaky";
        case Op::leaky_mask: return "leaky_mask";
        case Op::tanh_fn: return "tanh";
        case Op::sigmoid_fn: return "sigmoid";
        case Op::log_fn: return "log";
        case Op::clamp: return "clamp";
        case Op::clamp_mask: return "clamp_mask";
        case Op::concat_cols: return "concat_cols";
        case Op::split_cols: return "split_cols";
        case Op::pad_cols: return "pad_cols";
        case Op::sum_all: return "sum_all";
        case Op::rowsum: return "rowsum";
        case Op::colsum: return "colsum";
        case Op::broadcast_scalar: return "broadcast_scalar";
        case Op::broadcast_col: return "broadcast_col";
        case Op::broadcast_row: return "broadcast_row";
    }
    return "?";
}

struct Var {
    std::uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
};

class Tape {
public:
    Tape() { nodes_.reserve(256); }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        grads_.clear();
        deriv_memo_.clear();
    }

    Var leaf(Tensor value, bool needs_grad = false) {
        return push(Op::leaf, kNone, kNone, std::move(value), needs_grad, 0.0, 0.0, 0, 0);
    }

    const Tensor& value(Var x) const { return node(x, "value").val; }

    bool needs_grad(Var x) const { return node(x, "needs_grad").needs_grad; }

    // ---- primitives -------------------------------------------------------

    Var matmul(Var a, Var b, Op mode = Op::matmul_nn) {
        const Tensor& A = node(a, "matmul").val;
        const Tensor& B = node(b, "matmul").val;
        std::size_t r, k, kb, c;
        switch (mode) {
            case Op::matmul_nn: r = A.rows(); k = A.cols(); kb = B.rows(); c = B.cols(); break;
            case Op::matmul_nt: r = A.rows(); k = A.cols(); kb = B.cols(); c = B.rows(); break;
            case Op::matmul_tn: r = A.cols(); k = A.rows(); kb = B.rows(); c = B.cols(); break;
            default: throw ShapeError("matmul: bad mode");
        }
        if (k != kb)
            throw ShapeError(std::string(op_name(mode)) + ": inner extents " + A.shape_str() +
                             " vs " + B.shape_str());
        Tensor out(r, c);
        if (mode == Op::matmul_nn)
            as_mat(out).noalias() = as_mat(A) * as_mat(B);
        else if (mode == Op::matmul_nt)
            as_mat(out).noalias() = as_mat(A) * as_mat(B).transpose();
        else
            as_mat(out).noalias() = as_mat(A).transpose() * as_mat(B);
        return push(mode, a.id, b.id, std::move(out), propagate(a, b), 0.0, 0.0, 0, 0);
    }

    Var add(Var a, Var b) { return binary_same(Op::add, a, b); }
    Var sub(Var a, Var b) { return binary_same(Op::sub, a, b); }
    Var mul(Var a, Var b) { return binary_same(Op::mul, a, b); }
    Var div(Var a, Var b) { return binary_same(Op::divide, a, b); }

    Var add_rowvec(Var x, Var bias) {
        const Tensor& X = node(x, "add_rowvec").val;
        const Tensor& B = node(bias, "add_rowvec").val;
        if (B.rows() != 1 || B.cols() != X.cols())
            throw ShapeError("add_rowvec: bias " + B.shape_str() + " for input " + X.shape_str());
        Tensor out = X;
        for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += B.v[c];
        return push(Op::add_rowvec, x.id, bias.id, std::move(out), propagate(x, bias), 0.0, 0.0, 0, 0);
    }

    Var scale(Var x, double c) {
        Tensor out = node(x, "scale").val;
        for (double& t : out.v) t *= c;
        return push(Op::scale, x.id, kNone, std::move(out), propagate(x), c, 0.0, 0, 0);
    }

    Var add_const(Var x, double c) {
        Tensor out = node(x, "add_const").val;
        for (double& t : out.v) t += c;
        return push(Op::add_const, x.id, kNone, std::move(out), propagate(x), c, 0.0, 0, 0);
    }

    Var leaky_relu(Var x, double slope = 0.2) {
        Tensor out = node(x, "leaky").val;
        for (double& t : out.v) t = t > 0.0 ? t : slope * t;
        return push(Op::leaky, x.id, kNone, std::move(out), propagate(x), slope, 0.0, 0, 0);
    }

    Var tanh(Var x) {
        Tensor out = node(x, "tanh").val;
        for (double& t : out.v) t = std::tanh(t);
        return push(Op::tanh_fn, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0, 0, 0);
    }

    Var sigmoid(Var x) {
        Tensor out = node(x, "sigmoid").val;
        for (double& t : out.v) t = 1.0 / (1.0 + std::exp(-t));
        return push(Op::sigmoid_fn, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0, 0, 0);
    }

    Var log(Var x) {
        Tensor out = node(x, "log").val;
        for (double& t : out.v) t = std::log(t);
        return push(Op::log_fn, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0, 0, 0);
    }

    Var clamp(Var x, double lo, double hi) {
        Tensor out = node(x, "clamp").val;
        for (double& t : out.v) t = std::min(std::max(t, lo), hi);
        return push(Op::clamp, x.id, kNone, std::move(out), propagate(x), lo, hi, 0, 0);
    }

    Var concat_cols(Var a, Var b) {
        const Tensor& A = node(a, "concat_cols").val;
        const Tensor& B = node(b, "concat_cols").val;
        if (A.rows() != B.rows())
            throw ShapeError("concat_cols: rows " + A.shape_str() + " vs " + B.shape_str());
        Tensor out(A.rows(), A.cols() + B.cols());
        for (std::size_t r = 0; r < A.rows(); ++r) {
            for (std::size_t c = 0; c < A.cols(); ++c) out.at(r, c) = A.at(r, c);
            for (std::size_t c = 0; c < B.cols(); ++c) out.at(r, A.cols() + c) = B.at(r, c);
        }
        return push(Op::concat_cols, a.id, b.id, std::move(out), propagate(a, b), 0.0, 0.0,
                    static_cast<int>(A.cols()), 0);
    }

    Var split_cols(Var x, std::size_t from, std::size_t to) {
        const Tensor& X = node(x, "split_cols").val;
        if (!(from < to && to <= X.cols()))
            throw ShapeError("split_cols: [" + std::to_string(from) + "," + std::to_string(to) +
                             ") of " + X.shape_str());
        Tensor out(X.rows(), to - from);
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = from; c < to; ++c) out.at(r, c - from) = X.at(r, c);
        return push(Op::split_cols, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0,
                    static_cast<int>(from), static_cast<int>(X.cols()));
    }

    Var pad_cols(Var x, std::size_t offset, std::size_t total) {
        const Tensor& X = node(x, "pad_cols").val;
        if (offset + X.cols() > total)
            throw ShapeError("pad_cols: offset " + std::to_string(offset) + " width " +
                             std::to_string(X.cols()) + " into " + std::to_string(total));
        Tensor out(X.rows(), total);
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = 0; c < X.cols(); ++c) out.at(r, offset + c) = X.at(r, c);
        return push(Op::pad_cols, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0,
                    static_cast<int>(offset), static_cast<int>(total));
    }

    Var sum_all(Var x) {
        const Tensor& X = node(x, "sum_all").val;
        double s = 0.0;
        for (double t : X.v) s += t;
        Tensor out(1, 1);
        out.v[0] = s;
        return push(Op::sum_all, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0,
                    static_cast<int>(X.rows()), static_cast<int>(X.cols()));
    }

    Var mean_all(Var x) {
        const Tensor& X = node(x, "mean_all").val;
        return scale(sum_all(x), 1.0 / static_cast<double>(X.numel()));
    }

    Var rowsum(Var x) {
        const Tensor& X = node(x, "rowsum").val;
        Tensor out(X.rows(), 1);
        for (std::size_t r = 0; r < X.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < X.cols(); ++c) s += X.at(r, c);
            out.v[r] = s;
        }
        return push(Op::rowsum, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0,
                    static_cast<int>(X.cols()), 0);
    }

    Var colsum(Var x) {
        const Tensor& X = node(x, "colsum").val;
        Tensor out(1, X.cols());
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = 0; c < X.cols(); ++c) out.v[c] += X.at(r, c);
        return push(Op::colsum, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0,
                    static_cast<int>(X.rows()), 0);
    }

    Var broadcast_scalar(Var x, std::size_t rows, std::size_t cols) {
        const Tensor& X = node(x, "broadcast_scalar").val;
        if (X.numel() != 1) throw ShapeError("broadcast_scalar: source " + X.shape_str());
        Tensor out(rows, cols, X.v[0]);
        return push(Op::broadcast_scalar, x.id, kNone, std::move(out), propagate(x), 0.0, 0.0,
                    static_cast<int>(rows), static_cast<int>(cols));
    }

    Var broadcast_col(Var x, std::size_t cols) {
        const Tensor& X = node(x, "broadcast_col").val;
        if (X.cols() != 1) throw ShapeError("broadcast_col: source " + X.shape_str());
        Tensor out(X.rows(), cols);
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = X.v[r];
        return push(Op::broadcast_col, x.id, kNone, std::move(out), propagate(x),
                    0.0, 0.0, static_cast<int>(cols), 0);
    }

    Var broadcast_row(Var x, std::size_t rows) {
        const Tensor& X = node(x, "broadcast_row").val;
        if (X.rows() != 1) throw ShapeError("broadcast_row: source " + X.shape_str());
        Tensor out(rows, X.cols());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < X.cols(); ++c) out.at(r, c) = X.v[c];
        return push(Op::broadcast_row, x.id, kNone, std::move(out), propagate(x),
                    0.0, 0.0, static_cast<int>(rows), 0);
    }

    // ---- composites -------------------------------------------------------

    // Per-row squared norm: (B x m) -> (B x 1).
    Var squared_norm_rows(Var x) { return rowsum(mul(x, x)); }

    // Per-row inner product of equally shaped matrices: (B x m) -> (B x 1).
    Var rowdot(Var a, Var b) { return rowsum(mul(a, b)); }

    // ---- numeric reverse passes -------------------------------------------

    // Gradient of a scalar output w.r.t. every needs_grad node; results are
    // read back with grad().
    void backward(Var out) {
        const Node& o = node(out, "backward");
        if (o.val.numel() != 1) throw ShapeError("backward: output is " + o.val.shape_str());
        Tensor seed(1, 1);
        seed.v[0] = 1.0;
        grads_.assign(nodes_.size(), Tensor{});
        run_numeric_reverse(out, seed, /*use_needs_grad=*/true, nullptr);
    }

    const Tensor& grad(Var x) const {
        const Node& n = node(x, "grad");
        (void)n;
        if (grads_.size() != nodes_.size()) throw Error("grad: no backward pass has run");
        return grads_[x.id];
    }

    bool has_grad(Var x) const {
        return grads_.size() == nodes_.size() && grads_[x.id].numel() > 0;
    }

    // Numeric VJP: returns J^T v for each requested input, where J is the
    // Jacobian of `out` w.r.t. that input. One reverse traversal per call.
    std::vector<Tensor> vjp(Var out, const Tensor& cotangent, std::span<const Var> wrt,
                            CostCounters* counters = nullptr) {
        const Node& o = node(out, "vjp");
        if (!(cotangent.rows() == o.val.rows() && cotangent.cols() == o.val.cols()))
            throw ShapeError("vjp: cotangent " + cotangent.shape_str() + " for output " +
                             o.val.shape_str());
        for (Var w : wrt) node(w, "vjp wrt");
        std::vector<char> relevant = relevance_mask(out, wrt);
        grads_.assign(nodes_.size(), Tensor{});
        run_numeric_reverse(out, cotangent, /*use_needs_grad=*/false, &relevant);
        if (counters) counters->backward_passes += 1;
        std::vector<Tensor> result;
        result.reserve(wrt.size());
        for (Var w : wrt) {
            if (grads_[w.id].numel() == 0) {
                const Tensor& wv = nodes_[w.id].val;
                result.push_back(Tensor::zeros(wv.rows(), wv.cols()));
            } else {
                result.push_back(grads_[w.id]);
            }
        }
        return result;
    }

    // Traced VJP: the same contraction, emitted as tape nodes so that the
    // returned cotangents can participate in further differentiable
    // computation. Elementwise derivative factors are memoized per forward
    // node, so repeated probes share them.
    std::vector<Var> vjp_nodes(Var out, Var cotangent, std::span<const Var> wrt,
                               CostCounters* counters = nullptr) {
        const Node& o = node(out, "vjp_nodes");
        const Node& cN = node(cotangent, "vjp_nodes cotangent");
        if (!(cN.val.rows() == o.val.rows() && cN.val.cols() == o.val.cols()))
            throw ShapeError("vjp_nodes: cotangent " + cN.val.shape_str() + " for output " +
                             o.val.shape_str());
        for (Var w : wrt) node(w, "vjp_nodes wrt");
        std::vector<char> relevant = relevance_mask(out, wrt);

        std::vector<Var> cot(out.id + 1, Var{});
        cot[out.id] = cotangent;
        for (std::uint32_t id = out.id + 1; id-- > 0;) {
            if (!cot[id].valid()) continue;
            emit_adjoints(id, cot[id], relevant, cot);
        }
        if (counters) counters->backward_passes += 1;
        std::vector<Var> result;
        result.reserve(wrt.size());
        for (Var w : wrt) {
            if (cot[w.id].valid()) {
                result.push_back(cot[w.id]);
            } else {
                const Tensor& wv = nodes_[w.id].val;
                result.push_back(leaf(Tensor::zeros(wv.rows(), wv.cols())));
            }
        }
        return result;
    }

private:
    static constexpr std::uint32_t kNone = UINT32_MAX;

    struct Node {
        Op op;
        std::uint32_t a, b;
        double p0, p1;
        int i0, i1;
        bool needs_grad;
        Tensor val;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    // forward node id -> emitted elementwise-derivative factor
    std::unordered_map<std::uint32_t, Var> deriv_memo_;

    const Node& node(Var x, const char* who) const {
        if (!x.valid() || x.id >= nodes_.size())
            throw Error(std::string(who) + ": variable id " +
                        (x.valid() ? std::to_string(x.id) : std::string("<invalid>")) +
                        " is not on this tape (" + std::to_string(nodes_.size()) + " nodes)");
        return nodes_[x.id];
    }

    bool propagate(Var a) const { return nodes_[a.id].needs_grad; }
    bool propagate(Var a, Var b) const { return nodes_[a.id].needs_grad || nodes_[b.id].needs_grad; }

    Var push(Op op, std::uint32_t a, std::uint32_t b, Tensor val, bool needs_grad, double p0,
             double p1, int i0, int i1) {
        nodes_.push_back(Node{op, a, b, p0, p1, i0, i1, needs_grad, std::move(val)});
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    Var binary_same(Op op, Var a, Var b) {
        const Tensor& A = node(a, op_name(op)).val;
        const Tensor& B = node(b, op_name(op)).val;
        if (!A.same_shape(B))
            throw ShapeError(std::string(op_name(op)) + ": shapes " + A.shape_str() + " vs " +
                             B.shape_str());
        Tensor out(A.rows(), A.cols());
        const std::size_t n = A.numel();
        switch (op) {
            case Op::add:
                for (std::size_t i = 0; i < n; ++i) out.v[i] = A.v[i] + B.v[i];
                break;
            case Op::sub:
                for (std::size_t i = 0; i < n; ++i) out.v[i] = A.v[i] - B.v[i];
                break;
            case Op::mul:
                for (std::size_t i = 0; i < n; ++i) out.v[i] = A.v[i] * B.v[i];
                break;
            case Op::divide:
                for (std::size_t i = 0; i < n; ++i) out.v[i] = A.v[i] / B.v[i];
                break;
            default: throw ShapeError("binary_same: bad op");
        }
        return push(op, a.id, b.id, std::move(out), propagate(a, b), 0.0, 0.0, 0, 0);
    }

    // Nodes that have any wrt variable in their ancestry; cotangents are only
    // propagated through these, so a VJP touches exactly the connecting chain.
    std::vector<char> relevance_mask(Var out, std::span<const Var> wrt) const {
        std::vector<char> relevant(out.id + 1, 0);
        for (Var w : wrt)
            if (w.id <= out.id) relevant[w.id] = 1;
        for (std::uint32_t id = 0; id <= out.id; ++id) {
            if (relevant[id]) continue;
            const Node& n = nodes_[id];
            if (n.a != kNone && n.a <= out.id && relevant[n.a]) relevant[id] = 1;
            else if (n.b != kNone && n.b <= out.id && relevant[n.b]) relevant[id] = 1;
        }
        return relevant;
    }

    void acc(std::uint32_t id, const Tensor& contribution) {
        Tensor& g = grads_[id];
        if (g.numel() == 0) {
            g = contribution;
        } else {
            for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += contribution.v[i];
        }
    }

    Tensor& grad_slot(std::uint32_t id) {
        Tensor& g = grads_[id];
        if (g.numel() == 0) g = Tensor::zeros(nodes_[id].val.rows(), nodes_[id].val.cols());
        return g;
    }

    bool wants(std::uint32_t id, bool use_needs_grad, const std::vector<char>* relevant) const {
        if (id == kNone) return false;
        if (use_needs_grad) return nodes_[id].needs_grad;
        return id < relevant->size() && (*relevant)[id];
    }

    void run_numeric_reverse(Var out, const Tensor& seed, bool use_needs_grad,
                             const std::vector<char>* relevant) {
        grads_[out.id] = seed;
        for (std::uint32_t id = out.id + 1; id-- > 0;) {
            if (grads_[id].numel() == 0) continue;
            const Node& n = nodes_[id];
            if (n.op == Op::leaf) continue;
            const Tensor& U = grads_[id];
            const bool wa = wants(n.a, use_needs_grad, relevant);
            const bool wb = wants(n.b, use_needs_grad, relevant);
            if (!wa && !wb) continue;
            numeric_adjoint(n, U, wa, wb);
        }
    }

    void numeric_adjoint(const Node& n, const Tensor& U, bool wa, bool wb) {
        const Tensor& A = n.a != kNone ? nodes_[n.a].val : U;
        switch (n.op) {
            case Op::matmul_nn: {
                const Tensor& B = nodes_[n.b].val;
                if (wa) as_mat(grad_slot(n.a)).noalias() += as_mat(U) * as_mat(B).transpose();
                if (wb) as_mat(grad_slot(n.b)).noalias() += as_mat(A).transpose() * as_mat(U);
                break;
            }
            case Op::matmul_nt: {
                const Tensor& B = nodes_[n.b].val;
                if (wa) as_mat(grad_slot(n.a)).noalias() += as_mat(U) * as_mat(B);
                if (wb) as_mat(grad_slot(n.b)).noalias() += as_mat(U).transpose() * as_mat(A);
                break;
            }
            case Op::matmul_tn: {
                const Tensor& B = nodes_[n.b].val;
                if (wa) as_mat(grad_slot(n.a)).noalias() += as_mat(B) * as_mat(U).transpose();
                if (wb) as_mat(grad_slot(n.b)).noalias() += as_mat(A) * as_mat(U);
                break;
            }
            case Op::add:
                if (wa) acc(n.a, U);
                if (wb) acc(n.b, U);
                break;
            case Op::sub: {
                if (wa) acc(n.a, U);
                if (wb) {
                    Tensor& g = grad_slot(n.b);
                    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] -= U.v[i];
                }
                break;
            }
            case Op::add_rowvec: {
                if (wa) acc(n.a, U);
                if (wb) {
                    Tensor& g = grad_slot(n.b);
                    for (std::size_t r = 0; r < U.rows(); ++r)
                        for (std::size_t c = 0; c < U.cols(); ++c) g.v[c] += U.at(r, c);
                }
                break;
            }
            case Op::mul: {
                const Tensor& B = nodes_[n.b].val;
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += U.v[i] * B.v[i];
                }
                if (wb) {
                    Tensor& g = grad_slot(n.b);
                    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += U.v[i] * A.v[i];
                }
                break;
            }
            case Op::divide: {
                const Tensor& B = nodes_[n.b].val;
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += U.v[i] / B.v[i];
                }
                if (wb) {
                    Tensor& g = grad_slot(n.b);
                    for (std::size_t i = 0; i < g.v.size(); ++i)
                        g.v[i] -= U.v[i] * A.v[i] / (B.v[i] * B.v[i]);
                }
                break;
            }
            case Op::scale: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += U.v[i] * n.p0;
                }
                break;
            }
            case Op::add_const:
                if (wa) acc(n.a, U);
                break;
            case Op::leaky: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    const Tensor& X = nodes_[n.a].val;
                    for (std::size_t i = 0; i < g.v.size(); ++i)
                        g.v[i] += U.v[i] * (X.v[i] > 0.0 ? 1.0 : n.p0);
                }
                break;
            }
            case Op::tanh_fn: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t i = 0; i < g.v.size(); ++i)
                        g.v[i] += U.v[i] * (1.0 - n.val.v[i] * n.val.v[i]);
                }
                break;
            }
            case Op::sigmoid_fn: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t i = 0; i < g.v.size(); ++i)
                        g.v[i] += U.v[i] * n.val.v[i] * (1.0 - n.val.v[i]);
                }
                break;
            }
            case Op::log_fn: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    const Tensor& X = nodes_[n.a].val;
                    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += U.v[i] / X.v[i];
                }
                break;
            }
            case Op::clamp: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    const Tensor& X = nodes_[n.a].val;
                    for (std::size_t i = 0; i < g.v.size(); ++i)
                        g.v[i] += (X.v[i] >= n.p0 && X.v[i] <= n.p1) ? U.v[i] : 0.0;
                }
                break;
            }
            case Op::leaky_mask:
            case Op::clamp_mask:
                break;  // derivative factors: zero gradient almost everywhere
            case Op::concat_cols: {
                const std::size_t ka = static_cast<std::size_t>(n.i0);
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < ka; ++c) g.at(r, c) += U.at(r, c);
                }
                if (wb) {
                    Tensor& g = grad_slot(n.b);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) g.at(r, c) += U.at(r, ka + c);
                }
                break;
            }
            case Op::split_cols: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    const std::size_t from = static_cast<std::size_t>(n.i0);
                    for (std::size_t r = 0; r < U.rows(); ++r)
                        for (std::size_t c = 0; c < U.cols(); ++c) g.at(r, from + c) += U.at(r, c);
                }
                break;
            }
            case Op::pad_cols: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    const std::size_t off = static_cast<std::size_t>(n.i0);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) g.at(r, c) += U.at(r, off + c);
                }
                break;
            }
            case Op::sum_all: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (double& t : g.v) t += U.v[0];
                }
                break;
            }
            case Op::rowsum: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) g.at(r, c) += U.v[r];
                }
                break;
            }
            case Op::colsum: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) g.at(r, c) += U.v[c];
                }
                break;
            }
            case Op::broadcast_scalar: {
                if (wa) {
                    double s = 0.0;
                    for (double t : U.v) s += t;
                    grad_slot(n.a).v[0] += s;
                }
                break;
            }
            case Op::broadcast_col: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t r = 0; r < U.rows(); ++r) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < U.cols(); ++c) s += U.at(r, c);
                        g.v[r] += s;
                    }
                }
                break;
            }
            case Op::broadcast_row: {
                if (wa) {
                    Tensor& g = grad_slot(n.a);
                    for (std::size_t r = 0; r < U.rows(); ++r)
                        for (std::size_t c = 0; c < U.cols(); ++c) g.v[c] += U.at(r, c);
                }
                break;
            }
            case Op::leaf:
                break;
        }
    }

    // Memoized elementwise derivative factor for a forward node (traced path).
    Var deriv_factor(std::uint32_t id) {
        auto it = deriv_memo_.find(id);
        if (it != deriv_memo_.end()) return it->second;
        const Node& n = nodes_[id];
        Var y{id};
        Var factor{};
        switch (n.op) {
            case Op::leaky: {
                Tensor m = nodes_[n.a].val;
                for (double& t : m.v) t = t > 0.0 ? 1.0 : n.p0;
                factor = push(Op::leaky_mask, n.a, kNone, std::move(m), false, n.p0, 0.0, 0, 0);
                break;
            }
            case Op::tanh_fn:
                factor = add_const(scale(mul(y, y), -1.0), 1.0);
                break;
            case Op::sigmoid_fn:
                factor = mul(y, add_const(scale(y, -1.0), 1.0));
                break;
            case Op::clamp: {
                Tensor m = nodes_[n.a].val;
                for (double& t : m.v) t = (t >= n.p0 && t <= n.p1) ? 1.0 : 0.0;
                factor = push(Op::clamp_mask, n.a, kNone, std::move(m), false, n.p0, n.p1, 0, 0);
                break;
            }
            default:
                throw Error("deriv_factor: unsupported op");
        }
        deriv_memo_.emplace(id, factor);
        return factor;
    }

    void add_cot(std::vector<Var>& cot, std::uint32_t id, Var contribution) {
        if (cot[id].valid())
            cot[id] = add(cot[id], contribution);
        else
            cot[id] = contribution;
    }

    void emit_adjoints(std::uint32_t id, Var U, const std::vector<char>& relevant,
                       std::vector<Var>& cot) {
        // Capture PODs only; emission below may reallocate nodes_.
        const Op op = nodes_[id].op;
        const std::uint32_t na = nodes_[id].a;
        const std::uint32_t nb = nodes_[id].b;
        const double p0 = nodes_[id].p0;
        const int i0 = nodes_[id].i0;
        const int i1 = nodes_[id].i1;
        const std::size_t out_cols = nodes_[id].val.cols();
        if (op == Op::leaf) return;
        const bool wa = na != kNone && relevant[na];
        const bool wb = nb != kNone && relevant[nb];
        if (!wa && !wb) return;
        Var a{na}, b{nb}, y{id};
        switch (op) {
            case Op::matmul_nn:
                if (wa) add_cot(cot, na, matmul(U, b, Op::matmul_nt));
                if (wb) add_cot(cot, nb, matmul(a, U, Op::matmul_tn));
                break;
            case Op::matmul_nt:
                if (wa) add_cot(cot, na, matmul(U, b, Op::matmul_nn));
                if (wb) add_cot(cot, nb, matmul(U, a, Op::matmul_tn));
                break;
            case Op::matmul_tn:
                if (wa) add_cot(cot, na, matmul(b, U, Op::matmul_nt));
                if (wb) add_cot(cot, nb, matmul(a, U, Op::matmul_nn));
                break;
            case Op::add:
                if (wa) add_cot(cot, na, U);
                if (wb) add_cot(cot, nb, U);
                break;
            case Op::sub:
                if (wa) add_cot(cot, na, U);
                if (wb) add_cot(cot, nb, scale(U, -1.0));
                break;
            case Op::add_rowvec:
                if (wa) add_cot(cot, na, U);
                if (wb) add_cot(cot, nb, colsum(U));
                break;
            case Op::mul:
                if (wa) add_cot(cot, na, mul(U, b));
                if (wb) add_cot(cot, nb, mul(U, a));
                break;
            case Op::divide: {
                Var ub = div(U, b);
                if (wa) add_cot(cot, na, ub);
                if (wb) add_cot(cot, nb, scale(mul(ub, y), -1.0));
                break;
            }
            case Op::scale:
                if (wa) add_cot(cot, na, scale(U, p0));
                break;
            case Op::add_const:
                if (wa) add_cot(cot, na, U);
                break;
            case Op::leaky:
            case Op::tanh_fn:
            case Op::sigmoid_fn:
            case Op::clamp:
                if (wa) add_cot(cot, na, mul(U, deriv_factor(id)));
                break;
            case Op::log_fn:
                if (wa) add_cot(cot, na, div(U, a));
                break;
            case Op::leaky_mask:
            case Op::clamp_mask:
                break;
            case Op::concat_cols: {
                const std::size_t ka = static_cast<std::size_t>(i0);
                if (wa) add_cot(cot, na, split_cols(U, 0, ka));
                if (wb) add_cot(cot, nb, split_cols(U, ka, out_cols));
                break;
            }
            case Op::split_cols:
                if (wa)
                    add_cot(cot, na,
                            pad_cols(U, static_cast<std::size_t>(i0), static_cast<std::size_t>(i1)));
                break;
            case Op::pad_cols: {
                if (wa) {
                    const std::size_t off = static_cast<std::size_t>(i0);
                    const std::size_t w = nodes_[na].val.cols();
                    add_cot(cot, na, split_cols(U, off, off + w));
                }
                break;
            }
            case Op::sum_all:
                if (wa)
                    add_cot(cot, na,
                            broadcast_scalar(U, static_cast<std::size_t>(i0),
                                             static_cast<std::size_t>(i1)));
                break;
            case Op::rowsum:
                if (wa) add_cot(cot, na, broadcast_col(U, static_cast<std::size_t>(i0)));
                break;
            case Op::colsum:
                if (wa) add_cot(cot, na, broadcast_row(U, static_cast<std::size_t>(i0)));
                break;
            case Op::broadcast_scalar:
                if (wa) add_cot(cot, na, sum_all(U));
                break;
            case Op::broadcast_col:
                if (wa) add_cot(cot, na, rowsum(U));
                break;
            case Op::broadcast_row:
                if (wa) add_cot(cot, na, colsum(U));
                break;
            case Op::leaf:
                break;
        }
    }
};

// Max over coordinates of |autodiff - central difference| / (|cd| + 1e-12)
// for a scalar-valued map given as a tape builder.
template <class Builder>
double grad_check(Builder&& build, const Tensor& point, double step) {
    if (step <= 0.0) throw NumericError("grad_check: step must be positive");
    Tensor ad_grad;
    {
        Tape tape;
        Var x = tape.leaf(point, /*needs_grad=*/true);
        Var out = build(tape, x);
        if (tape.value(out).numel() != 1)
            throw ShapeError("grad_check: map output is " + tape.value(out).shape_str());
        if (!tape.value(out).all_finite()) throw NumericError("grad_check: non-finite output");
        tape.backward(out);
        ad_grad = tape.has_grad(x) ? tape.grad(x) : Tensor::zeros(point.rows(), point.cols());
    }
    auto eval = [&](const Tensor& p, std::size_t coord) {
        Tape tape;
        Var x = tape.leaf(p, false);
        Var out = build(tape, x);
        double val = tape.value(out).v[0];
        if (!std::isfinite(val))
            throw NumericError("grad_check: non-finite intermediate at coordinate " +
                               std::to_string(coord));
        return val;
    };
    double worst = 0.0;
    Tensor p = point;
    for (std::size_t i = 0; i < p.v.size(); ++i) {
        const double orig = p.v[i];
        p.v[i] = orig + step;
        double fp = eval(p, i);
        p.v[i] = orig - step;
        double fm = eval(p, i);
        p.v[i] = orig;
        double fd = (fp - fm) / (2.0 * step);
        double err = std::fabs(ad_grad.v[i] - fd) / (std::fabs(fd) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace csdi::ad
