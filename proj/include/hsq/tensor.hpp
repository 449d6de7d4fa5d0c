#pragma once

// Dense row-major tensors plus a reverse-mode autodiff graph. Training and
// inference run in 32-bit floats; the same templates instantiate with double
// for finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hsq/errors.hpp"
#include "hsq/rng.hpp"

namespace hsq {

template <class S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S> data;

    TensorT() = default;
    TensorT(std::vector<int> shape_, std::vector<S> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int e : shape) {
            if (e <= 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
            n *= e;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> shape) {
        auto n = numel_of(shape);
        return TensorT(std::move(shape), std::vector<S>(static_cast<size_t>(n), S(0)));
    }

    static TensorT full(std::vector<int> shape, S v) {
        auto n = numel_of(shape);
        return TensorT(std::move(shape), std::vector<S>(static_cast<size_t>(n), v));
    }

    static TensorT scalar(S v) { return TensorT({1}, {v}); }

    static TensorT vector(std::vector<S> v) {
        const int n = static_cast<int>(v.size());
        return TensorT({n}, std::move(v));
    }

    static TensorT matrix(int rows, int cols, std::vector<S> v) {
        return TensorT({rows, cols}, std::move(v));
    }

    int rank() const { return static_cast<int>(shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    // last axis length; leading axes collapsed into "rows" for axis-wise ops
    int last_dim() const { return shape.empty() ? 1 : shape.back(); }
    int64_t outer_size() const { return shape.empty() ? 1 : numel() / last_dim(); }

    int rows() const {
        if (rank() != 2) throw ShapeError("tensor: rows() on rank-" + std::to_string(rank()));
        return shape[0];
    }
    int cols() const {
        if (rank() != 2) throw ShapeError("tensor: cols() on rank-" + std::to_string(rank()));
        return shape[1];
    }

    S& at(int i) { return data[static_cast<size_t>(i)]; }
    S at(int i) const { return data[static_cast<size_t>(i)]; }
    S& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    S at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    void add_(const TensorT& o) {
        if (!same_shape(o)) throw ShapeError("tensor add_: " + shape_str(shape) + " vs " + shape_str(o.shape));
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    }

    template <class T>
    TensorT<T> cast() const {
        std::vector<T> out(data.size());
        for (size_t i = 0; i < data.size(); ++i) out[i] = static_cast<T>(data[i]);
        return TensorT<T>(shape, std::move(out));
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }
    std::string shape_str() const { return shape_str(shape); }
};

using Tensor = TensorT<float>;

enum class OpKind : uint8_t {
    Input, Param, MatMul, Add, Sub, Mul, Neg, Scale, Relu, Tanh, Sigmoid,
    Softmax, LogSoftmax, LayerNorm, CrossEntropy, Sum, ConcatRows, ConcatCols,
    SliceRows, SliceCols, Transpose, GatherRows, Dropout, PairRows,
};

template <class S>
class GraphT;

// Handle to one node of a graph. Cheap to copy; valid while the graph lives.
template <class S>
struct VarT {
    GraphT<S>* graph = nullptr;
    int id = -1;
    bool valid() const { return graph != nullptr && id >= 0; }
    const TensorT<S>& value() const;
};

template <class S>
class GraphT {
  public:
    using Var = VarT<S>;

    GraphT() { nodes_.reserve(64); }
    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    int size() const { return static_cast<int>(nodes_.size()); }
    const TensorT<S>& value(Var v) const { return nodes_[check(v)].value; }
    OpKind kind(Var v) const { return nodes_[check(v)].kind; }

    // ---- leaves ------------------------------------------------------

    Var input(TensorT<S> v) {
        return push(OpKind::Input, {}, std::move(v), false, nullptr, nullptr);
    }

    // Trainable leaf bound to external storage; backward accumulates into
    // `grad`, which must already have the value's shape.
    Var param(const TensorT<S>& value, TensorT<S>& grad) {
        if (!value.same_shape(grad))
            throw ShapeError("param: grad shape " + grad.shape_str() + " != value " + value.shape_str());
        return push(OpKind::Param, {}, value, true, &grad, nullptr);
    }

    Var scalar(S v) { return input(TensorT<S>::scalar(v)); }

    // ---- ops ---------------------------------------------------------

    // 2-D matrix product; rank-1 operands are promoted ([k] -> [1xk] on the
    // left, [k] -> [kx1] on the right) and the promoted axis is squeezed out.
    Var matmul(Var a, Var b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        const bool promote_a = av.rank() == 1;
        const bool promote_b = bv.rank() == 1;
        if ((av.rank() != 1 && av.rank() != 2) || (bv.rank() != 1 && bv.rank() != 2))
            throw ShapeError("matmul: unsupported ranks " + av.shape_str() + " x " + bv.shape_str());
        const int m = promote_a ? 1 : av.shape[0];
        const int k = promote_a ? av.shape[0] : av.shape[1];
        const int kb = promote_b ? bv.shape[0] : bv.shape[0];
        const int n = promote_b ? 1 : bv.shape[1];
        if (k != kb)
            throw ShapeError("matmul: inner dimensions disagree, " + av.shape_str() + " x " + bv.shape_str());

        TensorT<S> out = TensorT<S>::zeros(out_shape_matmul(promote_a, promote_b, m, n));
        matmul_acc(av.data.data(), bv.data.data(), out.data.data(), m, k, n);

        Var r = push(OpKind::MatMul, {a, b}, std::move(out), needs_grad_any(a, b), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            // dA += adj * B^T ; dB += A^T * adj
            const auto& A = g.value(a);
            const auto& B = g.value(b);
            if (g.wants_grad(a)) {
                auto& da = g.adjoint(a, A.shape);
                // da[i,k] += sum_j adj[i,j] * B[k,j]
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        S acc = 0;
                        const S* adj_row = adj.data.data() + static_cast<size_t>(i) * n;
                        const S* b_row = B.data.data() + static_cast<size_t>(kk) * n;
                        for (int j = 0; j < n; ++j) acc += adj_row[j] * b_row[j];
                        da.data[static_cast<size_t>(i) * k + kk] += acc;
                    }
            }
            if (g.wants_grad(b)) {
                auto& db = g.adjoint(b, B.shape);
                // db[k,j] += sum_i A[i,k] * adj[i,j]
                for (int i = 0; i < m; ++i) {
                    const S* a_row = A.data.data() + static_cast<size_t>(i) * k;
                    const S* adj_row = adj.data.data() + static_cast<size_t>(i) * n;
                    for (int kk = 0; kk < k; ++kk) {
                        const S aik = a_row[kk];
                        if (aik == S(0)) continue;
                        S* db_row = db.data.data() + static_cast<size_t>(kk) * n;
                        for (int j = 0; j < n; ++j) db_row[j] += aik * adj_row[j];
                    }
                }
            }
        });
        return r;
    }

    // Elementwise add. Also accepts b whose shape is a trailing suffix of
    // a's (leading-axis expansion, e.g. [Txd] + [d]); nothing else.
    Var add(Var a, Var b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        const bool bcast = broadcast_suffix(av, bv);
        if (!bcast && !av.same_shape(bv))
            throw ShapeError("add: shapes " + av.shape_str() + " vs " + bv.shape_str());
        TensorT<S> out = av;
        const int64_t bn = bv.numel();
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i % bn];
        Var r = push(OpKind::Add, {a, b}, std::move(out), needs_grad_any(a, b), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (g.wants_grad(a)) g.adjoint(a, g.value(a).shape).add_(adj);
            if (g.wants_grad(b)) {
                auto& db = g.adjoint(b, g.value(b).shape);
                const int64_t nb = db.numel();
                for (int64_t i = 0; i < adj.numel(); ++i) db.data[i % nb] += adj.data[i];
            }
        });
        return r;
    }

    Var sub(Var a, Var b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        if (!av.same_shape(bv))
            throw ShapeError("sub: shapes " + av.shape_str() + " vs " + bv.shape_str());
        TensorT<S> out = av;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
        Var r = push(OpKind::Sub, {a, b}, std::move(out), needs_grad_any(a, b), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (g.wants_grad(a)) g.adjoint(a, g.value(a).shape).add_(adj);
            if (g.wants_grad(b)) {
                auto& db = g.adjoint(b, g.value(b).shape);
                for (int64_t i = 0; i < adj.numel(); ++i) db.data[i] -= adj.data[i];
            }
        });
        return r;
    }

    Var mul(Var a, Var b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        if (!av.same_shape(bv))
            throw ShapeError("mul: shapes " + av.shape_str() + " vs " + bv.shape_str());
        TensorT<S> out = av;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
        Var r = push(OpKind::Mul, {a, b}, std::move(out), needs_grad_any(a, b), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            const auto& A = g.value(a);
            const auto& B = g.value(b);
            if (g.wants_grad(a)) {
                auto& da = g.adjoint(a, A.shape);
                for (int64_t i = 0; i < adj.numel(); ++i) da.data[i] += adj.data[i] * B.data[i];
            }
            if (g.wants_grad(b)) {
                auto& db = g.adjoint(b, B.shape);
                for (int64_t i = 0; i < adj.numel(); ++i) db.data[i] += adj.data[i] * A.data[i];
            }
        });
        return r;
    }

    Var neg(Var a) { return scale(a, S(-1)); }

    Var scale(Var a, S c) {
        TensorT<S> out = value(a);
        for (auto& v : out.data) v *= c;
        Var r = push(OpKind::Scale, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (int64_t i = 0; i < adj.numel(); ++i) da.data[i] += c * adj.data[i];
        });
        return r;
    }

    Var relu(Var a) {
        TensorT<S> out = value(a);
        for (auto& v : out.data) v = v > S(0) ? v : S(0);
        Var r = push(OpKind::Relu, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            const auto& x = g.value(a);
            auto& da = g.adjoint(a, x.shape);
            for (int64_t i = 0; i < adj.numel(); ++i)
                if (x.data[i] > S(0)) da.data[i] += adj.data[i];
        });
        return r;
    }

    Var tanh_(Var a) {
        TensorT<S> out = value(a);
        for (auto& v : out.data) v = std::tanh(v);
        Var r = push(OpKind::Tanh, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        const int rid = r.id;
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            const auto& y = g.nodes_[rid].value;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (int64_t i = 0; i < adj.numel(); ++i)
                da.data[i] += adj.data[i] * (S(1) - y.data[i] * y.data[i]);
        });
        return r;
    }

    Var sigmoid(Var a) {
        TensorT<S> out = value(a);
        for (auto& v : out.data) v = S(1) / (S(1) + std::exp(-v));
        Var r = push(OpKind::Sigmoid, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        const int rid = r.id;
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            const auto& y = g.nodes_[rid].value;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (int64_t i = 0; i < adj.numel(); ++i)
                da.data[i] += adj.data[i] * y.data[i] * (S(1) - y.data[i]);
        });
        return r;
    }

    // Softmax along the last axis, max-subtracted. -inf inputs get exactly
    // zero weight provided the row has at least one finite entry.
    Var softmax(Var a) {
        TensorT<S> out = value(a);
        softmax_rows(out);
        Var r = push(OpKind::Softmax, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        const int rid = r.id;
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            const auto& y = g.nodes_[rid].value;
            auto& da = g.adjoint(a, g.value(a).shape);
            const int n = y.last_dim();
            const int64_t rows = y.outer_size();
            for (int64_t row = 0; row < rows; ++row) {
                const S* yr = y.data.data() + row * n;
                const S* ar = adj.data.data() + row * n;
                S dot = 0;
                for (int j = 0; j < n; ++j) dot += ar[j] * yr[j];
                S* dr = da.data.data() + row * n;
                for (int j = 0; j < n; ++j) dr[j] += yr[j] * (ar[j] - dot);
            }
        });
        return r;
    }

    Var log_softmax(Var a) {
        const auto& x = value(a);
        TensorT<S> out = x;
        const int n = x.last_dim();
        const int64_t rows = x.outer_size();
        for (int64_t row = 0; row < rows; ++row) {
            S* r = out.data.data() + row * n;
            const S lse = logsumexp(r, n);
            for (int j = 0; j < n; ++j) r[j] -= lse;
        }
        Var r = push(OpKind::LogSoftmax, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        const int rid = r.id;
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            const auto& y = g.nodes_[rid].value;  // log-probs
            auto& da = g.adjoint(a, g.value(a).shape);
            const int cols = y.last_dim();
            const int64_t nrows = y.outer_size();
            for (int64_t row = 0; row < nrows; ++row) {
                const S* yr = y.data.data() + row * cols;
                const S* ar = adj.data.data() + row * cols;
                S sum = 0;
                for (int j = 0; j < cols; ++j) sum += ar[j];
                S* dr = da.data.data() + row * cols;
                for (int j = 0; j < cols; ++j) dr[j] += ar[j] - std::exp(yr[j]) * sum;
            }
        });
        return r;
    }

    // Normalizes the last axis to zero mean / unit variance (eps inside the
    // square root), then applies the elementwise affine gain/bias.
    Var layer_norm(Var x, Var gain, Var bias, S eps) {
        const auto& xv = value(x);
        const auto& gv = value(gain);
        const auto& bv = value(bias);
        const int d = xv.last_dim();
        if (gv.rank() != 1 || gv.shape[0] != d || bv.rank() != 1 || bv.shape[0] != d)
            throw ShapeError("layer_norm: gain/bias " + gv.shape_str() + "/" + bv.shape_str() +
                             " do not match last axis of " + xv.shape_str());
        const int64_t rows = xv.outer_size();
        TensorT<S> out = xv;
        std::vector<S> inv_std(static_cast<size_t>(rows));
        for (int64_t row = 0; row < rows; ++row) {
            S* r = out.data.data() + row * d;
            S mean = 0;
            for (int j = 0; j < d; ++j) mean += r[j];
            mean /= S(d);
            S var = 0;
            for (int j = 0; j < d; ++j) {
                const S c = r[j] - mean;
                var += c * c;
            }
            var /= S(d);
            const S istd = S(1) / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(row)] = istd;
            for (int j = 0; j < d; ++j) r[j] = (r[j] - mean) * istd * gv.data[j] + bv.data[j];
        }
        Var r = push(OpKind::LayerNorm, {x, gain, bias}, std::move(out), needs_grad_any(x, gain, bias), nullptr, nullptr);
        set_backward(r, [=, istds = std::move(inv_std)](GraphT& g, const TensorT<S>& adj) {
            const auto& xval = g.value(x);
            const auto& gval = g.value(gain);
            const int dd = xval.last_dim();
            const int64_t nrows = xval.outer_size();
            const bool gx = g.wants_grad(x);
            const bool gg = g.wants_grad(gain);
            const bool gb = g.wants_grad(bias);
            TensorT<S>* dx = gx ? &g.adjoint(x, xval.shape) : nullptr;
            TensorT<S>* dg = gg ? &g.adjoint(gain, gval.shape) : nullptr;
            TensorT<S>* db = gb ? &g.adjoint(bias, gval.shape) : nullptr;
            std::vector<S> xhat(static_cast<size_t>(dd));
            for (int64_t row = 0; row < nrows; ++row) {
                const S* xr = xval.data.data() + row * dd;
                const S* ar = adj.data.data() + row * dd;
                const S istd = istds[static_cast<size_t>(row)];
                S mean = 0;
                for (int j = 0; j < dd; ++j) mean += xr[j];
                mean /= S(dd);
                for (int j = 0; j < dd; ++j) xhat[static_cast<size_t>(j)] = (xr[j] - mean) * istd;
                if (dg)
                    for (int j = 0; j < dd; ++j) dg->data[j] += ar[j] * xhat[static_cast<size_t>(j)];
                if (db)
                    for (int j = 0; j < dd; ++j) db->data[j] += ar[j];
                if (dx) {
                    // d/dx of (xhat * g): dxhat = adj * g; then the usual
                    // layer-norm Jacobian applied row-wise.
                    S sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int j = 0; j < dd; ++j) {
                        const S dxh = ar[j] * gval.data[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[static_cast<size_t>(j)];
                    }
                    S* dr = dx->data.data() + row * dd;
                    for (int j = 0; j < dd; ++j) {
                        const S dxh = ar[j] * gval.data[j];
                        dr[j] += istd * (dxh - sum_dxhat / S(dd) -
                                         xhat[static_cast<size_t>(j)] * sum_dxhat_xhat / S(dd));
                    }
                }
            }
        });
        return r;
    }

    // Mean negative log-likelihood of targets under softmax(logits), with
    // optional uniform label smoothing. Positions whose target == ignore_id
    // contribute nothing; an all-ignored batch yields 0 with zero gradient.
    Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_id, S smoothing = S(0)) {
        int count = 0;
        Var s = cross_entropy_sum(logits, targets, ignore_id, smoothing, &count);
        return count > 0 ? scale(s, S(1) / S(count)) : s;
    }

    // Sum form; *out_count receives the number of non-ignored positions.
    Var cross_entropy_sum(Var logits, const std::vector<int>& targets, int ignore_id,
                          S smoothing, int* out_count) {
        const auto& x = value(logits);
        if (x.rank() != 2)
            throw ShapeError("cross_entropy: logits must be rank 2, got " + x.shape_str());
        const int t_len = x.shape[0];
        const int vocab = x.shape[1];
        if (static_cast<int>(targets.size()) != t_len)
            throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(t_len) + " logit rows");
        std::vector<S> lses(static_cast<size_t>(t_len));
        S total = 0;
        int count = 0;
        for (int t = 0; t < t_len; ++t) {
            const int y = targets[static_cast<size_t>(t)];
            if (y == ignore_id) continue;
            if (y < 0 || y >= vocab)
                throw IndexError("cross_entropy: target " + std::to_string(y) + " outside vocabulary of " +
                                 std::to_string(vocab));
            const S* row = x.data.data() + static_cast<size_t>(t) * vocab;
            const S lse = logsumexp(row, vocab);
            lses[static_cast<size_t>(t)] = lse;
            S row_sum = 0;
            if (smoothing > S(0))
                for (int j = 0; j < vocab; ++j) row_sum += row[j];
            total += lse - (S(1) - smoothing) * row[y] - smoothing * row_sum / S(vocab);
            ++count;
        }
        if (out_count) *out_count = count;
        Var r = push(OpKind::CrossEntropy, {logits}, TensorT<S>::scalar(total), needs_grad_any(logits), nullptr, nullptr);
        set_backward(r, [=, tgs = targets, lv = std::move(lses)](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(logits) || count == 0) return;
            const S a = adj.data[0];
            const auto& xv = g.value(logits);
            auto& dx = g.adjoint(logits, xv.shape);
            for (int t = 0; t < t_len; ++t) {
                const int y = tgs[static_cast<size_t>(t)];
                if (y == ignore_id) continue;
                const S* row = xv.data.data() + static_cast<size_t>(t) * vocab;
                S* drow = dx.data.data() + static_cast<size_t>(t) * vocab;
                const S lse = lv[static_cast<size_t>(t)];
                for (int j = 0; j < vocab; ++j) {
                    const S p = std::exp(row[j] - lse);
                    const S q = (j == y ? S(1) - smoothing : S(0)) + smoothing / S(vocab);
                    drow[j] += a * (p - q);
                }
            }
        });
        return r;
    }

    Var sum(Var a) {
        const auto& x = value(a);
        S total = 0;
        for (S v : x.data) total += v;
        Var r = push(OpKind::Sum, {a}, TensorT<S>::scalar(total), needs_grad_any(a), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (auto& v : da.data) v += adj.data[0];
        });
        return r;
    }

    // Stacks rank-1 vars of equal length into [N x d], or concatenates
    // rank-2 vars along axis 0.
    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("concat_rows: no parts");
        int cols = -1, total_rows = 0;
        bool need_grad = false;
        for (Var p : parts) {
            const auto& v = value(p);
            const int c = v.rank() == 1 ? v.shape[0] : v.cols();
            const int rws = v.rank() == 1 ? 1 : v.rows();
            if (v.rank() > 2) throw ShapeError("concat_rows: rank-" + std::to_string(v.rank()) + " part");
            if (cols == -1) cols = c;
            if (c != cols) throw ShapeError("concat_rows: width mismatch " + std::to_string(c) + " vs " + std::to_string(cols));
            total_rows += rws;
            need_grad = need_grad || wants_grad(p);
        }
        TensorT<S> out = TensorT<S>::zeros({total_rows, cols});
        int64_t off = 0;
        for (Var p : parts) {
            const auto& v = value(p);
            std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
            off += v.numel();
        }
        Var r = push(OpKind::ConcatRows, parts, std::move(out), need_grad, nullptr, nullptr);
        set_backward(r, [ps = parts](GraphT& g, const TensorT<S>& adj) {
            int64_t o = 0;
            for (Var p : ps) {
                const auto& v = g.value(p);
                if (g.wants_grad(p)) {
                    auto& dp = g.adjoint(p, v.shape);
                    for (int64_t i = 0; i < v.numel(); ++i) dp.data[i] += adj.data[o + i];
                }
                o += v.numel();
            }
        });
        return r;
    }

    // Concatenates along the last axis: rank-1 vectors end to end, or rank-2
    // matrices with equal row counts side by side.
    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("concat_cols: no parts");
        const int rk = value(parts[0]).rank();
        bool need_grad = false;
        int rows_n = rk == 2 ? value(parts[0]).rows() : 1;
        int total_cols = 0;
        for (Var p : parts) {
            const auto& v = value(p);
            if (v.rank() != rk) throw ShapeError("concat_cols: mixed ranks");
            if (rk == 2 && v.rows() != rows_n)
                throw ShapeError("concat_cols: row mismatch " + std::to_string(v.rows()) + " vs " + std::to_string(rows_n));
            total_cols += v.last_dim();
            need_grad = need_grad || wants_grad(p);
        }
        TensorT<S> out = rk == 2 ? TensorT<S>::zeros({rows_n, total_cols}) : TensorT<S>::zeros({total_cols});
        int col_off = 0;
        for (Var p : parts) {
            const auto& v = value(p);
            const int c = v.last_dim();
            for (int i = 0; i < rows_n; ++i)
                for (int j = 0; j < c; ++j)
                    out.data[static_cast<size_t>(i) * total_cols + col_off + j] =
                        v.data[static_cast<size_t>(i) * c + j];
            col_off += c;
        }
        Var r = push(OpKind::ConcatCols, parts, std::move(out), need_grad, nullptr, nullptr);
        set_backward(r, [ps = parts, rows_n, total_cols](GraphT& g, const TensorT<S>& adj) {
            int off = 0;
            for (Var p : ps) {
                const auto& v = g.value(p);
                const int c = v.last_dim();
                if (g.wants_grad(p)) {
                    auto& dp = g.adjoint(p, v.shape);
                    for (int i = 0; i < rows_n; ++i)
                        for (int j = 0; j < c; ++j)
                            dp.data[static_cast<size_t>(i) * c + j] +=
                                adj.data[static_cast<size_t>(i) * total_cols + off + j];
                }
                off += c;
            }
        });
        return r;
    }

    // rows [r0, r1) of a rank-2 var; squeeze=true returns a rank-1 row
    Var slice_rows(Var a, int r0, int r1, bool squeeze = false) {
        const auto& v = value(a);
        if (v.rank() != 2) throw ShapeError("slice_rows: need rank 2, got " + v.shape_str());
        if (r0 < 0 || r1 > v.rows() || r0 >= r1)
            throw IndexError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + v.shape_str());
        if (squeeze && r1 - r0 != 1) throw ShapeError("slice_rows: squeeze needs a single row");
        const int c = v.cols();
        TensorT<S> out = squeeze ? TensorT<S>::zeros({c}) : TensorT<S>::zeros({r1 - r0, c});
        std::copy(v.data.begin() + static_cast<size_t>(r0) * c, v.data.begin() + static_cast<size_t>(r1) * c,
                  out.data.begin());
        Var r = push(OpKind::SliceRows, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (int64_t i = 0; i < adj.numel(); ++i) da.data[static_cast<size_t>(r0) * c + i] += adj.data[i];
        });
        return r;
    }

    Var row(Var a, int i) { return slice_rows(a, i, i + 1, true); }

    // columns [c0, c1) of a rank-2 var, or elements [c0, c1) of a vector
    Var slice_cols(Var a, int c0, int c1) {
        const auto& v = value(a);
        if (v.rank() != 1 && v.rank() != 2)
            throw ShapeError("slice_cols: need rank 1 or 2, got " + v.shape_str());
        const int width = v.last_dim();
        const int nrows = v.rank() == 2 ? v.rows() : 1;
        if (c0 < 0 || c1 > width || c0 >= c1)
            throw IndexError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + v.shape_str());
        const int c = c1 - c0;
        TensorT<S> out = v.rank() == 2 ? TensorT<S>::zeros({nrows, c}) : TensorT<S>::zeros({c});
        for (int i = 0; i < nrows; ++i)
            for (int j = 0; j < c; ++j)
                out.data[static_cast<size_t>(i) * c + j] = v.data[static_cast<size_t>(i) * width + c0 + j];
        Var r = push(OpKind::SliceCols, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (int i = 0; i < nrows; ++i)
                for (int j = 0; j < c; ++j)
                    da.data[static_cast<size_t>(i) * width + c0 + j] += adj.data[static_cast<size_t>(i) * c + j];
        });
        return r;
    }

    // Pairs adjacent rows: [T x d] -> [ceil(T/2) x 2d], zero-padding a
    // lone final row. The building block of the strided front-end.
    Var pair_rows(Var a) {
        const auto& v = value(a);
        if (v.rank() != 2) throw ShapeError("pair_rows: need rank 2, got " + v.shape_str());
        const int t_in = v.rows(), d = v.cols();
        const int t_out = (t_in + 1) / 2;
        TensorT<S> out = TensorT<S>::zeros({t_out, 2 * d});
        for (int t = 0; t < t_out; ++t) {
            std::copy(v.data.begin() + static_cast<size_t>(2 * t) * d,
                      v.data.begin() + static_cast<size_t>(2 * t + 1) * d,
                      out.data.begin() + static_cast<size_t>(t) * 2 * d);
            if (2 * t + 1 < t_in)
                std::copy(v.data.begin() + static_cast<size_t>(2 * t + 1) * d,
                          v.data.begin() + static_cast<size_t>(2 * t + 2) * d,
                          out.data.begin() + static_cast<size_t>(t) * 2 * d + d);
        }
        Var r = push(OpKind::PairRows, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (int t = 0; t < t_out; ++t) {
                for (int j = 0; j < d; ++j)
                    da.data[static_cast<size_t>(2 * t) * d + j] += adj.data[static_cast<size_t>(t) * 2 * d + j];
                if (2 * t + 1 < t_in)
                    for (int j = 0; j < d; ++j)
                        da.data[static_cast<size_t>(2 * t + 1) * d + j] +=
                            adj.data[static_cast<size_t>(t) * 2 * d + d + j];
            }
        });
        return r;
    }

    Var transpose(Var a) {
        const auto& v = value(a);
        if (v.rank() != 2) throw ShapeError("transpose: need rank 2, got " + v.shape_str());
        const int m = v.rows(), n = v.cols();
        TensorT<S> out = TensorT<S>::zeros({n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at(j, i) = v.at(i, j);
        Var r = push(OpKind::Transpose, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        set_backward(r, [=](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) da.at(i, j) += adj.at(j, i);
        });
        return r;
    }

    // Embedding lookup: rows of `table` selected by ids -> [n x d].
    Var gather_rows(Var table, const std::vector<int>& ids) {
        const auto& t = value(table);
        if (t.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + t.shape_str());
        const int v_size = t.rows(), d = t.cols();
        TensorT<S> out = TensorT<S>::zeros({static_cast<int>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            const int id = ids[i];
            if (id < 0 || id >= v_size)
                throw IndexError("gather_rows: id " + std::to_string(id) + " outside table of " + std::to_string(v_size));
            std::copy(t.data.begin() + static_cast<size_t>(id) * d, t.data.begin() + static_cast<size_t>(id + 1) * d,
                      out.data.begin() + i * d);
        }
        Var r = push(OpKind::GatherRows, {table}, std::move(out), needs_grad_any(table), nullptr, nullptr);
        set_backward(r, [=, idv = ids](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(table)) return;
            auto& dt = g.adjoint(table, g.value(table).shape);
            for (size_t i = 0; i < idv.size(); ++i) {
                S* drow = dt.data.data() + static_cast<size_t>(idv[i]) * d;
                const S* arow = adj.data.data() + i * d;
                for (int j = 0; j < d; ++j) drow[j] += arow[j];
            }
        });
        return r;
    }

    // Inverted dropout: keeps with probability 1-rate and rescales kept
    // entries by 1/(1-rate). rate 0 is the identity.
    Var dropout(Var a, S rate, Rng& rng) {
        if (rate < S(0) || rate >= S(1)) throw ConfigError("dropout: rate must be in [0,1)");
        if (rate == S(0)) return a;
        const auto& v = value(a);
        TensorT<S> mask = TensorT<S>::zeros(v.shape);
        const S keep_scale = S(1) / (S(1) - rate);
        for (int64_t i = 0; i < v.numel(); ++i)
            mask.data[i] = rng.uniform() >= static_cast<double>(rate) ? keep_scale : S(0);
        TensorT<S> out = v;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= mask.data[i];
        Var r = push(OpKind::Dropout, {a}, std::move(out), needs_grad_any(a), nullptr, nullptr);
        set_backward(r, [=, m = std::move(mask)](GraphT& g, const TensorT<S>& adj) {
            if (!g.wants_grad(a)) return;
            auto& da = g.adjoint(a, g.value(a).shape);
            for (int64_t i = 0; i < adj.numel(); ++i) da.data[i] += adj.data[i] * m.data[i];
        });
        return r;
    }

    // ---- backward ------------------------------------------------------

    // Reverse pass from a scalar loss. Adjoints of interior nodes are
    // transient; gradients of param leaves accumulate into their bound
    // storage, so calling this twice on the same graph doubles leaf grads.
    void backward(Var loss) {
        if (loss.graph != this) throw ContractError("backward: loss from another graph");
        const auto& lv = value(loss);
        if (lv.numel() != 1)
            throw ContractError("backward: loss must be scalar, got " + lv.shape_str());
        adjoints_.assign(nodes_.size(), TensorT<S>{});
        adjoint(loss, lv.shape).data[0] = S(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.requires_grad) continue;
            TensorT<S>& adj = adjoints_[static_cast<size_t>(id)];
            if (adj.data.empty()) continue;
            if (n.bound_grad != nullptr) n.bound_grad->add_(adj);
            if (n.backward_fn) n.backward_fn(*this, adj);
        }
        adjoints_.clear();
    }

    bool wants_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  private:
    struct Node {
        OpKind kind;
        std::vector<int> inputs;
        TensorT<S> value;
        bool requires_grad = false;
        TensorT<S>* bound_grad = nullptr;
        std::function<void(GraphT&, const TensorT<S>&)> backward_fn;
    };

    std::vector<Node> nodes_;
    std::vector<TensorT<S>> adjoints_;  // live only inside backward()

    size_t check(Var v) const {
        if (v.graph != this || v.id < 0 || v.id >= size())
            throw ContractError("var does not belong to this graph");
        return static_cast<size_t>(v.id);
    }

    bool needs_grad_any(Var a) const { return wants_grad(a); }
    bool needs_grad_any(Var a, Var b) const { return wants_grad(a) || wants_grad(b); }
    bool needs_grad_any(Var a, Var b, Var c) const { return wants_grad(a) || wants_grad(b) || wants_grad(c); }

    Var push(OpKind kind, const std::vector<Var>& inputs, TensorT<S> value, bool requires_grad,
             TensorT<S>* bound_grad, std::function<void(GraphT&, const TensorT<S>&)> fn) {
        Node n;
        n.kind = kind;
        n.inputs.reserve(inputs.size());
        for (Var v : inputs) n.inputs.push_back(static_cast<int>(check(v)));
        n.value = std::move(value);
        n.requires_grad = requires_grad || bound_grad != nullptr;
        n.bound_grad = bound_grad;
        n.backward_fn = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var{this, size() - 1};
    }

    void set_backward(Var v, std::function<void(GraphT&, const TensorT<S>&)> fn) {
        nodes_[check(v)].backward_fn = std::move(fn);
    }

    TensorT<S>& adjoint(Var v, const std::vector<int>& shape) {
        TensorT<S>& a = adjoints_[check(v)];
        if (a.data.empty()) a = TensorT<S>::zeros(shape);
        return a;
    }

    static bool broadcast_suffix(const TensorT<S>& a, const TensorT<S>& b) {
        if (b.rank() >= a.rank()) return false;
        const int off = a.rank() - b.rank();
        for (int i = 0; i < b.rank(); ++i)
            if (a.shape[static_cast<size_t>(off + i)] != b.shape[static_cast<size_t>(i)]) return false;
        return true;
    }

    static std::vector<int> out_shape_matmul(bool pa, bool pb, int m, int n) {
        if (pa && pb) return {1};
        if (pa) return {n};
        if (pb) return {m};
        return {m, n};
    }

    static void matmul_acc(const S* a, const S* b, S* c, int m, int k, int n) {
        for (int i = 0; i < m; ++i) {
            const S* arow = a + static_cast<size_t>(i) * k;
            S* crow = c + static_cast<size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
                const S aik = arow[kk];
                if (aik == S(0)) continue;
                const S* brow = b + static_cast<size_t>(kk) * n;
                for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
            }
        }
    }

    static S logsumexp(const S* row, int n) {
        S mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        if (!std::isfinite(mx)) {
            // all -inf would be degenerate; callers guarantee a finite max
            mx = S(0);
        }
        S acc = 0;
        for (int j = 0; j < n; ++j) acc += std::exp(row[j] - mx);
        return mx + std::log(acc);
    }

    static void softmax_rows(TensorT<S>& t) {
        const int n = t.last_dim();
        const int64_t rows = t.outer_size();
        for (int64_t row = 0; row < rows; ++row) {
            S* r = t.data.data() + row * n;
            S mx = r[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, r[j]);
            S acc = 0;
            for (int j = 0; j < n; ++j) {
                r[j] = std::exp(r[j] - mx);
                acc += r[j];
            }
            const S inv = S(1) / acc;
            for (int j = 0; j < n; ++j) r[j] *= inv;
        }
    }
};

template <class S>
const TensorT<S>& VarT<S>::value() const {
    return graph->value(*this);
}

using Graph = GraphT<float>;
using Var = VarT<float>;

// expression sugar used throughout the layer code
template <class S> VarT<S> operator+(VarT<S> a, VarT<S> b) { return a.graph->add(a, b); }
template <class S> VarT<S> operator-(VarT<S> a, VarT<S> b) { return a.graph->sub(a, b); }
template <class S> VarT<S> operator*(VarT<S> a, VarT<S> b) { return a.graph->mul(a, b); }
template <class S> VarT<S> matmul(VarT<S> a, VarT<S> b) { return a.graph->matmul(a, b); }

}  // namespace hsq
