#pragma once

// Neural building blocks shared by all three architectures: LSTM cell and
// bidirectional encoder, multi-head and additive attention, position-wise
// FFN, sinusoidal positional encoding, and the strided subsampling
// front-end. Every layer is a pure composition of graph ops, so gradients
// come for free from the graph.

#include <cmath>
#include <vector>

#include "hsq/errors.hpp"
#include "hsq/rng.hpp"
#include "hsq/tensor.hpp"

namespace hsq {

// ---- parameter initialization policy ----------------------------------
// Recurrent weights: uniform(-0.1, 0.1). Affine/attention weights: normal
// scaled by 1/sqrt(fan_in). Biases zero, LSTM forget-gate bias +1.

template <class S>
TensorT<S> init_recurrent(Rng& rng, std::vector<int> shape) {
    auto t = TensorT<S>::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(rng.uniform(-0.1, 0.1));
    return t;
}

template <class S>
TensorT<S> init_scaled_normal(Rng& rng, std::vector<int> shape, int fan_in) {
    auto t = TensorT<S>::zeros(std::move(shape));
    const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<S>(rng.normal(0.0, std));
    return t;
}

template <class S>
TensorT<S> init_lstm_bias(int cell) {
    auto t = TensorT<S>::zeros({4 * cell});
    // gate order i, f, g, o; forget-gate bias +1
    for (int j = cell; j < 2 * cell; ++j) t.data[static_cast<size_t>(j)] = S(1);
    return t;
}

// ---- affine ------------------------------------------------------------

template <class S>
struct AffineP {
    VarT<S> w;  // [in x out]
    VarT<S> b;  // [out]
};

template <class S>
VarT<S> affine(const AffineP<S>& p, VarT<S> x) {
    auto& g = *x.graph;
    return g.add(g.matmul(x, p.w), p.b);
}

// ---- LSTM ---------------------------------------------------------------

// Value-level recurrent state (h, c), both of configured cell size.
template <class S>
struct LstmStateT {
    TensorT<S> h;
    TensorT<S> c;
    static LstmStateT zeros(int cell) {
        return {TensorT<S>::zeros({cell}), TensorT<S>::zeros({cell})};
    }
};
using LstmState = LstmStateT<float>;

// Graph-resident state used while composing a training forward.
template <class S>
struct LstmNodes {
    VarT<S> h;
    VarT<S> c;
};

template <class S>
struct LstmP {
    VarT<S> w_ih;  // [in x 4c]
    VarT<S> w_hh;  // [c x 4c]
    VarT<S> b;     // [4c]
    int cell = 0;
};

// Standard LSTM cell: sigmoid input/forget/output gates, tanh candidate.
template <class S>
LstmNodes<S> lstm_step(const LstmP<S>& p, const LstmNodes<S>& state, VarT<S> input) {
    auto& g = *input.graph;
    const auto& xv = g.value(input);
    const auto& wv = g.value(p.w_ih);
    if (xv.rank() != 1 || xv.shape[0] != wv.shape[0])
        throw ShapeError("lstm_step: input " + xv.shape_str() + " does not match weight " + wv.shape_str());
    const int c = p.cell;
    auto gates = g.add(g.add(g.matmul(input, p.w_ih), g.matmul(state.h, p.w_hh)), p.b);
    auto i_g = g.sigmoid(g.slice_cols(gates, 0, c));
    auto f_g = g.sigmoid(g.slice_cols(gates, c, 2 * c));
    auto g_g = g.tanh_(g.slice_cols(gates, 2 * c, 3 * c));
    auto o_g = g.sigmoid(g.slice_cols(gates, 3 * c, 4 * c));
    auto c_new = g.add(g.mul(f_g, state.c), g.mul(i_g, g_g));
    auto h_new = g.mul(o_g, g.tanh_(c_new));
    return {h_new, c_new};
}

// Runs an LSTM over the rows of x, returning the stacked hidden states.
template <class S>
VarT<S> lstm_run(const LstmP<S>& p, VarT<S> x, bool reverse = false) {
    auto& g = *x.graph;
    const int t_len = g.value(x).rows();
    LstmNodes<S> state{g.input(TensorT<S>::zeros({p.cell})), g.input(TensorT<S>::zeros({p.cell}))};
    std::vector<VarT<S>> hs(static_cast<size_t>(t_len));
    for (int step = 0; step < t_len; ++step) {
        const int t = reverse ? t_len - 1 - step : step;
        state = lstm_step(p, state, g.row(x, t));
        hs[static_cast<size_t>(t)] = state.h;
    }
    return g.concat_rows(hs);
}

// Forward and backward passes concatenated per frame: [T x d] -> [T x 2c].
template <class S>
VarT<S> bilstm_encode(const LstmP<S>& fwd, const LstmP<S>& bwd, VarT<S> x) {
    auto& g = *x.graph;
    if (g.value(x).rows() < 1) throw ContractError("bilstm_encode: empty sequence");
    auto hf = lstm_run(fwd, x, false);
    auto hb = lstm_run(bwd, x, true);
    return g.concat_cols({hf, hb});
}

// ---- attention ----------------------------------------------------------

enum class AttnScale { SqrtDk, Dk };

// Per-head query-position x key-position probabilities.
template <class S>
using AttentionWeightsT = std::vector<TensorT<S>>;
using AttentionWeights = AttentionWeightsT<float>;

template <class S>
struct MhaP {
    AffineP<S> q, k, v, o;
    int heads = 1;
};

template <class S>
struct MhaResult {
    VarT<S> out;
    AttentionWeightsT<S> weights;
};

// Boolean mask -> additive pre-softmax mask (0 kept, -inf dropped).
template <class S>
TensorT<S> attention_mask(const std::vector<std::vector<bool>>& allowed) {
    const int tq = static_cast<int>(allowed.size());
    const int tk = static_cast<int>(allowed[0].size());
    auto m = TensorT<S>::zeros({tq, tk});
    const S ninf = -std::numeric_limits<S>::infinity();
    for (int i = 0; i < tq; ++i)
        for (int j = 0; j < tk; ++j)
            if (!allowed[static_cast<size_t>(i)][static_cast<size_t>(j)]) m.at(i, j) = ninf;
    return m;
}

template <class S>
TensorT<S> causal_mask(int n) {
    auto m = TensorT<S>::zeros({n, n});
    const S ninf = -std::numeric_limits<S>::infinity();
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m.at(i, j) = ninf;
    return m;
}

// Projected dot-product attention with per-head scaling, concatenated and
// output-projected. `mask`, when non-null, is a [Tq x Tk] additive tensor
// whose -inf entries receive exactly zero weight.
template <class S>
MhaResult<S> multi_head_attention(const MhaP<S>& p, VarT<S> q, VarT<S> k, VarT<S> v,
                                  const TensorT<S>* mask = nullptr,
                                  AttnScale scale_mode = AttnScale::SqrtDk) {
    auto& g = *q.graph;
    const int d = g.value(p.q.w).cols();
    if (d % p.heads != 0)
        throw ConfigError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                          std::to_string(p.heads) + " heads");
    const int dh = d / p.heads;
    const S scale = scale_mode == AttnScale::SqrtDk ? S(1) / std::sqrt(S(dh)) : S(1) / S(dh);

    auto qp = affine(p.q, q);
    auto kp = affine(p.k, k);
    auto vp = affine(p.v, v);
    VarT<S> mask_var{};
    if (mask != nullptr) {
        if (mask->rank() != 2 || mask->rows() != g.value(q).rows() || mask->cols() != g.value(k).rows())
            throw ShapeError("multi_head_attention: mask " + mask->shape_str() + " vs Tq=" +
                             std::to_string(g.value(q).rows()) + " Tk=" + std::to_string(g.value(k).rows()));
        mask_var = g.input(*mask);
    }

    std::vector<VarT<S>> head_ctx;
    AttentionWeightsT<S> weights;
    head_ctx.reserve(static_cast<size_t>(p.heads));
    for (int h = 0; h < p.heads; ++h) {
        auto qh = g.slice_cols(qp, h * dh, (h + 1) * dh);
        auto kh = g.slice_cols(kp, h * dh, (h + 1) * dh);
        auto vh = g.slice_cols(vp, h * dh, (h + 1) * dh);
        auto scores = g.scale(g.matmul(qh, g.transpose(kh)), scale);
        if (mask != nullptr) scores = g.add(scores, mask_var);
        auto attn = g.softmax(scores);
        weights.push_back(g.value(attn));
        head_ctx.push_back(g.matmul(attn, vh));
    }
    auto ctx = p.heads == 1 ? head_ctx[0] : g.concat_cols(head_ctx);
    return {affine(p.o, ctx), std::move(weights)};
}

template <class S>
struct AdditiveAttnP {
    VarT<S> w_h;  // [d_enc x a]
    VarT<S> w_s;  // [d_s x a]
    VarT<S> v;    // [a]
};

template <class S>
struct AdditiveAttnResult {
    VarT<S> context;       // [d_enc]
    TensorT<S> weights;    // [T]
};

// scores_t = v . tanh(W_h h_t + W_s s); context = sum_t softmax(scores)_t h_t
template <class S>
AdditiveAttnResult<S> additive_attention(const AdditiveAttnP<S>& p, VarT<S> h, VarT<S> s) {
    auto& g = *h.graph;
    if (g.value(h).rank() != 2 || g.value(h).rows() < 1)
        throw ContractError("additive_attention: encoder output must be a non-empty [T x d] matrix");
    auto hp = g.matmul(h, p.w_h);                        // [T x a]
    auto sp = g.matmul(s, p.w_s);                        // [a]
    auto scores = g.matmul(g.tanh_(g.add(hp, sp)), p.v); // [T]
    auto w = g.softmax(scores);
    auto context = g.matmul(w, h);                       // [d_enc]
    return {context, g.value(w)};
}

// ---- FFN ----------------------------------------------------------------

template <class S>
struct FfnP {
    AffineP<S> in;   // [d x ffn]
    AffineP<S> out;  // [ffn x d]
    bool double_relu = false;  // literal two-ReLU reading, off by default
};

template <class S>
VarT<S> ffn(const FfnP<S>& p, VarT<S> x) {
    auto& g = *x.graph;
    const auto& xv = g.value(x);
    const auto& wv = g.value(p.in.w);
    if (xv.last_dim() != wv.rows())
        throw ShapeError("ffn: input " + xv.shape_str() + " does not match " + wv.shape_str());
    auto y = affine(p.out, g.relu(affine(p.in, x)));
    return p.double_relu ? g.relu(y) : y;
}

// ---- positional encoding -------------------------------------------------

// Interleaved sin/cos at geometric wavelengths from 2*pi to 10000*2*pi.
template <class S>
TensorT<S> positional_encoding(int t_len, int d) {
    if (t_len < 1 || d < 1) throw ConfigError("positional_encoding: T and d must be positive");
    if (d % 2 != 0) throw ConfigError("positional_encoding: width must be even, got " + std::to_string(d));
    auto pe = TensorT<S>::zeros({t_len, d});
    for (int t = 0; t < t_len; ++t)
        for (int i = 0; i < d / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / d);
            pe.at(t, 2 * i) = static_cast<S>(std::sin(t * freq));
            pe.at(t, 2 * i + 1) = static_cast<S>(std::cos(t * freq));
        }
    return pe;
}

// ---- subsampling front-end ------------------------------------------------

template <class S>
struct FrontendP {
    AffineP<S> stage1;  // [2f x d]
    AffineP<S> stage2;  // [2d x d]
};

// Two strided affine+ReLU stages, each halving T (ceil), 4x total.
template <class S>
VarT<S> subsample_frontend(const FrontendP<S>& p, VarT<S> x) {
    auto& g = *x.graph;
    const auto& xv = g.value(x);
    if (xv.rank() != 2 || xv.rows() < 4)
        throw ContractError("subsample_frontend: need at least 4 frames, got " +
                            std::to_string(xv.rank() == 2 ? xv.rows() : 0));
    auto s1 = g.relu(affine(p.stage1, g.pair_rows(x)));
    return g.relu(affine(p.stage2, g.pair_rows(s1)));
}

}  // namespace hsq
