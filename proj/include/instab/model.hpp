#ifndef INSTAB_MODEL_HPP
#define INSTAB_MODEL_HPP

// Desk-scale decoder-only transformer: pre-norm, RoPE, grouped-query
// attention, SwiGLU, untied embeddings, no biases. Optional per-head
// QK-layernorm and a dropless top-k mixture-of-experts FFN with loss-free
// balancing and router z-loss. Forward and exact reverse-mode backward are
// templated on the scalar type; training uses float, gradient-check oracles
// instantiate double.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "instab/common.hpp"

namespace instab {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct MoEConfig {
    std::uint32_t num_experts = 16;
    std::uint32_t top_k = 2;
    double ffn_scale = 0.5;
    double expert_bias_coefficient = 1e-3;
    double router_zloss_coefficient = 1e-3;

    void validate() const {
        if (num_experts == 0) throw ConfigError("MoEConfig: num_experts must be positive");
        if (top_k == 0 || top_k > num_experts)
            throw ConfigError("MoEConfig: top_k must be in [1, num_experts]");
        if (top_k > 64) throw ConfigError("MoEConfig: top_k above 64 is unsupported");
        if (ffn_scale <= 0.0) throw ConfigError("MoEConfig: ffn_scale must be positive");
        if (expert_bias_coefficient < 0.0 || router_zloss_coefficient < 0.0)
            throw ConfigError("MoEConfig: coefficients must be nonnegative");
    }
};

struct ModelConfig {
    std::uint32_t model_dim = 32;
    std::uint32_t num_layers = 2;
    std::uint32_t num_query_heads = 2;
    std::uint32_t num_kv_heads = 1;
    std::uint32_t head_dim = 16;
    double ffn_multiplier = 4.0;
    double rope_theta = 500000.0;
    bool qk_layernorm = false;
    std::uint32_t vocab_size = 512;
    std::uint32_t mup_base_width = 256;
    std::optional<MoEConfig> moe;
    std::uint64_t seed = 0;

    std::uint32_t q_dim() const { return num_query_heads * head_dim; }
    std::uint32_t kv_dim() const { return num_kv_heads * head_dim; }
    std::uint32_t group_size() const { return num_query_heads / num_kv_heads; }

    std::uint32_t ffn_hidden_dim() const {
        double f = ffn_multiplier * static_cast<double>(model_dim);
        if (moe) f *= moe->ffn_scale;
        return static_cast<std::uint32_t>(std::llround(f));
    }

    // Output-embedding forward multiplier and hidden-layer LR scale.
    double mup_ratio() const {
        return static_cast<double>(mup_base_width) / static_cast<double>(model_dim);
    }

    void validate() const {
        if (model_dim == 0 || num_layers == 0 || vocab_size == 0 || mup_base_width == 0)
            throw ConfigError("ModelConfig: dimensions must be positive");
        if (num_query_heads * head_dim != model_dim)
            throw ConfigError("ModelConfig: num_query_heads * head_dim must equal model_dim");
        if (num_kv_heads == 0 || num_query_heads % num_kv_heads != 0)
            throw ConfigError("ModelConfig: num_query_heads must be divisible by num_kv_heads");
        if (head_dim % 2 != 0) throw ConfigError("ModelConfig: head_dim must be even for RoPE");
        if (ffn_multiplier <= 0.0) throw ConfigError("ModelConfig: ffn_multiplier must be positive");
        if (rope_theta <= 0.0) throw ConfigError("ModelConfig: rope_theta must be positive");
        if (moe) moe->validate();
    }
};

enum class TensorKind { Embedding, Hidden, OutputEmbedding, Gain, Buffer };

inline double mup_lr_multiplier(TensorKind kind, const ModelConfig& cfg) {
    switch (kind) {
        case TensorKind::Hidden:
        case TensorKind::OutputEmbedding:
            return cfg.mup_ratio();
        default:
            return 1.0;
    }
}

template <class S>
struct LayerParams {
    Vec<S> attn_norm_gain;
    Mat<S> wq, wk, wv, wo;
    Vec<S> q_gain, k_gain;  // present iff qk_layernorm
    Vec<S> ffn_norm_gain;
    Mat<S> w_gate, w_up, w_down;  // dense FFN
    Mat<S> w_router;              // [D x E]
    Vec<S> expert_bias;           // routing-only buffer, not trained
    std::vector<Mat<S>> expert_gate, expert_up, expert_down;
};

template <class S>
struct TensorRef {
    std::string name;
    S* data;
    std::size_t rows, cols;
    TensorKind kind;

    std::size_t size() const { return rows * cols; }
};

template <class S>
struct ParamSet {
    ModelConfig config;
    Mat<S> embed;  // [V x D]
    std::vector<LayerParams<S>> layers;
    Vec<S> final_norm_gain;
    Mat<S> w_out;  // [D x V]

    // Enumerates every tensor in a fixed order; optimizer state, gradients
    // and checkpoints all key off this order.
    std::vector<TensorRef<S>> tensor_refs() {
        std::vector<TensorRef<S>> refs;
        auto add = [&](const std::string& name, Mat<S>& m, TensorKind kind) {
            refs.push_back({name, m.data(), static_cast<std::size_t>(m.rows()),
                            static_cast<std::size_t>(m.cols()), kind});
        };
        auto addv = [&](const std::string& name, Vec<S>& v, TensorKind kind) {
            refs.push_back({name, v.data(), static_cast<std::size_t>(v.size()), 1, kind});
        };
        add("embed", embed, TensorKind::Embedding);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& layer = layers[l];
            std::string p = "layers." + std::to_string(l) + ".";
            addv(p + "attn_norm_gain", layer.attn_norm_gain, TensorKind::Gain);
            add(p + "wq", layer.wq, TensorKind::Hidden);
            add(p + "wk", layer.wk, TensorKind::Hidden);
            add(p + "wv", layer.wv, TensorKind::Hidden);
            add(p + "wo", layer.wo, TensorKind::Hidden);
            if (config.qk_layernorm) {
                addv(p + "q_gain", layer.q_gain, TensorKind::Gain);
                addv(p + "k_gain", layer.k_gain, TensorKind::Gain);
            }
            addv(p + "ffn_norm_gain", layer.ffn_norm_gain, TensorKind::Gain);
            if (config.moe) {
                add(p + "w_router", layer.w_router, TensorKind::Hidden);
                addv(p + "expert_bias", layer.expert_bias, TensorKind::Buffer);
                for (std::size_t e = 0; e < layer.expert_gate.size(); ++e) {
                    std::string q = p + "experts." + std::to_string(e) + ".";
                    add(q + "w_gate", layer.expert_gate[e], TensorKind::Hidden);
                    add(q + "w_up", layer.expert_up[e], TensorKind::Hidden);
                    add(q + "w_down", layer.expert_down[e], TensorKind::Hidden);
                }
            } else {
                add(p + "w_gate", layer.w_gate, TensorKind::Hidden);
                add(p + "w_up", layer.w_up, TensorKind::Hidden);
                add(p + "w_down", layer.w_down, TensorKind::Hidden);
            }
        }
        addv("final_norm_gain", final_norm_gain, TensorKind::Gain);
        add("w_out", w_out, TensorKind::OutputEmbedding);
        return refs;
    }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void fill_normal(Mat<S>& m, Rng& rng, double stddev) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = static_cast<S>(rng.next_normal() * stddev);
}

template <class S>
Mat<S> normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev) {
    Mat<S> m(rows, cols);
    fill_normal(m, rng, stddev);
    return m;
}

}  // namespace detail

// muP-flavored initialization: embeddings are width-independent O(1), hidden
// matrices are Normal(0, 1/fan_in), and the output embedding compensates its
// base/width forward multiplier so initial logits have unit scale at every
// width. At model_dim == mup_base_width everything reduces to the plain
// 1/sqrt(fan_in) scheme.
template <class S = float>
ParamSet<S> init_parameters(const ModelConfig& cfg) {
    cfg.validate();
    ParamSet<S> p;
    p.config = cfg;
    Rng rng(mix_seed(cfg.seed, "init"));
    const auto D = static_cast<Eigen::Index>(cfg.model_dim);
    const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
    const auto F = static_cast<Eigen::Index>(cfg.ffn_hidden_dim());
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim));

    p.embed = detail::normal_matrix<S>(V, D, rng, 1.0);
    p.layers.resize(cfg.num_layers);
    for (auto& layer : p.layers) {
        layer.attn_norm_gain = Vec<S>::Ones(D);
        layer.wq = detail::normal_matrix<S>(D, cfg.q_dim(), rng, inv_sqrt_d);
        layer.wk = detail::normal_matrix<S>(D, cfg.kv_dim(), rng, inv_sqrt_d);
        layer.wv = detail::normal_matrix<S>(D, cfg.kv_dim(), rng, inv_sqrt_d);
        layer.wo = detail::normal_matrix<S>(cfg.q_dim(), D, rng,
                                            1.0 / std::sqrt(static_cast<double>(cfg.q_dim())));
        if (cfg.qk_layernorm) {
            layer.q_gain = Vec<S>::Ones(cfg.head_dim);
            layer.k_gain = Vec<S>::Ones(cfg.head_dim);
        }
        layer.ffn_norm_gain = Vec<S>::Ones(D);
        if (cfg.moe) {
            layer.w_router = detail::normal_matrix<S>(D, cfg.moe->num_experts, rng, inv_sqrt_d);
            layer.expert_bias = Vec<S>::Zero(cfg.moe->num_experts);
            layer.expert_gate.resize(cfg.moe->num_experts);
            layer.expert_up.resize(cfg.moe->num_experts);
            layer.expert_down.resize(cfg.moe->num_experts);
            for (std::uint32_t e = 0; e < cfg.moe->num_experts; ++e) {
                layer.expert_gate[e] = detail::normal_matrix<S>(D, F, rng, inv_sqrt_d);
                layer.expert_up[e] = detail::normal_matrix<S>(D, F, rng, inv_sqrt_d);
                layer.expert_down[e] = detail::normal_matrix<S>(
                    F, D, rng, 1.0 / std::sqrt(static_cast<double>(F)));
            }
        } else {
            layer.w_gate = detail::normal_matrix<S>(D, F, rng, inv_sqrt_d);
            layer.w_up = detail::normal_matrix<S>(D, F, rng, inv_sqrt_d);
            layer.w_down = detail::normal_matrix<S>(F, D, rng,
                                                    1.0 / std::sqrt(static_cast<double>(F)));
        }
    }
    p.final_norm_gain = Vec<S>::Ones(D);
    // Forward multiplier base/width; init compensates so initial logits are
    // unit-scale at every width and the scheme is standard at base width.
    p.w_out = detail::normal_matrix<S>(D, V, rng, inv_sqrt_d / cfg.mup_ratio());
    return p;
}

template <class S>
ParamSet<S> zeros_like(ParamSet<S>& p) {
    ParamSet<S> g = p;
    for (auto& ref : g.tensor_refs()) std::fill(ref.data, ref.data + ref.size(), S(0));
    return g;
}

inline std::uint64_t count_parameters(const ModelConfig& cfg) {
    ModelConfig c = cfg;
    c.validate();
    std::uint64_t n = 0;
    auto p = init_parameters<float>(c);
    for (const auto& ref : p.tensor_refs())
        if (ref.kind != TensorKind::Buffer) n += ref.size();
    return n;
}

// Parameters touched per token: embeddings, attention, norms and top_k
// experts. The router is excluded by convention.
inline std::uint64_t count_active_parameters(const ModelConfig& cfg) {
    cfg.validate();
    const std::uint64_t D = cfg.model_dim, V = cfg.vocab_size, F = cfg.ffn_hidden_dim();
    std::uint64_t per_layer = D;                                       // attn norm gain
    per_layer += D * cfg.q_dim() + 2ull * D * cfg.kv_dim() + cfg.q_dim() * D;
    if (cfg.qk_layernorm) per_layer += 2ull * cfg.head_dim;
    per_layer += D;                                                    // ffn norm gain
    std::uint64_t experts_active = cfg.moe ? cfg.moe->top_k : 1;
    per_layer += experts_active * 3ull * D * F;
    return 2ull * V * D + cfg.num_layers * per_layer + D;
}

// ---------------------------------------------------------------------------
// Elementary ops
// ---------------------------------------------------------------------------

// Scaled dot-product attention logit z = <q, k> / sqrt(d_h).
template <class S>
S attention_logit(std::span<const S> q, std::span<const S> k, std::uint32_t head_dim) {
    if (q.size() != head_dim || k.size() != head_dim)
        throw ShapeError("attention_logit: vectors must have length head_dim");
    S acc = 0;
    for (std::uint32_t i = 0; i < head_dim; ++i) acc += q[i] * k[i];
    return acc / static_cast<S>(std::sqrt(static_cast<double>(head_dim)));
}

// In-place rotary embedding over one head vector at the given position.
template <class S>
void rope_rotate(S* v, std::uint32_t head_dim, std::int64_t position, double theta) {
    if (head_dim % 2 != 0) throw ConfigError("rope_rotate: head_dim must be even");
    for (std::uint32_t i = 0; i + 1 < head_dim; i += 2) {
        double freq = std::pow(theta, -static_cast<double>(i) / head_dim);
        double angle = static_cast<double>(position) * freq;
        S c = static_cast<S>(std::cos(angle)), s = static_cast<S>(std::sin(angle));
        S x0 = v[i], x1 = v[i + 1];
        v[i] = x0 * c - x1 * s;
        v[i + 1] = x0 * s + x1 * c;
    }
}

template <class S>
void rope_rotate_backward(S* dv, std::uint32_t head_dim, std::int64_t position, double theta) {
    // Rotation transpose: rotate by -angle.
    for (std::uint32_t i = 0; i + 1 < head_dim; i += 2) {
        double freq = std::pow(theta, -static_cast<double>(i) / head_dim);
        double angle = static_cast<double>(position) * freq;
        S c = static_cast<S>(std::cos(angle)), s = static_cast<S>(std::sin(angle));
        S d0 = dv[i], d1 = dv[i + 1];
        dv[i] = d0 * c + d1 * s;
        dv[i + 1] = -d0 * s + d1 * c;
    }
}

// Sequence form used by tests and external callers: rows are head vectors.
template <class S>
Mat<S> rope_apply(const Mat<S>& heads, std::span<const std::int64_t> positions, double theta) {
    if (heads.rows() != static_cast<Eigen::Index>(positions.size()))
        throw ShapeError("rope_apply: one position per row required");
    Mat<S> out = heads;
    for (Eigen::Index r = 0; r < out.rows(); ++r)
        rope_rotate(out.row(r).data(), static_cast<std::uint32_t>(out.cols()), positions[r],
                    theta);
    return out;
}

// Per-head RMS normalization with learnable gain (no epsilon; guarded rms).
template <class S>
void qk_head_normalize(S* v, const S* gain, std::uint32_t head_dim) {
    double ss = 0.0;
    for (std::uint32_t i = 0; i < head_dim; ++i) ss += static_cast<double>(v[i]) * v[i];
    auto r = static_cast<S>(std::max(std::sqrt(ss / head_dim), 1e-30));
    for (std::uint32_t i = 0; i < head_dim; ++i) v[i] = v[i] / r * gain[i];
}

// Biased top-k selection with softmax mixture weights over the unbiased
// logits of the selected experts. Biases steer routing only.
struct RouteResult {
    std::vector<std::uint32_t> experts;
    std::vector<double> weights;
    bool numeric_ok = true;
};

inline RouteResult moe_route(std::span<const double> router_logits,
                             std::span<const double> expert_biases, std::uint32_t top_k) {
    const auto n = static_cast<std::uint32_t>(router_logits.size());
    if (expert_biases.size() != n) throw ShapeError("moe_route: bias/logit length mismatch");
    if (top_k == 0 || top_k > n) throw ConfigError("moe_route: top_k out of range");
    RouteResult res;
    for (double v : router_logits)
        if (std::isnan(v)) res.numeric_ok = false;
    std::vector<std::uint32_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0u);
    if (res.numeric_ok) {
        std::partial_sort(ids.begin(), ids.begin() + top_k, ids.end(),
                          [&](std::uint32_t a, std::uint32_t b) {
                              double va = router_logits[a] + expert_biases[a];
                              double vb = router_logits[b] + expert_biases[b];
                              if (va != vb) return va > vb;
                              return a < b;
                          });
    }
    res.experts.assign(ids.begin(), ids.begin() + top_k);
    double mx = -kInf;
    for (auto e : res.experts) mx = std::max(mx, router_logits[e]);
    if (!res.numeric_ok || !std::isfinite(mx)) mx = 0.0;
    double denom = 0.0;
    res.weights.resize(top_k);
    for (std::uint32_t i = 0; i < top_k; ++i) {
        res.weights[i] = res.numeric_ok ? std::exp(router_logits[res.experts[i]] - mx) : 1.0;
        denom += res.weights[i];
    }
    for (auto& w : res.weights) w /= denom;
    return res;
}

// Loss-free balancing: nudge routing biases toward the mean load.
template <class S>
void update_expert_bias(Vec<S>& biases, std::span<const std::uint64_t> per_expert_load,
                        double coefficient) {
    if (static_cast<std::size_t>(biases.size()) != per_expert_load.size())
        throw ShapeError("update_expert_bias: load/bias length mismatch");
    double mean = 0.0;
    for (auto c : per_expert_load) mean += static_cast<double>(c);
    mean /= static_cast<double>(per_expert_load.size());
    for (Eigen::Index e = 0; e < biases.size(); ++e) {
        double load = static_cast<double>(per_expert_load[static_cast<std::size_t>(e)]);
        if (load < mean)
            biases[e] += static_cast<S>(coefficient);
        else if (load > mean)
            biases[e] -= static_cast<S>(coefficient);
    }
}

// Mean over tokens of (log sum_e exp r_{t,e})^2, before any coefficient.
template <class S>
double router_z_loss(const Mat<S>& router_logits) {
    double acc = 0.0;
    for (Eigen::Index t = 0; t < router_logits.rows(); ++t) {
        double mx = -kInf;
        for (Eigen::Index e = 0; e < router_logits.cols(); ++e)
            mx = std::max(mx, static_cast<double>(router_logits(t, e)));
        double sum = 0.0;
        for (Eigen::Index e = 0; e < router_logits.cols(); ++e)
            sum += std::exp(static_cast<double>(router_logits(t, e)) - mx);
        double lse = mx + std::log(sum);
        acc += lse * lse;
    }
    return router_logits.rows() == 0 ? 0.0 : acc / static_cast<double>(router_logits.rows());
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <class S>
struct LayerTrace {
    Mat<S> x_in;                   // [N x D] residual stream entering the layer
    Mat<S> n1;                     // post attn-norm
    Mat<S> q_pre, k_pre;           // post-RoPE, pre QK-norm (kept iff qk_layernorm)
    Mat<S> q, k, v;                // tensors entering the attention product
    std::vector<Mat<S>> probs;     // per (seq * query head): [T x T] causal rows
    Mat<S> attn_concat;            // [N x q_dim] pre output projection
    Mat<S> attn_out;               // [N x D] pre-residual
    Mat<S> x_mid;                  // x_in + attn_out
    Mat<S> n2;                     // post ffn-norm
    Mat<S> a_gate, a_up, h;        // dense FFN intermediates
    Mat<S> router_logits;          // [N x E]
    std::vector<std::vector<std::uint32_t>> token_experts;  // per token, size top_k
    Mat<S> token_weights;          // [N x top_k]
    std::vector<std::vector<std::uint32_t>> expert_tokens;  // per expert, ascending
    std::vector<Mat<S>> e_gate, e_up, e_h, e_out;           // per expert intermediates
    Mat<S> ffn_out;                // [N x D] pre-residual
    // Telemetry taps (populated only when requested).
    double max_logit = -kInf;
    std::uint32_t argmax_seq = 0, argmax_head = 0, argmax_q = 0, argmax_k = 0;
};

template <class S>
struct ForwardTrace {
    std::uint32_t batch = 0, seq_len = 0;  // N = batch * seq_len tokens
    std::vector<std::uint32_t> tokens;
    std::vector<LayerTrace<S>> layers;
    Mat<S> x_final, n_final;
    Mat<S> logits;  // [N x V]
    bool telemetry = false;
    bool numeric_ok = true;  // false once a router sees NaN logits

    std::uint32_t num_tokens() const { return batch * seq_len; }
};

namespace detail {

template <class S>
void rms_norm_rows(const Mat<S>& x, const Vec<S>& gain, Mat<S>& out, double eps = 1e-6) {
    out.resize(x.rows(), x.cols());
    const auto d = static_cast<double>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double ss = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) ss += static_cast<double>(x(r, c)) * x(r, c);
        auto inv = static_cast<S>(1.0 / std::sqrt(ss / d + eps));
        for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) * inv * gain[c];
    }
}

// dy -> dx (overwrites dx), accumulates dgain.
template <class S>
void rms_norm_rows_backward(const Mat<S>& x, const Vec<S>& gain, const Mat<S>& dy, Mat<S>& dx,
                            Vec<S>& dgain, double eps = 1e-6) {
    dx.resize(x.rows(), x.cols());
    const auto d = static_cast<double>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double ss = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) ss += static_cast<double>(x(r, c)) * x(r, c);
        double rms = std::sqrt(ss / d + eps);
        auto inv = static_cast<S>(1.0 / rms);
        S dot = 0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            dgain[c] += dy(r, c) * x(r, c) * inv;
            dot += dy(r, c) * gain[c] * x(r, c);
        }
        auto k = static_cast<S>(static_cast<double>(dot) / (d * rms * rms * rms));
        for (Eigen::Index c = 0; c < x.cols(); ++c) dx(r, c) = dy(r, c) * gain[c] * inv - x(r, c) * k;
    }
}

template <class S>
void qk_normalize_backward(const S* x, const S* gain, const S* dy, S* dx, S* dgain,
                           std::uint32_t d) {
    double ss = 0.0;
    for (std::uint32_t i = 0; i < d; ++i) ss += static_cast<double>(x[i]) * x[i];
    double rms = std::max(std::sqrt(ss / d), 1e-30);
    auto inv = static_cast<S>(1.0 / rms);
    double dot = 0.0;
    for (std::uint32_t i = 0; i < d; ++i) {
        dgain[i] += dy[i] * x[i] * inv;
        dot += static_cast<double>(dy[i]) * gain[i] * x[i];
    }
    auto k = static_cast<S>(dot / (d * rms * rms * rms));
    for (std::uint32_t i = 0; i < d; ++i) dx[i] = dy[i] * gain[i] * inv - x[i] * k;
}

template <class S>
S sigmoid(S a) {
    return S(1) / (S(1) + std::exp(-a));
}

}  // namespace detail

template <class S>
ForwardTrace<S> forward(const ParamSet<S>& params, const ModelConfig& cfg,
                        std::span<const std::uint32_t> tokens, std::uint32_t batch,
                        std::uint32_t seq_len, bool telemetry = false) {
    const auto N = static_cast<Eigen::Index>(tokens.size());
    if (tokens.size() != static_cast<std::size_t>(batch) * seq_len)
        throw ShapeError("forward: tokens.size() must equal batch * seq_len");
    const auto D = static_cast<Eigen::Index>(cfg.model_dim);
    const auto dh = cfg.head_dim;
    const auto T = static_cast<Eigen::Index>(seq_len);
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    ForwardTrace<S> tr;
    tr.batch = batch;
    tr.seq_len = seq_len;
    tr.tokens.assign(tokens.begin(), tokens.end());
    tr.telemetry = telemetry;
    tr.layers.resize(cfg.num_layers);

    Mat<S> x(N, D);
    for (Eigen::Index i = 0; i < N; ++i) {
        if (tokens[static_cast<std::size_t>(i)] >= cfg.vocab_size)
            throw DataError("forward: token id outside vocabulary");
        x.row(i) = params.embed.row(tokens[static_cast<std::size_t>(i)]);
    }

    for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
        auto& lt = tr.layers[l];
        const auto& lp = params.layers[l];
        lt.x_in = x;
        detail::rms_norm_rows(lt.x_in, lp.attn_norm_gain, lt.n1);

        lt.q.noalias() = lt.n1 * lp.wq;
        lt.k.noalias() = lt.n1 * lp.wk;
        lt.v.noalias() = lt.n1 * lp.wv;
        for (Eigen::Index i = 0; i < N; ++i) {
            std::int64_t pos = i % T;
            for (std::uint32_t h = 0; h < cfg.num_query_heads; ++h)
                rope_rotate(lt.q.row(i).data() + h * dh, dh, pos, cfg.rope_theta);
            for (std::uint32_t h = 0; h < cfg.num_kv_heads; ++h)
                rope_rotate(lt.k.row(i).data() + h * dh, dh, pos, cfg.rope_theta);
        }
        if (cfg.qk_layernorm) {
            lt.q_pre = lt.q;
            lt.k_pre = lt.k;
            for (Eigen::Index i = 0; i < N; ++i) {
                for (std::uint32_t h = 0; h < cfg.num_query_heads; ++h)
                    qk_head_normalize(lt.q.row(i).data() + h * dh, lp.q_gain.data(), dh);
                for (std::uint32_t h = 0; h < cfg.num_kv_heads; ++h)
                    qk_head_normalize(lt.k.row(i).data() + h * dh, lp.k_gain.data(), dh);
            }
        }

        lt.attn_concat.resize(N, cfg.q_dim());
        lt.probs.resize(static_cast<std::size_t>(batch) * cfg.num_query_heads);
        for (std::uint32_t b = 0; b < batch; ++b) {
            const Eigen::Index row0 = static_cast<Eigen::Index>(b) * T;
            for (std::uint32_t h = 0; h < cfg.num_query_heads; ++h) {
                const std::uint32_t kvh = h / cfg.group_size();
                auto qh = lt.q.block(row0, h * dh, T, dh);
                auto kh = lt.k.block(row0, kvh * dh, T, dh);
                auto vh = lt.v.block(row0, kvh * dh, T, dh);
                Mat<S> z(T, T);
                z.noalias() = qh * kh.transpose();
                z *= inv_sqrt_dh;
                auto& p = lt.probs[static_cast<std::size_t>(b) * cfg.num_query_heads + h];
                p = Mat<S>::Zero(T, T);
                for (Eigen::Index i = 0; i < T; ++i) {
                    S mx = z(i, 0);
                    for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, z(i, j));
                    if (telemetry) {
                        for (Eigen::Index j = 0; j <= i; ++j) {
                            if (static_cast<double>(z(i, j)) > lt.max_logit) {
                                lt.max_logit = static_cast<double>(z(i, j));
                                lt.argmax_seq = b;
                                lt.argmax_head = h;
                                lt.argmax_q = static_cast<std::uint32_t>(i);
                                lt.argmax_k = static_cast<std::uint32_t>(j);
                            }
                        }
                    }
                    S denom = 0;
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        p(i, j) = std::exp(z(i, j) - mx);
                        denom += p(i, j);
                    }
                    for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= denom;
                }
                lt.attn_concat.block(row0, h * dh, T, dh).noalias() = p * vh;
            }
        }
        lt.attn_out.noalias() = lt.attn_concat * lp.wo;
        lt.x_mid = lt.x_in + lt.attn_out;
        detail::rms_norm_rows(lt.x_mid, lp.ffn_norm_gain, lt.n2);

        if (cfg.moe) {
            const auto& mc = *cfg.moe;
            lt.router_logits.noalias() = lt.n2 * lp.w_router;
            lt.token_experts.assign(static_cast<std::size_t>(N), {});
            lt.token_weights.resize(N, mc.top_k);
            lt.expert_tokens.assign(mc.num_experts, {});
            std::vector<double> logits_d(mc.num_experts), biases_d(mc.num_experts);
            for (std::uint32_t e = 0; e < mc.num_experts; ++e)
                biases_d[e] = static_cast<double>(lp.expert_bias[e]);
            for (Eigen::Index t = 0; t < N; ++t) {
                for (std::uint32_t e = 0; e < mc.num_experts; ++e)
                    logits_d[e] = static_cast<double>(lt.router_logits(t, e));
                RouteResult route = moe_route(logits_d, biases_d, mc.top_k);
                if (!route.numeric_ok) tr.numeric_ok = false;
                lt.token_experts[static_cast<std::size_t>(t)] = route.experts;
                for (std::uint32_t i = 0; i < mc.top_k; ++i) {
                    lt.token_weights(t, i) = static_cast<S>(route.weights[i]);
                    lt.expert_tokens[route.experts[i]].push_back(static_cast<std::uint32_t>(t));
                }
            }
            lt.e_gate.resize(mc.num_experts);
            lt.e_up.resize(mc.num_experts);
            lt.e_h.resize(mc.num_experts);
            lt.e_out.resize(mc.num_experts);
            lt.ffn_out = Mat<S>::Zero(N, D);
            for (std::uint32_t e = 0; e < mc.num_experts; ++e) {
                const auto& rows = lt.expert_tokens[e];
                const auto cnt = static_cast<Eigen::Index>(rows.size());
                if (cnt == 0) continue;
                Mat<S> xe(cnt, D);
                for (Eigen::Index i = 0; i < cnt; ++i)
                    xe.row(i) = lt.n2.row(rows[static_cast<std::size_t>(i)]);
                lt.e_gate[e].noalias() = xe * lp.expert_gate[e];
                lt.e_up[e].noalias() = xe * lp.expert_up[e];
                lt.e_h[e].resize(cnt, lt.e_gate[e].cols());
                for (Eigen::Index i = 0; i < cnt; ++i)
                    for (Eigen::Index j = 0; j < lt.e_h[e].cols(); ++j) {
                        S a = lt.e_gate[e](i, j);
                        lt.e_h[e](i, j) = a * detail::sigmoid(a) * lt.e_up[e](i, j);
                    }
                lt.e_out[e].noalias() = lt.e_h[e] * lp.expert_down[e];
                for (Eigen::Index i = 0; i < cnt; ++i) {
                    const auto t = rows[static_cast<std::size_t>(i)];
                    const auto& sel = lt.token_experts[t];
                    for (std::uint32_t s = 0; s < mc.top_k; ++s)
                        if (sel[s] == e)
                            lt.ffn_out.row(t) += lt.token_weights(t, s) * lt.e_out[e].row(i);
                }
            }
        } else {
            lt.a_gate.noalias() = lt.n2 * lp.w_gate;
            lt.a_up.noalias() = lt.n2 * lp.w_up;
            lt.h.resize(N, lt.a_gate.cols());
            for (Eigen::Index i = 0; i < N; ++i)
                for (Eigen::Index j = 0; j < lt.h.cols(); ++j) {
                    S a = lt.a_gate(i, j);
                    lt.h(i, j) = a * detail::sigmoid(a) * lt.a_up(i, j);
                }
            lt.ffn_out.noalias() = lt.h * lp.w_down;
        }
        x = lt.x_mid + lt.ffn_out;
    }

    tr.x_final = x;
    detail::rms_norm_rows(tr.x_final, params.final_norm_gain, tr.n_final);
    tr.logits.noalias() = tr.n_final * params.w_out;
    tr.logits *= static_cast<S>(cfg.mup_ratio());
    return tr;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <class S>
struct BackwardResult {
    ParamSet<S> grads;
    double ce_loss = 0.0;      // mean nats/token over active targets
    double z_loss = 0.0;       // sum over MoE layers of per-layer token means
    std::uint64_t num_targets = 0;
};

// Reverse-mode gradients of mean cross-entropy plus coefficient * router
// z-loss. `target_active[i] == 0` excludes position i from the loss (used for
// the final position of each packed sequence). Top-k expert selection is not
// differentiated; gradients flow through the restricted softmax weights only.
template <class S>
BackwardResult<S> backward(ParamSet<S>& params, const ModelConfig& cfg,
                           const ForwardTrace<S>& tr, std::span<const std::uint32_t> targets,
                           std::span<const std::uint8_t> target_active, double zloss_coeff) {
    const auto N = static_cast<Eigen::Index>(tr.num_tokens());
    if (targets.size() != static_cast<std::size_t>(N) ||
        target_active.size() != static_cast<std::size_t>(N))
        throw ShapeError("backward: targets/target_active must cover every position");
    const auto D = static_cast<Eigen::Index>(cfg.model_dim);
    const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
    const auto dh = cfg.head_dim;
    const auto T = static_cast<Eigen::Index>(tr.seq_len);
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    BackwardResult<S> out;
    out.grads = zeros_like(params);
    auto& g = out.grads;

    std::uint64_t m = 0;
    for (Eigen::Index i = 0; i < N; ++i)
        if (target_active[static_cast<std::size_t>(i)]) ++m;
    out.num_targets = m;

    // Cross-entropy and dlogits.
    Mat<S> dlogits = Mat<S>::Zero(N, V);
    const S inv_m = m > 0 ? static_cast<S>(1.0 / static_cast<double>(m)) : S(0);
    double loss_acc = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
        if (!target_active[static_cast<std::size_t>(i)]) continue;
        const auto y = targets[static_cast<std::size_t>(i)];
        if (y >= cfg.vocab_size) throw DataError("backward: target id outside vocabulary");
        S mx = tr.logits.row(i).maxCoeff();
        S denom = 0;
        for (Eigen::Index j = 0; j < V; ++j) denom += std::exp(tr.logits(i, j) - mx);
        loss_acc += -static_cast<double>(tr.logits(i, y) - mx) + std::log(static_cast<double>(denom));
        for (Eigen::Index j = 0; j < V; ++j)
            dlogits(i, j) = std::exp(tr.logits(i, j) - mx) / denom * inv_m;
        dlogits(i, y) -= inv_m;
    }
    out.ce_loss = m > 0 ? loss_acc / static_cast<double>(m) : 0.0;

    const auto mup = static_cast<S>(cfg.mup_ratio());
    g.w_out.noalias() = tr.n_final.transpose() * dlogits * mup;
    Mat<S> dn_final = dlogits * params.w_out.transpose() * mup;
    Mat<S> dx(N, D);
    detail::rms_norm_rows_backward(tr.x_final, params.final_norm_gain, dn_final, dx,
                                   g.final_norm_gain);

    for (std::int64_t l = static_cast<std::int64_t>(cfg.num_layers) - 1; l >= 0; --l) {
        const auto& lt = tr.layers[static_cast<std::size_t>(l)];
        const auto& lp = params.layers[static_cast<std::size_t>(l)];
        auto& lg = g.layers[static_cast<std::size_t>(l)];

        // FFN branch. dx currently holds d(x_next) = d(x_mid) + d(ffn_out).
        Mat<S> dn2 = Mat<S>::Zero(N, D);
        if (cfg.moe) {
            const auto& mc = *cfg.moe;
            Mat<S> dr = Mat<S>::Zero(N, mc.num_experts);
            // z-loss term on the full router logits.
            if (zloss_coeff != 0.0) {
                double layer_z = 0.0;
                for (Eigen::Index t = 0; t < N; ++t) {
                    S mx = lt.router_logits.row(t).maxCoeff();
                    S denom = 0;
                    for (Eigen::Index e = 0; e < lt.router_logits.cols(); ++e)
                        denom += std::exp(lt.router_logits(t, e) - mx);
                    S lse = mx + std::log(denom);
                    layer_z += static_cast<double>(lse) * static_cast<double>(lse);
                    const auto scale =
                        static_cast<S>(zloss_coeff * 2.0 * static_cast<double>(lse) /
                                       static_cast<double>(N));
                    for (Eigen::Index e = 0; e < lt.router_logits.cols(); ++e)
                        dr(t, e) += scale * std::exp(lt.router_logits(t, e) - mx) / denom;
                }
                out.z_loss += layer_z / static_cast<double>(N);
            } else {
                out.z_loss += router_z_loss(lt.router_logits);
            }
            for (std::uint32_t e = 0; e < mc.num_experts; ++e) {
                const auto& rows = lt.expert_tokens[e];
                const auto cnt = static_cast<Eigen::Index>(rows.size());
                if (cnt == 0) continue;
                const auto F = lt.e_gate[e].cols();
                Mat<S> dout(cnt, D);
                for (Eigen::Index i = 0; i < cnt; ++i) {
                    const auto t = rows[static_cast<std::size_t>(i)];
                    const auto& sel = lt.token_experts[t];
                    S w = 0;
                    for (std::uint32_t s = 0; s < mc.top_k; ++s)
                        if (sel[s] == e) w = lt.token_weights(t, s);
                    dout.row(i) = w * dx.row(static_cast<Eigen::Index>(t));
                }
                Mat<S> dh_e = dout * lp.expert_down[e].transpose();
                lg.expert_down[e].noalias() = lt.e_h[e].transpose() * dout;
                Mat<S> da_gate(cnt, F), da_up(cnt, F);
                for (Eigen::Index i = 0; i < cnt; ++i)
                    for (Eigen::Index j = 0; j < F; ++j) {
                        S a = lt.e_gate[e](i, j);
                        S sig = detail::sigmoid(a);
                        S silu = a * sig;
                        da_up(i, j) = dh_e(i, j) * silu;
                        da_gate(i, j) =
                            dh_e(i, j) * lt.e_up[e](i, j) * sig * (S(1) + a * (S(1) - sig));
                    }
                Mat<S> xe(cnt, D);
                for (Eigen::Index i = 0; i < cnt; ++i)
                    xe.row(i) = lt.n2.row(rows[static_cast<std::size_t>(i)]);
                lg.expert_gate[e].noalias() = xe.transpose() * da_gate;
                lg.expert_up[e].noalias() = xe.transpose() * da_up;
                Mat<S> dxe = da_gate * lp.expert_gate[e].transpose();
                dxe.noalias() += da_up * lp.expert_up[e].transpose();
                for (Eigen::Index i = 0; i < cnt; ++i)
                    dn2.row(rows[static_cast<std::size_t>(i)]) += dxe.row(i);
            }
            // Mixture-weight path through the restricted softmax.
            for (Eigen::Index t = 0; t < N; ++t) {
                const auto& sel = lt.token_experts[static_cast<std::size_t>(t)];
                std::array<S, 64> dp{};
                S wdp = 0;
                for (std::uint32_t s = 0; s < mc.top_k; ++s) {
                    const auto e = sel[s];
                    const auto& rows = lt.expert_tokens[e];
                    const auto it = std::lower_bound(rows.begin(), rows.end(),
                                                     static_cast<std::uint32_t>(t));
                    const auto local = static_cast<Eigen::Index>(it - rows.begin());
                    dp[s] = dx.row(t).dot(lt.e_out[e].row(local));
                    wdp += lt.token_weights(t, s) * dp[s];
                }
                for (std::uint32_t s = 0; s < mc.top_k; ++s)
                    dr(t, static_cast<Eigen::Index>(sel[s])) +=
                        lt.token_weights(t, s) * (dp[s] - wdp);
            }
            lg.w_router.noalias() = lt.n2.transpose() * dr;
            dn2.noalias() += dr * lp.w_router.transpose();
        } else {
            Mat<S> dh_m = dx * lp.w_down.transpose();
            lg.w_down.noalias() = lt.h.transpose() * dx;
            const auto F = lt.a_gate.cols();
            Mat<S> da_gate(N, F), da_up(N, F);
            for (Eigen::Index i = 0; i < N; ++i)
                for (Eigen::Index j = 0; j < F; ++j) {
                    S a = lt.a_gate(i, j);
                    S sig = detail::sigmoid(a);
                    da_up(i, j) = dh_m(i, j) * a * sig;
                    da_gate(i, j) = dh_m(i, j) * lt.a_up(i, j) * sig * (S(1) + a * (S(1) - sig));
                }
            lg.w_gate.noalias() = lt.n2.transpose() * da_gate;
            lg.w_up.noalias() = lt.n2.transpose() * da_up;
            dn2.noalias() = da_gate * lp.w_gate.transpose();
            dn2.noalias() += da_up * lp.w_up.transpose();
        }
        Mat<S> dx_mid_ffn(N, D);
        detail::rms_norm_rows_backward(lt.x_mid, lp.ffn_norm_gain, dn2, dx_mid_ffn,
                                       lg.ffn_norm_gain);
        Mat<S> dx_mid = dx + dx_mid_ffn;

        // Attention branch. d(attn_out) = dx_mid.
        Mat<S> dattn_concat = dx_mid * lp.wo.transpose();
        lg.wo.noalias() = lt.attn_concat.transpose() * dx_mid;
        Mat<S> dq = Mat<S>::Zero(N, cfg.q_dim());
        Mat<S> dk = Mat<S>::Zero(N, cfg.kv_dim());
        Mat<S> dv = Mat<S>::Zero(N, cfg.kv_dim());
        for (std::uint32_t b = 0; b < tr.batch; ++b) {
            const Eigen::Index row0 = static_cast<Eigen::Index>(b) * T;
            for (std::uint32_t h = 0; h < cfg.num_query_heads; ++h) {
                const std::uint32_t kvh = h / cfg.group_size();
                const auto& p = lt.probs[static_cast<std::size_t>(b) * cfg.num_query_heads + h];
                auto qh = lt.q.block(row0, h * dh, T, dh);
                auto kh = lt.k.block(row0, kvh * dh, T, dh);
                auto vh = lt.v.block(row0, kvh * dh, T, dh);
                auto dout_h = dattn_concat.block(row0, h * dh, T, dh);
                Mat<S> dprobs(T, T);
                dprobs.noalias() = dout_h * vh.transpose();
                dv.block(row0, kvh * dh, T, dh).noalias() += p.transpose() * dout_h;
                Mat<S> dz = Mat<S>::Zero(T, T);
                for (Eigen::Index i = 0; i < T; ++i) {
                    S dot = 0;
                    for (Eigen::Index j = 0; j <= i; ++j) dot += dprobs(i, j) * p(i, j);
                    for (Eigen::Index j = 0; j <= i; ++j)
                        dz(i, j) = p(i, j) * (dprobs(i, j) - dot);
                }
                dq.block(row0, h * dh, T, dh).noalias() += dz * kh * inv_sqrt_dh;
                dk.block(row0, kvh * dh, T, dh).noalias() += dz.transpose() * qh * inv_sqrt_dh;
            }
        }
        if (cfg.qk_layernorm) {
            Mat<S> dq_pre(N, cfg.q_dim()), dk_pre(N, cfg.kv_dim());
            for (Eigen::Index i = 0; i < N; ++i) {
                for (std::uint32_t h = 0; h < cfg.num_query_heads; ++h)
                    detail::qk_normalize_backward(lt.q_pre.row(i).data() + h * dh,
                                                  lp.q_gain.data(), dq.row(i).data() + h * dh,
                                                  dq_pre.row(i).data() + h * dh,
                                                  lg.q_gain.data(), dh);
                for (std::uint32_t h = 0; h < cfg.num_kv_heads; ++h)
                    detail::qk_normalize_backward(lt.k_pre.row(i).data() + h * dh,
                                                  lp.k_gain.data(), dk.row(i).data() + h * dh,
                                                  dk_pre.row(i).data() + h * dh,
                                                  lg.k_gain.data(), dh);
            }
            dq = std::move(dq_pre);
            dk = std::move(dk_pre);
        }
        for (Eigen::Index i = 0; i < N; ++i) {
            std::int64_t pos = i % T;
            for (std::uint32_t h = 0; h < cfg.num_query_heads; ++h)
                rope_rotate_backward(dq.row(i).data() + h * dh, dh, pos, cfg.rope_theta);
            for (std::uint32_t h = 0; h < cfg.num_kv_heads; ++h)
                rope_rotate_backward(dk.row(i).data() + h * dh, dh, pos, cfg.rope_theta);
        }
        lg.wq.noalias() = lt.n1.transpose() * dq;
        lg.wk.noalias() = lt.n1.transpose() * dk;
        lg.wv.noalias() = lt.n1.transpose() * dv;
        Mat<S> dn1 = dq * lp.wq.transpose();
        dn1.noalias() += dk * lp.wk.transpose();
        dn1.noalias() += dv * lp.wv.transpose();
        Mat<S> dx_in_attn(N, D);
        detail::rms_norm_rows_backward(lt.x_in, lp.attn_norm_gain, dn1, dx_in_attn,
                                       lg.attn_norm_gain);
        dx = dx_mid + dx_in_attn;
    }

    for (Eigen::Index i = 0; i < N; ++i)
        g.embed.row(tr.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    return out;
}

}  // namespace instab

#endif  // INSTAB_MODEL_HPP
