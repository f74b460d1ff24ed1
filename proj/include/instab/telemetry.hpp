#ifndef INSTAB_TELEMETRY_HPP
#define INSTAB_TELEMETRY_HPP

// Activation and parameter statistics used to separate failure modes:
// max attention logits, parameter/gradient RMS norms, pre-residual activation
// absolute means, Q/K norms with the argmax-pair cosine, and per-expert
// routing statistics. All reductions accumulate in double.

#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "instab/model.hpp"

namespace instab {

struct QKStat {
    double mean_q_norm = 0.0;
    double mean_k_norm = 0.0;
    // Decomposition of the layer's max logit: z * sqrt(d_h) = |q||k| cos.
    double argmax_q_norm = 0.0;
    double argmax_k_norm = 0.0;
    double argmax_cos = 0.0;
    // Largest |gain| entries when QK-layernorm is enabled (0 otherwise); the
    // layer's logits are bounded by sqrt(d_h) * max_q_gain * max_k_gain.
    double max_abs_q_gain = 0.0;
    double max_abs_k_gain = 0.0;
};

struct ExpertStat {
    std::uint32_t layer = 0;
    std::uint32_t expert = 0;
    std::uint64_t token_count = 0;
    double noisy_fraction = 0.0;
    double ffn_out_absmean = 0.0;
};

struct TelemetrySnapshot {
    std::uint32_t step = 0;
    double max_attention_logit = 0.0;
    std::vector<double> per_layer_max_logit;
    double param_rms = 0.0;
    std::map<std::string, double> param_rms_per_tensor;
    double grad_rms = 0.0;
    std::vector<double> layer_input_absmean;
    std::vector<double> attn_out_absmean;
    std::vector<double> ffn_out_absmean;
    std::vector<QKStat> qk_stats;
    std::vector<ExpertStat> expert_stats;  // empty for dense models
};

template <class S>
std::pair<double, std::vector<double>> max_attention_logit(const ForwardTrace<S>& trace) {
    if (!trace.telemetry)
        throw DiagnosticError("max_attention_logit: trace captured without telemetry");
    std::vector<double> per_layer;
    per_layer.reserve(trace.layers.size());
    double global = -kInf;
    for (const auto& lt : trace.layers) {
        per_layer.push_back(lt.max_logit);
        global = std::max(global, lt.max_logit);
    }
    return {global, per_layer};
}

template <class S>
std::pair<double, std::map<std::string, double>> param_rms(ParamSet<S>& params) {
    std::map<std::string, double> per_tensor;
    double sum_sq = 0.0;
    std::uint64_t count = 0;
    for (const auto& ref : params.tensor_refs()) {
        if (ref.kind == TensorKind::Buffer) continue;
        double ss = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) {
            double v = static_cast<double>(ref.data[i]);
            ss += v * v;
        }
        per_tensor[ref.name] = std::sqrt(ss / static_cast<double>(ref.size()));
        sum_sq += ss;
        count += ref.size();
    }
    return {std::sqrt(sum_sq / static_cast<double>(count)), std::move(per_tensor)};
}

namespace detail {

template <class S>
double absmean(const Mat<S>& m) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) acc += std::abs(static_cast<double>(m(i, j)));
    return m.size() == 0 ? 0.0 : acc / static_cast<double>(m.size());
}

template <class S>
double head_norm(const S* v, std::uint32_t d) {
    double ss = 0.0;
    for (std::uint32_t i = 0; i < d; ++i) ss += static_cast<double>(v[i]) * v[i];
    return std::sqrt(ss);
}

}  // namespace detail

struct ActivationAbsmeans {
    std::vector<double> layer_input;
    std::vector<double> attn_out;  // pre-residual
    std::vector<double> ffn_out;   // pre-residual
};

template <class S>
ActivationAbsmeans activation_absmeans(const ForwardTrace<S>& trace) {
    ActivationAbsmeans out;
    for (const auto& lt : trace.layers) {
        out.layer_input.push_back(detail::absmean(lt.x_in));
        out.attn_out.push_back(detail::absmean(lt.attn_out));
        out.ffn_out.push_back(detail::absmean(lt.ffn_out));
    }
    return out;
}

// Per (layer, expert): routed token count, fraction of routed tokens that are
// noise, and the absolute mean of that expert's FFN output over its batch.
template <class S>
std::vector<ExpertStat> expert_batch_stats(const ForwardTrace<S>& trace,
                                           std::span<const std::uint8_t> noise_mask) {
    if (noise_mask.size() != trace.num_tokens())
        throw ShapeError("expert_batch_stats: noise mask must cover the monitoring batch");
    std::vector<ExpertStat> stats;
    for (std::uint32_t l = 0; l < trace.layers.size(); ++l) {
        const auto& lt = trace.layers[l];
        if (lt.expert_tokens.empty()) continue;
        for (std::uint32_t e = 0; e < lt.expert_tokens.size(); ++e) {
            const auto& rows = lt.expert_tokens[e];
            ExpertStat st;
            st.layer = l;
            st.expert = e;
            st.token_count = rows.size();
            if (!rows.empty()) {
                std::uint64_t noisy = 0;
                for (auto t : rows) noisy += noise_mask[t];
                st.noisy_fraction = static_cast<double>(noisy) / static_cast<double>(rows.size());
                st.ffn_out_absmean = detail::absmean(lt.e_out[e]);
            }
            stats.push_back(st);
        }
    }
    return stats;
}

template <class S>
std::vector<QKStat> qk_statistics(const ForwardTrace<S>& trace, const ModelConfig& cfg) {
    if (!trace.telemetry)
        throw DiagnosticError("qk_statistics: trace captured without telemetry");
    std::vector<QKStat> out;
    const auto dh = cfg.head_dim;
    const auto T = static_cast<Eigen::Index>(trace.seq_len);
    for (const auto& lt : trace.layers) {
        QKStat st;
        double qacc = 0.0, kacc = 0.0;
        for (Eigen::Index i = 0; i < lt.q.rows(); ++i) {
            for (std::uint32_t h = 0; h < cfg.num_query_heads; ++h)
                qacc += detail::head_norm(lt.q.row(i).data() + h * dh, dh);
            for (std::uint32_t h = 0; h < cfg.num_kv_heads; ++h)
                kacc += detail::head_norm(lt.k.row(i).data() + h * dh, dh);
        }
        st.mean_q_norm = qacc / static_cast<double>(lt.q.rows() * cfg.num_query_heads);
        st.mean_k_norm = kacc / static_cast<double>(lt.k.rows() * cfg.num_kv_heads);
        const Eigen::Index row0 = static_cast<Eigen::Index>(lt.argmax_seq) * T;
        const std::uint32_t kvh = lt.argmax_head / cfg.group_size();
        const S* qv = lt.q.row(row0 + lt.argmax_q).data() + lt.argmax_head * dh;
        const S* kv = lt.k.row(row0 + lt.argmax_k).data() + kvh * dh;
        st.argmax_q_norm = detail::head_norm(qv, dh);
        st.argmax_k_norm = detail::head_norm(kv, dh);
        double dot = 0.0;
        for (std::uint32_t i = 0; i < dh; ++i)
            dot += static_cast<double>(qv[i]) * static_cast<double>(kv[i]);
        double denom = st.argmax_q_norm * st.argmax_k_norm;
        st.argmax_cos = denom > 0.0 ? dot / denom : 0.0;
        out.push_back(st);
    }
    return out;
}

// grad_rms is passed in by the trainer (it owns the step's gradients).
template <class S>
TelemetrySnapshot make_snapshot(const ForwardTrace<S>& trace, ParamSet<S>& params,
                                const ModelConfig& cfg, std::uint32_t step, double grad_rms,
                                std::span<const std::uint8_t> noise_mask) {
    TelemetrySnapshot snap;
    snap.step = step;
    auto [global, per_layer] = max_attention_logit(trace);
    snap.max_attention_logit = global;
    snap.per_layer_max_logit = std::move(per_layer);
    auto [prms, per_tensor] = param_rms(params);
    snap.param_rms = prms;
    snap.param_rms_per_tensor = std::move(per_tensor);
    snap.grad_rms = grad_rms;
    auto act = activation_absmeans(trace);
    snap.layer_input_absmean = std::move(act.layer_input);
    snap.attn_out_absmean = std::move(act.attn_out);
    snap.ffn_out_absmean = std::move(act.ffn_out);
    snap.qk_stats = qk_statistics(trace, cfg);
    if (cfg.qk_layernorm) {
        for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
            snap.qk_stats[l].max_abs_q_gain =
                static_cast<double>(params.layers[l].q_gain.cwiseAbs().maxCoeff());
            snap.qk_stats[l].max_abs_k_gain =
                static_cast<double>(params.layers[l].k_gain.cwiseAbs().maxCoeff());
        }
    }
    if (cfg.moe) snap.expert_stats = expert_batch_stats(trace, noise_mask);
    return snap;
}

inline std::string expert_stats_csv(const std::vector<ExpertStat>& stats) {
    std::string out = "layer,expert,token_count,noisy_fraction,ffn_out_absmean\n";
    char line[160];
    for (const auto& st : stats) {
        std::snprintf(line, sizeof(line), "%u,%u,%llu,%.17g,%.17g\n", st.layer, st.expert,
                      static_cast<unsigned long long>(st.token_count), st.noisy_fraction,
                      st.ffn_out_absmean);
        out += line;
    }
    return out;
}

}  // namespace instab

#endif  // INSTAB_TELEMETRY_HPP
