#ifndef INSTAB_TRAINER_HPP
#define INSTAB_TRAINER_HPP

// Single seeded pretraining run: AdamW with decoupled weight decay and muP
// per-tensor LR multipliers, global-norm clipping, linear warmup + cosine
// decay over a schedule horizon that may exceed the run length, next-token
// cross-entropy with a clean-token evaluation variant, and per-step records.

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "instab/corpus.hpp"
#include "instab/model.hpp"
#include "instab/stability.hpp"
#include "instab/telemetry.hpp"

namespace instab {

struct TrainConfig {
    double peak_lr = 3e-3;
    std::uint32_t warmup_steps = 30;
    std::uint32_t total_steps = 300;
    double min_lr_ratio = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double epsilon = 1e-8;
    double weight_decay = 1e-4;
    double clip_norm = 1.0;
    std::uint32_t batch_tokens = 1024;
    std::uint32_t seq_len = 64;
    std::uint64_t seed = 0;
    std::set<std::uint32_t> telemetry_steps;
    // The cosine schedule is laid out over this horizon and the run is
    // truncated at total_steps, mirroring a long-schedule regime.
    std::uint32_t schedule_horizon_steps = 3000;

    void validate() const {
        if (peak_lr <= 0.0) throw ConfigError("TrainConfig: peak_lr must be positive");
        if (total_steps == 0 && warmup_steps > 0)
            throw ConfigError("TrainConfig: warmup without steps");
        if (warmup_steps >= schedule_horizon_steps)
            throw ConfigError("TrainConfig: warmup_steps must be < schedule_horizon_steps");
        if (!(min_lr_ratio > 0.0 && min_lr_ratio <= 1.0))
            throw ConfigError("TrainConfig: min_lr_ratio must be in (0, 1]");
        if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
            throw ConfigError("TrainConfig: betas must be in (0, 1)");
        if (epsilon <= 0.0) throw ConfigError("TrainConfig: epsilon must be positive");
        if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
        if (clip_norm <= 0.0) throw ConfigError("TrainConfig: clip_norm must be positive");
        if (seq_len < 2) throw ConfigError("TrainConfig: seq_len must be >= 2");
        if (batch_tokens == 0 || batch_tokens % seq_len != 0)
            throw ConfigError("TrainConfig: batch_tokens must be a positive multiple of seq_len");
    }
};

inline double lr_at_step(std::uint32_t step, const TrainConfig& cfg) {
    const double min_lr = cfg.min_lr_ratio * cfg.peak_lr;
    if (step < cfg.warmup_steps)
        return cfg.peak_lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    if (step >= cfg.schedule_horizon_steps) return min_lr;
    const double t = static_cast<double>(step - cfg.warmup_steps) /
                     static_cast<double>(cfg.schedule_horizon_steps - cfg.warmup_steps);
    return min_lr + (cfg.peak_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// Scales all gradients to clip_norm when the global L2 norm exceeds it.
// Returns the pre-clip norm (telemetry source); a non-finite norm leaves the
// gradients untouched and signals a failed step to the caller.
template <class S>
double clip_gradients(ParamSet<S>& grads, double clip_norm) {
    double sum_sq = 0.0;
    for (const auto& ref : grads.tensor_refs()) {
        if (ref.kind == TensorKind::Buffer) continue;
        for (std::size_t i = 0; i < ref.size(); ++i) {
            double v = static_cast<double>(ref.data[i]);
            sum_sq += v * v;
        }
    }
    double norm = std::sqrt(sum_sq);
    if (!std::isfinite(norm)) return norm;
    if (norm > clip_norm) {
        auto scale = static_cast<S>(clip_norm / norm);
        for (const auto& ref : grads.tensor_refs()) {
            if (ref.kind == TensorKind::Buffer) continue;
            for (std::size_t i = 0; i < ref.size(); ++i) ref.data[i] *= scale;
        }
    }
    return norm;
}

template <class S>
struct AdamState {
    std::vector<std::vector<S>> m, v;

    template <class P>
    explicit AdamState(P& params) {
        for (const auto& ref : params.tensor_refs()) {
            m.emplace_back(ref.size(), S(0));
            v.emplace_back(ref.size(), S(0));
        }
    }
};

// Bias-corrected AdamW update, step is 1-based. The adaptive term uses the
// muP per-tensor LR multiplier; decoupled weight decay uses the scheduled LR
// alone so every parameter shrinks by exactly (1 - lr * wd) under zero
// gradients.
template <class S>
void adamw_step(ParamSet<S>& params, ParamSet<S>& grads, AdamState<S>& state, std::uint64_t step,
                double lr, const TrainConfig& cfg, const ModelConfig& model_cfg) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    auto prefs = params.tensor_refs();
    auto grefs = grads.tensor_refs();
    for (std::size_t t = 0; t < prefs.size(); ++t) {
        if (prefs[t].kind == TensorKind::Buffer) continue;
        const auto lr_eff = static_cast<S>(lr * mup_lr_multiplier(prefs[t].kind, model_cfg));
        const auto decay = static_cast<S>(lr * cfg.weight_decay);
        const auto b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
        const auto eps = static_cast<S>(cfg.epsilon);
        S* p = prefs[t].data;
        const S* g = grefs[t].data;
        S* m = state.m[t].data();
        S* v = state.v[t].data();
        for (std::size_t i = 0; i < prefs[t].size(); ++i) {
            m[i] = b1 * m[i] + (S(1) - b1) * g[i];
            v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
            const auto mhat = static_cast<S>(static_cast<double>(m[i]) / bc1);
            const auto vhat = static_cast<S>(static_cast<double>(v[i]) / bc2);
            p[i] -= decay * p[i];
            p[i] -= lr_eff * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// Mean negative log-likelihood in nats/token over positions where `mask` is
// true (all positions when absent). Returns nullopt when no position
// survives the mask.
template <class S>
std::optional<double> cross_entropy_loss(const Mat<S>& logits,
                                         std::span<const std::uint32_t> targets,
                                         std::span<const std::uint8_t> mask = {}) {
    if (targets.size() != static_cast<std::size_t>(logits.rows()))
        throw ShapeError("cross_entropy_loss: one target per logit row required");
    if (!mask.empty() && mask.size() != targets.size())
        throw ShapeError("cross_entropy_loss: mask length mismatch");
    double acc = 0.0;
    std::uint64_t count = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        if (!mask.empty() && !mask[static_cast<std::size_t>(i)]) continue;
        const auto y = targets[static_cast<std::size_t>(i)];
        if (y >= static_cast<std::uint32_t>(logits.cols()))
            throw DataError("cross_entropy_loss: target outside vocabulary");
        S mx = logits.row(i).maxCoeff();
        S denom = 0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) denom += std::exp(logits(i, j) - mx);
        acc += -static_cast<double>(logits(i, y) - mx) + std::log(static_cast<double>(denom));
        ++count;
    }
    if (count == 0) return std::nullopt;
    return acc / static_cast<double>(count);
}

struct StepRecord {
    std::uint32_t step = 0;
    double train_loss = 0.0;  // +inf sentinel for numerically failed steps
    std::optional<double> clean_token_loss;
    double lr = 0.0;
    double grad_norm_preclip = 0.0;
    std::optional<TelemetrySnapshot> telemetry;
};

struct RunLog {
    std::string run_id;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string resolved_config_json;  // verbatim JSON text for the header line
    std::vector<StepRecord> records;
    bool truncated_early = false;
    std::optional<std::uint32_t> halt_trigger_step;

    std::vector<double> loss_series() const {
        std::vector<double> out;
        out.reserve(records.size());
        for (const auto& r : records) out.push_back(r.train_loss);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Data pipeline: documents are shuffled by the data seed, concatenated with a
// separator token and cut into seq_len training sequences. The monitoring
// batch is packed from trailing documents reserved before the shuffle, so it
// is held out and identical across seeds of the same corpus.
// ---------------------------------------------------------------------------

struct PackedStream {
    std::vector<std::uint32_t> tokens;
    std::vector<std::uint8_t> noise_mask;
};

inline std::uint32_t separator_token(std::uint32_t vocab_size) { return vocab_size - 1; }

namespace detail {

inline void append_doc(PackedStream& s, const MaskedTokenSequence& doc, std::uint32_t sep) {
    s.tokens.push_back(sep);
    s.noise_mask.push_back(0);
    s.tokens.insert(s.tokens.end(), doc.tokens.begin(), doc.tokens.end());
    s.noise_mask.insert(s.noise_mask.end(), doc.noise_mask.begin(), doc.noise_mask.end());
}

}  // namespace detail

struct TrainData {
    PackedStream train;    // >= total_steps * batch_tokens tokens
    PackedStream monitor;  // exactly batch_tokens tokens
};

inline TrainData prepare_train_data(const Corpus& corpus, const ModelConfig& model_cfg,
                                    const TrainConfig& train_cfg) {
    const std::uint32_t sep = separator_token(model_cfg.vocab_size);
    const std::uint64_t need_train =
        static_cast<std::uint64_t>(train_cfg.total_steps) * train_cfg.batch_tokens;

    // Reserve trailing documents for the monitoring batch.
    std::uint64_t monitor_tokens = 0;
    std::size_t split = corpus.size();
    while (split > 0 && monitor_tokens < train_cfg.batch_tokens) {
        --split;
        monitor_tokens += corpus[split].size() + 1;
    }
    if (monitor_tokens < train_cfg.batch_tokens)
        throw ConfigError("prepare_train_data: corpus too small for the monitoring batch");

    TrainData data;
    for (std::size_t d = split; d < corpus.size(); ++d)
        detail::append_doc(data.monitor, corpus[d], sep);
    data.monitor.tokens.resize(train_cfg.batch_tokens);
    data.monitor.noise_mask.resize(train_cfg.batch_tokens);

    std::vector<std::uint32_t> order(split);
    std::iota(order.begin(), order.end(), 0u);
    Rng rng(mix_seed(train_cfg.seed, "data-shuffle"));
    for (std::size_t i = split; i > 1; --i) {
        auto j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(order[i - 1], order[j]);
    }
    data.train.tokens.reserve(need_train + train_cfg.batch_tokens);
    for (std::uint32_t d : order) {
        detail::append_doc(data.train, corpus[d], sep);
        if (data.train.tokens.size() >= need_train) break;
    }
    if (data.train.tokens.size() < need_train)
        throw ConfigError(
            "prepare_train_data: corpus exhausted; needs " + std::to_string(need_train) +
            " training tokens but documents supply " + std::to_string(data.train.tokens.size()));
    return data;
}

// ---------------------------------------------------------------------------
// train_run
// ---------------------------------------------------------------------------

struct TrainRunOptions {
    // When set, the run halts window_steps after a divergence trigger.
    std::optional<DivergenceCriterion> halt_criterion;
    // Keeps a triggered run alive through at least this many steps so late
    // telemetry probes still happen (the harness sets probe_step + 1).
    std::uint32_t min_steps_before_halt = 0;
};

template <class S = float>
RunLog train_run(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Corpus& corpus,
                 const TrainRunOptions& opts = {}) {
    model_cfg.validate();
    train_cfg.validate();
    RunLog log;
    log.seed = train_cfg.seed;
    if (train_cfg.total_steps == 0) return log;

    TrainData data = prepare_train_data(corpus, model_cfg, train_cfg);
    const std::uint32_t batch = train_cfg.batch_tokens / train_cfg.seq_len;
    const std::uint32_t T = train_cfg.seq_len;
    const std::uint32_t BT = train_cfg.batch_tokens;

    ModelConfig run_model_cfg = model_cfg;
    run_model_cfg.seed = mix_seed(train_cfg.seed, "model-init");
    ParamSet<S> params = init_parameters<S>(run_model_cfg);
    AdamState<S> adam(params);
    const double num_params = static_cast<double>(count_parameters(model_cfg));
    const double zcoeff = model_cfg.moe ? model_cfg.moe->router_zloss_coefficient : 0.0;

    std::optional<RunningDivergenceDetector> detector;
    if (opts.halt_criterion) detector.emplace(*opts.halt_criterion);

    std::vector<std::uint32_t> targets(BT);
    std::vector<std::uint8_t> active(BT), clean_target(BT);
    for (std::uint32_t step = 0; step < train_cfg.total_steps; ++step) {
        const std::uint64_t off = static_cast<std::uint64_t>(step) * BT;
        std::span<const std::uint32_t> tokens(data.train.tokens.data() + off, BT);
        for (std::uint32_t b = 0; b < batch; ++b) {
            for (std::uint32_t t = 0; t < T; ++t) {
                const std::uint32_t i = b * T + t;
                const bool has_target = t + 1 < T;
                targets[i] = has_target ? tokens[i + 1] : 0;
                active[i] = has_target ? 1 : 0;
                clean_target[i] =
                    has_target && data.train.noise_mask[off + i + 1] == 0 ? 1 : 0;
            }
        }

        ForwardTrace<S> trace = forward(params, model_cfg, tokens, batch, T, false);
        BackwardResult<S> bk = backward(params, model_cfg, trace, targets, active, zcoeff);
        const double preclip = clip_gradients(bk.grads, train_cfg.clip_norm);
        const bool ok = trace.numeric_ok && std::isfinite(bk.ce_loss) && std::isfinite(preclip);

        StepRecord rec;
        rec.step = step;
        rec.lr = lr_at_step(step, train_cfg);
        rec.train_loss = ok ? bk.ce_loss : kInf;
        rec.grad_norm_preclip = std::isnan(preclip) ? kInf : preclip;
        if (ok) {
            rec.clean_token_loss = cross_entropy_loss(trace.logits, targets, clean_target);
            adamw_step(params, bk.grads, adam, step + 1, rec.lr, train_cfg, model_cfg);
            if (model_cfg.moe) {
                for (std::uint32_t l = 0; l < model_cfg.num_layers; ++l) {
                    std::vector<std::uint64_t> loads(model_cfg.moe->num_experts, 0);
                    for (std::uint32_t e = 0; e < model_cfg.moe->num_experts; ++e)
                        loads[e] = trace.layers[l].expert_tokens[e].size();
                    update_expert_bias(params.layers[l].expert_bias, loads,
                                       model_cfg.moe->expert_bias_coefficient);
                }
            }
        }
        if (train_cfg.telemetry_steps.count(step)) {
            ForwardTrace<S> mon = forward(params, model_cfg, data.monitor.tokens, batch, T, true);
            const double grad_rms =
                std::isfinite(preclip) ? preclip / std::sqrt(num_params) : kInf;
            rec.telemetry = make_snapshot(mon, params, model_cfg, step, grad_rms,
                                          data.monitor.noise_mask);
        }
        log.records.push_back(std::move(rec));

        if (detector) {
            if (auto trig = detector->push(log.records.back().train_loss))
                log.halt_trigger_step = *trig;
            if (log.halt_trigger_step && step + 1 >= opts.min_steps_before_halt) {
                if (step + 1 < train_cfg.total_steps) log.truncated_early = true;
                break;
            }
        }
    }
    return log;
}

}  // namespace instab

#endif  // INSTAB_TRAINER_HPP
