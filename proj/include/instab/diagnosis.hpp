#ifndef INSTAB_DIAGNOSIS_HPP
#define INSTAB_DIAGNOSIS_HPP

// Failure-mode classification from dual max-attention-logit thresholds, plus
// the Pearson correlation analyses over noise content and expert routing.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "instab/stability.hpp"
#include "instab/telemetry.hpp"

namespace instab {

struct ThresholdConfig {
    double tau_high_lr = 4000.0;
    double tau_noise = 1800.0;
    std::uint32_t probe_step = 100;

    void validate() const {
        if (tau_high_lr <= 0.0 || tau_noise <= 0.0)
            throw ConfigError("ThresholdConfig: thresholds must be positive");
        if (!(tau_noise < tau_high_lr))
            throw ConfigError("ThresholdConfig: tau_noise must be < tau_high_lr");
    }
};

enum class FailureLabel { HighLRCompatible, NoisyDataCompatible, Unexplained, Stable };

inline const char* to_string(FailureLabel label) {
    switch (label) {
        case FailureLabel::HighLRCompatible: return "high_lr_compatible";
        case FailureLabel::NoisyDataCompatible: return "noisy_data_compatible";
        case FailureLabel::Unexplained: return "unexplained";
        default: return "stable";
    }
}

struct DiagnosisResult {
    std::string run_id;
    DivergenceVerdict verdict;
    double probe_max_logit = 0.0;
    FailureLabel label = FailureLabel::Stable;
};

// Stable runs stay Stable regardless of the probe. Diverged runs climb the
// ladder Unexplained -> NoisyDataCompatible -> HighLRCompatible with the
// probe-step max attention logit.
inline DiagnosisResult classify_run(const std::string& run_id, const DivergenceVerdict& verdict,
                                    double probe_max_logit, const ThresholdConfig& thresholds) {
    thresholds.validate();
    DiagnosisResult res;
    res.run_id = run_id;
    res.verdict = verdict;
    res.probe_max_logit = probe_max_logit;
    if (verdict.status == RunStatus::Stable) {
        res.label = FailureLabel::Stable;
    } else if (probe_max_logit >= thresholds.tau_high_lr) {
        res.label = FailureLabel::HighLRCompatible;
    } else if (probe_max_logit >= thresholds.tau_noise) {
        res.label = FailureLabel::NoisyDataCompatible;
    } else {
        res.label = FailureLabel::Unexplained;
    }
    return res;
}

// Sample Pearson r; nullopt flags zero variance in either argument.
inline std::optional<double> pearson_correlation(std::span<const double> x,
                                                 std::span<const double> y) {
    if (x.size() != y.size()) throw ShapeError("pearson_correlation: length mismatch");
    if (x.size() < 2) throw ConfigError("pearson_correlation: needs at least two points");
    const auto n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

// Divergence probability against mean noise-token corpus frequency.
struct ContentFrequencyAnalysis {
    struct Point {
        double mean_frequency = 0.0;
        double probability = 0.0;
        double standard_error = 0.0;
    };
    std::vector<Point> scatter;
    std::optional<double> pearson_r;  // nullopt = zero-variance flag
};

inline ContentFrequencyAnalysis content_frequency_analysis(
    const std::vector<std::pair<double, StabilityReport>>& cells) {
    if (cells.size() < 2)
        throw ConfigError("content_frequency_analysis: needs at least two frequency cells");
    ContentFrequencyAnalysis out;
    std::vector<double> xs, ys;
    for (const auto& [freq, report] : cells) {
        out.scatter.push_back({freq, report.probability, report.standard_error});
        xs.push_back(freq);
        ys.push_back(report.probability);
    }
    out.pearson_r = pearson_correlation(xs, ys);
    return out;
}

// Per-layer correlation between expert noisy-token fraction and FFN output
// absolute mean; layers with fewer than two active experts or zero variance
// are flagged and excluded from the mean.
struct RouterCorrelationAnalysis {
    struct LayerResult {
        std::uint32_t layer = 0;
        std::optional<double> r;  // nullopt = skipped (flagged)
    };
    std::vector<LayerResult> per_layer;
    std::optional<double> mean_r;
};

inline RouterCorrelationAnalysis router_correlation_analysis(
    const std::vector<ExpertStat>& stats) {
    std::map<std::uint32_t, std::vector<const ExpertStat*>> by_layer;
    for (const auto& st : stats) by_layer[st.layer].push_back(&st);
    RouterCorrelationAnalysis out;
    double acc = 0.0;
    std::uint32_t counted = 0;
    for (const auto& [layer, entries] : by_layer) {
        std::vector<double> xs, ys;
        for (const auto* st : entries) {
            if (st->token_count == 0) continue;  // inactive experts carry no batch
            xs.push_back(st->noisy_fraction);
            ys.push_back(st->ffn_out_absmean);
        }
        RouterCorrelationAnalysis::LayerResult lr;
        lr.layer = layer;
        if (xs.size() >= 2) lr.r = pearson_correlation(xs, ys);
        if (lr.r) {
            acc += *lr.r;
            ++counted;
        }
        out.per_layer.push_back(lr);
    }
    if (counted > 0) out.mean_r = acc / counted;
    return out;
}

// Desk-scale threshold calibration: the minimal probe logit over the diverged
// runs of a failure-mode sweep. Paper-default thresholds stay in config; this
// reports what the current schedule actually exhibits.
inline std::optional<double> fit_threshold(std::span<const double> diverged_probe_logits) {
    if (diverged_probe_logits.empty()) return std::nullopt;
    double mn = kInf;
    for (double v : diverged_probe_logits) mn = std::min(mn, v);
    return mn;
}

}  // namespace instab

#endif  // INSTAB_DIAGNOSIS_HPP
