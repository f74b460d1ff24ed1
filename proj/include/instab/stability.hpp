#ifndef INSTAB_STABILITY_HPP
#define INSTAB_STABILITY_HPP

// Divergence criterion: a run diverges when its loss exceeds the running
// minimum by more than delta nats/token for a full window of consecutive
// steps within the evaluation horizon. Spikes that recover reset the window
// and count as stable.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "instab/common.hpp"

namespace instab {

struct DivergenceCriterion {
    double delta_nats = 0.5;
    std::uint32_t window_steps = 600;
    std::uint32_t evaluation_horizon = 20000;
    // Optional EMA over the loss before detection; 0 = raw per-step loss.
    double ema_alpha = 0.0;

    void validate() const {
        if (delta_nats <= 0.0) throw ConfigError("DivergenceCriterion: delta_nats must be positive");
        if (window_steps < 1) throw ConfigError("DivergenceCriterion: window_steps must be >= 1");
        if (evaluation_horizon < 1)
            throw ConfigError("DivergenceCriterion: evaluation_horizon must be >= 1");
        if (ema_alpha < 0.0 || ema_alpha >= 1.0)
            throw ConfigError("DivergenceCriterion: ema_alpha must be in [0, 1)");
    }
};

// Desk-scale window default: the paper proportion (600 of 2e4 steps = 3%)
// with a floor of 30 steps.
inline std::uint32_t default_window_for(std::uint32_t total_steps) {
    auto w = static_cast<std::uint32_t>(0.03 * static_cast<double>(total_steps));
    return std::max<std::uint32_t>(30, w);
}

enum class RunStatus { Stable, Diverged };

struct DivergenceVerdict {
    RunStatus status = RunStatus::Stable;
    std::optional<std::uint32_t> trigger_step;          // first step of the window
    std::optional<double> running_min_at_trigger;
};

// Streaming form of the detector; the trainer uses it for early halting and
// detect_divergence wraps it, so there is exactly one implementation of the
// rule. A step qualifies when its loss exceeds runmin + delta, where runmin
// is the minimum over strictly earlier steps; +inf losses always qualify.
class RunningDivergenceDetector {
public:
    explicit RunningDivergenceDetector(const DivergenceCriterion& criterion)
        : criterion_(criterion) {
        criterion_.validate();
    }

    // Feeds one loss; returns the trigger step the first time the full
    // window completes within the horizon.
    std::optional<std::uint32_t> push(double raw_loss) {
        const std::uint32_t step = steps_seen_++;
        if (step >= criterion_.evaluation_horizon) return std::nullopt;
        double loss = raw_loss;
        if (criterion_.ema_alpha > 0.0) {
            ema_ = std::isinf(raw_loss) || std::isinf(ema_)
                       ? raw_loss
                       : (step == 0 ? raw_loss
                                    : criterion_.ema_alpha * ema_ +
                                          (1.0 - criterion_.ema_alpha) * raw_loss);
            loss = ema_;
        }
        const bool qualifies = std::isinf(loss) || loss > run_min_ + criterion_.delta_nats;
        if (qualifies) {
            if (consecutive_ == 0) run_min_at_window_start_ = run_min_;
            ++consecutive_;
        } else {
            consecutive_ = 0;
        }
        run_min_ = std::min(run_min_, loss);
        if (!triggered_ && consecutive_ >= criterion_.window_steps &&
            step + 1 <= criterion_.evaluation_horizon) {
            triggered_ = true;
            trigger_step_ = step + 1 - criterion_.window_steps;
            return trigger_step_;
        }
        return std::nullopt;
    }

    bool triggered() const { return triggered_; }
    std::uint32_t trigger_step() const { return trigger_step_; }
    double running_min_at_trigger() const { return run_min_at_window_start_; }

private:
    DivergenceCriterion criterion_;
    std::uint32_t steps_seen_ = 0;
    std::uint32_t consecutive_ = 0;
    double run_min_ = kInf;
    double run_min_at_window_start_ = kInf;
    double ema_ = 0.0;
    bool triggered_ = false;
    std::uint32_t trigger_step_ = 0;
};

inline DivergenceVerdict detect_divergence(std::span<const double> loss_series,
                                           const DivergenceCriterion& criterion) {
    RunningDivergenceDetector det(criterion);
    DivergenceVerdict verdict;
    for (double loss : loss_series) {
        if (auto trig = det.push(loss)) {
            verdict.status = RunStatus::Diverged;
            verdict.trigger_step = *trig;
            verdict.running_min_at_trigger = det.running_min_at_trigger();
            break;
        }
    }
    return verdict;
}

inline double binomial_standard_error(double p, std::uint64_t n) {
    if (n == 0) return 0.0;
    return std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

struct SeedVerdict {
    std::uint64_t seed = 0;
    DivergenceVerdict verdict;
};

struct StabilityReport {
    std::string config_id;
    std::uint64_t num_seeds = 0;
    std::uint64_t num_diverged = 0;
    double probability = 0.0;
    double standard_error = 0.0;
    std::vector<SeedVerdict> per_seed;
    bool incomplete = false;  // a run failed for non-numeric reasons

    static StabilityReport aggregate(const std::string& config_id,
                                     std::vector<SeedVerdict> verdicts, bool incomplete = false) {
        StabilityReport r;
        r.config_id = config_id;
        r.num_seeds = verdicts.size();
        for (const auto& v : verdicts)
            if (v.verdict.status == RunStatus::Diverged) ++r.num_diverged;
        r.probability = r.num_seeds == 0
                            ? 0.0
                            : static_cast<double>(r.num_diverged) / static_cast<double>(r.num_seeds);
        r.standard_error = binomial_standard_error(r.probability, r.num_seeds);
        r.per_seed = std::move(verdicts);
        r.incomplete = incomplete;
        return r;
    }
};

}  // namespace instab

#endif  // INSTAB_STABILITY_HPP
