#ifndef INSTAB_TESTS_DETECTOR_ORACLE_HPP
#define INSTAB_TESTS_DETECTOR_ORACLE_HPP

// Test-only brute-force divergence checker and synthetic loss-curve
// generator, independent of the streaming implementation they validate.

#include <cmath>
#include <vector>

#include "instab/stability.hpp"

namespace instab::testing {

// Prefix running minima plus a literal scan of every candidate window.
inline DivergenceVerdict brute_force_detect(const std::vector<double>& loss,
                                            const DivergenceCriterion& c) {
    DivergenceVerdict verdict;
    const std::size_t horizon = std::min<std::size_t>(loss.size(), c.evaluation_horizon);
    std::vector<double> runmin(horizon + 1, kInf);
    for (std::size_t s = 0; s < horizon; ++s) runmin[s + 1] = std::min(runmin[s], loss[s]);
    for (std::size_t t = 0; t + c.window_steps <= horizon; ++t) {
        bool all = true;
        for (std::size_t s = t; s < t + c.window_steps; ++s) {
            const bool qualifies = std::isinf(loss[s]) || loss[s] > runmin[s] + c.delta_nats;
            if (!qualifies) {
                all = false;
                break;
            }
        }
        if (all) {
            verdict.status = RunStatus::Diverged;
            verdict.trigger_step = static_cast<std::uint32_t>(t);
            verdict.running_min_at_trigger = runmin[t];
            return verdict;
        }
    }
    return verdict;
}

// Mixtures of decays, recovering spikes, sustained ramps, step jumps and
// numeric blow-ups, with additive noise.
inline std::vector<double> synthetic_curve(Rng& rng, std::size_t len) {
    std::vector<double> loss(len);
    const double start = 4.0 + rng.next_double() * 4.0;
    const double floor_loss = 0.5 + rng.next_double() * 2.0;
    const double tau = 20.0 + rng.next_double() * 200.0;
    const double noise_amp = rng.next_double() * 0.3;
    for (std::size_t s = 0; s < len; ++s)
        loss[s] = floor_loss + (start - floor_loss) * std::exp(-static_cast<double>(s) / tau) +
                  (rng.next_double() - 0.5) * noise_amp;
    const int kind = static_cast<int>(rng.next_below(5));
    if (kind == 1) {  // recovering spike
        const std::size_t at = 10 + rng.next_below(len / 2);
        const std::size_t width = 1 + rng.next_below(20);
        for (std::size_t s = at; s < std::min(len, at + width); ++s)
            loss[s] += 1.0 + rng.next_double() * 3.0;
    } else if (kind == 2) {  // sustained ramp
        const std::size_t at = 10 + rng.next_below(len / 2);
        for (std::size_t s = at; s < len; ++s)
            loss[s] += 0.02 * static_cast<double>(s - at) * (0.5 + rng.next_double());
    } else if (kind == 3) {  // step jump, may or may not clear delta
        const std::size_t at = 10 + rng.next_below(len / 2);
        const double jump = rng.next_double() * 1.2;
        for (std::size_t s = at; s < len; ++s) loss[s] += jump;
    } else if (kind == 4) {  // numeric blow-up
        const std::size_t at = 10 + rng.next_below(len - 12);
        for (std::size_t s = at; s < len; ++s) loss[s] = kInf;
    }
    return loss;
}

}  // namespace instab::testing

#endif  // INSTAB_TESTS_DETECTOR_ORACLE_HPP
