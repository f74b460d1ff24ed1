#ifndef INSTAB_HARNESS_HPP
#define INSTAB_HARNESS_HPP

// Multi-seed execution: one train_run per seed over a shared read-only
// corpus, verdicts from the divergence detector, binomial aggregation.
// Workers only write their own run's artifacts; aggregation is the sole
// writer of summaries and is independent of completion order.

#include <atomic>
#include <functional>
#include <mutex>
#include <set>
#include <thread>

#include "instab/stability.hpp"
#include "instab/trainer.hpp"

namespace instab {

struct RunSeedsOptions {
    DivergenceCriterion criterion;
    bool early_halt = true;
    std::uint32_t min_steps_before_halt = 0;
    int jobs = 1;
    // Called for each finished run (from worker threads; runs target distinct
    // files). Return value replaces the computed log when a cached one is
    // reused upstream.
    std::function<void(const RunLog&)> persist;
    // When set, consulted before running a seed; a returned log is reused.
    std::function<std::optional<RunLog>(std::uint64_t seed)> cached;
};

struct RunSeedsResult {
    StabilityReport report;
    std::vector<RunLog> logs;  // ordered by the input seed order
};

inline RunSeedsResult run_seeds(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                const Corpus& corpus, const std::vector<std::uint64_t>& seeds,
                                const RunSeedsOptions& opts, const std::string& config_id = "") {
    {
        std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
        if (uniq.size() != seeds.size()) throw ConfigError("run_seeds: seeds must be distinct");
    }
    std::vector<std::optional<RunLog>> logs(seeds.size());
    std::vector<std::string> errors(seeds.size());
    std::atomic<std::size_t> next{0};

    auto work = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= seeds.size()) return;
            try {
                std::optional<RunLog> log;
                if (opts.cached) log = opts.cached(seeds[i]);
                if (!log) {
                    TrainConfig cfg = train_cfg;
                    cfg.seed = seeds[i];
                    TrainRunOptions ro;
                    if (opts.early_halt) {
                        ro.halt_criterion = opts.criterion;
                        ro.min_steps_before_halt = opts.min_steps_before_halt;
                    }
                    log = train_run<float>(model_cfg, cfg, corpus, ro);
                    if (opts.persist) opts.persist(*log);
                }
                logs[i] = std::move(log);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };

    const int jobs = std::max(1, opts.jobs);
    if (jobs == 1 || seeds.size() <= 1) {
        work();
    } else {
        std::vector<std::thread> threads;
        for (int t = 0; t < jobs; ++t) threads.emplace_back(work);
        for (auto& th : threads) th.join();
    }

    RunSeedsResult result;
    std::vector<SeedVerdict> verdicts;
    bool incomplete = false;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (!logs[i]) {
            incomplete = true;
            continue;
        }
        SeedVerdict sv;
        sv.seed = seeds[i];
        auto series = logs[i]->loss_series();
        sv.verdict = detect_divergence(series, opts.criterion);
        verdicts.push_back(sv);
        result.logs.push_back(std::move(*logs[i]));
    }
    result.report = StabilityReport::aggregate(config_id, std::move(verdicts), incomplete);
    return result;
}

}  // namespace instab

#endif  // INSTAB_HARNESS_HPP
