#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "instab/diagnosis.hpp"

using namespace instab;

namespace {

DivergenceVerdict diverged_at(std::uint32_t step) {
    DivergenceVerdict v;
    v.status = RunStatus::Diverged;
    v.trigger_step = step;
    return v;
}

int ladder_rank(FailureLabel label) {
    switch (label) {
        case FailureLabel::Unexplained: return 0;
        case FailureLabel::NoisyDataCompatible: return 1;
        case FailureLabel::HighLRCompatible: return 2;
        default: return -1;
    }
}

}  // namespace

TEST_CASE("classify_run: the paper's dual-threshold rule") {
    ThresholdConfig th;  // defaults 4000 / 1800
    th.probe_step = 100;

    auto noisy = classify_run("r1", diverged_at(1200), 2500.0, th);
    REQUIRE(noisy.label == FailureLabel::NoisyDataCompatible);

    auto high = classify_run("r2", diverged_at(1200), 5000.0, th);
    REQUIRE(high.label == FailureLabel::HighLRCompatible);

    DivergenceVerdict stable;
    auto s = classify_run("r3", stable, 9999.0, th);
    REQUIRE(s.label == FailureLabel::Stable);

    auto low = classify_run("r4", diverged_at(3), 100.0, th);
    REQUIRE(low.label == FailureLabel::Unexplained);

    // Boundaries are inclusive on the lower threshold of each band.
    REQUIRE(classify_run("r", diverged_at(1), 1800.0, th).label ==
            FailureLabel::NoisyDataCompatible);
    REQUIRE(classify_run("r", diverged_at(1), 4000.0, th).label ==
            FailureLabel::HighLRCompatible);
}

TEST_CASE("classify_run: label is monotone in the probe logit for diverged runs") {
    ThresholdConfig th;
    th.probe_step = 1;
    int prev = -1;
    for (double logit = 0.0; logit <= 6000.0; logit += 37.0) {
        auto res = classify_run("r", diverged_at(10), logit, th);
        const int rank = ladder_rank(res.label);
        REQUIRE(rank >= prev);
        prev = rank;
    }
}

TEST_CASE("threshold config validation") {
    ThresholdConfig th;
    th.tau_noise = 5000.0;  // above tau_high_lr
    REQUIRE_THROWS_AS(th.validate(), ConfigError);
    th = ThresholdConfig{};
    th.tau_high_lr = -1.0;
    REQUIRE_THROWS_AS(th.validate(), ConfigError);
}

TEST_CASE("pearson_correlation: exact lines, hand fixture, flags") {
    std::vector<double> x = {1, 2, 3, 4, 5};
    std::vector<double> y(5), z(5);
    for (int i = 0; i < 5; ++i) {
        y[static_cast<std::size_t>(i)] = 2.0 * x[static_cast<std::size_t>(i)] + 1.0;
        z[static_cast<std::size_t>(i)] = -x[static_cast<std::size_t>(i)];
    }
    REQUIRE(*pearson_correlation(x, y) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(*pearson_correlation(x, z) == Catch::Approx(-1.0).margin(1e-12));

    // Hand-computed fixture: sums give cov 3, var 5 each, r = 0.6.
    std::vector<double> fx = {1, 2, 3, 4}, fy = {2, 1, 4, 3};
    REQUIRE(*pearson_correlation(fx, fy) == Catch::Approx(0.6).margin(1e-12));

    std::vector<double> flat = {3, 3, 3, 3};
    REQUIRE_FALSE(pearson_correlation(fx, flat).has_value());
    REQUIRE_FALSE(pearson_correlation(flat, fy).has_value());

    std::vector<double> short_x = {1};
    REQUIRE_THROWS_AS(pearson_correlation(short_x, short_x), ConfigError);
    REQUIRE_THROWS_AS(pearson_correlation(fx, x), ShapeError);
}

TEST_CASE("pearson_correlation: affine invariance up to the sign of the scale") {
    Rng rng(31);
    std::vector<double> x(12), y(12);
    for (auto& v : x) v = rng.next_normal();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = 0.3 * x[i] + rng.next_normal();
    const double r = *pearson_correlation(x, y);
    for (double a : {2.5, -1.7, 0.01}) {
        std::vector<double> ax(12);
        for (std::size_t i = 0; i < x.size(); ++i) ax[i] = a * x[i] + 4.2;
        const double r2 = *pearson_correlation(ax, y);
        REQUIRE(r2 == Catch::Approx((a > 0 ? 1.0 : -1.0) * r).margin(1e-12));
    }
}

TEST_CASE("content_frequency_analysis: degenerate flags and recompute oracle") {
    auto report_with = [](double p) {
        StabilityReport r;
        r.num_seeds = 20;
        r.num_diverged = static_cast<std::uint64_t>(p * 20);
        r.probability = p;
        r.standard_error = binomial_standard_error(p, 20);
        return r;
    };

    std::vector<std::pair<double, StabilityReport>> equal = {{0.0, report_with(0.4)},
                                                             {1e6, report_with(0.4)}};
    auto flat = content_frequency_analysis(equal);
    REQUIRE_FALSE(flat.pearson_r.has_value());  // zero variance flag
    REQUIRE(flat.scatter.size() == 2);

    std::vector<std::pair<double, StabilityReport>> cells;
    const double fs[6] = {1, 10, 100, 1000, 10000, 100000};
    const double ps[6] = {0.55, 0.40, 0.60, 0.50, 0.45, 0.50};
    for (int i = 0; i < 6; ++i) cells.emplace_back(fs[i], report_with(ps[i]));
    auto analysis = content_frequency_analysis(cells);
    REQUIRE(analysis.pearson_r.has_value());
    // Direct recompute with the textbook formula.
    double mx = 0, my = 0;
    for (int i = 0; i < 6; ++i) {
        mx += fs[i] / 6.0;
        my += ps[i] / 6.0;
    }
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < 6; ++i) {
        sxy += (fs[i] - mx) * (ps[i] - my);
        sxx += (fs[i] - mx) * (fs[i] - mx);
        syy += (ps[i] - my) * (ps[i] - my);
    }
    REQUIRE(*analysis.pearson_r == Catch::Approx(sxy / std::sqrt(sxx * syy)).margin(1e-12));

    std::vector<std::pair<double, StabilityReport>> single = {{0.0, report_with(0.4)}};
    REQUIRE_THROWS_AS(content_frequency_analysis(single), ConfigError);
}

TEST_CASE("router_correlation_analysis: flags, symmetry, recompute") {
    auto stat = [](std::uint32_t layer, std::uint32_t expert, std::uint64_t count, double frac,
                   double absmean) {
        ExpertStat s;
        s.layer = layer;
        s.expert = expert;
        s.token_count = count;
        s.noisy_fraction = frac;
        s.ffn_out_absmean = absmean;
        return s;
    };

    // Layer 0: perfect positive line; layer 1: perfect negative line.
    std::vector<ExpertStat> stats;
    for (std::uint32_t e = 0; e < 4; ++e) {
        stats.push_back(stat(0, e, 10, 0.1 * e, 1.0 + 0.2 * e));
        stats.push_back(stat(1, e, 10, 0.1 * e, 2.0 - 0.3 * e));
    }
    auto analysis = router_correlation_analysis(stats);
    REQUIRE(analysis.per_layer.size() == 2);
    REQUIRE(*analysis.per_layer[0].r == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(*analysis.per_layer[1].r == Catch::Approx(-1.0).margin(1e-12));
    REQUIRE(*analysis.mean_r == Catch::Approx(0.0).margin(1e-12));

    // Identical stats in a layer: zero variance, flagged and excluded.
    std::vector<ExpertStat> degenerate;
    for (std::uint32_t e = 0; e < 4; ++e) degenerate.push_back(stat(0, e, 10, 0.5, 1.0));
    for (std::uint32_t e = 0; e < 4; ++e) degenerate.push_back(stat(1, e, 10, 0.1 * e, 1.0 + e));
    auto partial = router_correlation_analysis(degenerate);
    REQUIRE_FALSE(partial.per_layer[0].r.has_value());
    REQUIRE(partial.per_layer[1].r.has_value());
    REQUIRE(*partial.mean_r == Catch::Approx(*partial.per_layer[1].r));

    // Fewer than two active experts: layer skipped with a flag.
    std::vector<ExpertStat> sparse = {stat(0, 0, 10, 0.5, 1.0), stat(0, 1, 0, 0.0, 0.0)};
    auto skipped = router_correlation_analysis(sparse);
    REQUIRE_FALSE(skipped.per_layer[0].r.has_value());
    REQUIRE_FALSE(skipped.mean_r.has_value());
}

TEST_CASE("fit_threshold: minimum over diverged probe logits") {
    REQUIRE_FALSE(fit_threshold({}).has_value());
    std::vector<double> probes = {812.0, 430.5, 1209.0};
    REQUIRE(*fit_threshold(probes) == 430.5);
}
