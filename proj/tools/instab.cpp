// instab: run noisy-pretraining stability experiments, emit figure data,
// diagnose failure modes, and inject noise into corpus files.

#include <CLI11.hpp>
#include <iostream>

#include "instab/experiment.hpp"

namespace {

int cmd_run(const std::string& config_path, int jobs, bool force) {
    auto cfg = instab::load_config(config_path);
    instab::RunExperimentOptions opts;
    opts.jobs = jobs;
    opts.force = force;
    auto results = instab::run_experiment(cfg, opts);
    for (const auto& r : results) {
        std::cout << r.plan.name << ": " << r.report.num_diverged << "/" << r.report.num_seeds
                  << " diverged (p=" << r.report.probability << " se=" << r.report.standard_error
                  << ")" << (r.report.incomplete ? " [incomplete]" : "") << "\n";
    }
    std::cout << "artifacts: " << cfg.output_dir << "\n";
    // Divergence is data, not failure.
    return 0;
}

int cmd_figures(const std::string& dir, const std::string& fig) {
    auto files = instab::emit_figure_data(dir, instab::figure_from_name(fig));
    for (const auto& f : files) std::cout << f << "\n";
    return 0;
}

int cmd_diagnose(const std::string& dir) {
    auto results = instab::load_results(dir);
    auto thresholds = instab::thresholds_of(dir);
    const std::string csv = instab::diagnosis_csv(results, thresholds);
    instab::cfgdetail::write_text_file(std::filesystem::path(dir) / "diagnosis.csv", csv);
    std::cout << csv;

    // Desk-scale calibration: minimal probe logit over diverged runs.
    std::vector<double> diverged_probes;
    for (const auto& r : results)
        for (std::size_t i = 0; i < r.report.per_seed.size(); ++i)
            if (r.report.per_seed[i].verdict.status == instab::RunStatus::Diverged)
                if (auto p = instab::probe_max_logit(r.logs[i], thresholds.probe_step))
                    diverged_probes.push_back(*p);
    if (auto fitted = instab::fit_threshold(diverged_probes))
        std::cout << "# fitted_threshold_min_diverged_probe_logit=" << *fitted
                  << " (paper defaults: tau_noise=" << thresholds.tau_noise
                  << " tau_high_lr=" << thresholds.tau_high_lr << ")\n";
    return 0;
}

int cmd_inject(const std::string& corpus_path, double alpha, const std::string& mode,
               std::uint32_t noise_vocab_k, const std::string& out_path, std::uint64_t seed) {
    instab::Corpus corpus = instab::read_corpus_file(corpus_path);
    std::uint32_t vocab_size = 0;
    for (const auto& doc : corpus)
        for (auto t : doc.tokens) vocab_size = std::max(vocab_size, t + 1);
    instab::NoiseSpec noise;
    noise.mode = mode == "overwrite" ? instab::NoiseMode::Overwrite : instab::NoiseMode::Insert;
    noise.alpha = alpha;
    noise.seed = seed;
    for (std::uint32_t t = 0; t < noise_vocab_k; ++t) noise.noise_vocab.push_back(t);
    noise.validate(std::max(vocab_size, noise_vocab_k));
    instab::Corpus noisy = instab::inject_corpus(corpus, noise);
    instab::write_corpus_file(out_path, noisy);
    std::cout << "wrote " << out_path << " (" << instab::total_tokens(noisy) << " tokens, "
              << "noise fraction " << instab::realized_noise_fraction(noisy) << ")\n";
    return 0;
}

int cmd_corpus(const std::string& out_path, std::uint32_t vocab_size, std::uint32_t reserved,
               std::uint64_t num_documents, std::uint32_t len_min, std::uint32_t len_max,
               double zipf, int markov, std::uint64_t seed) {
    instab::CorpusSpec spec;
    spec.vocab.size = vocab_size;
    spec.vocab.reserved_zero_freq = reserved;
    spec.num_documents = num_documents;
    spec.doc_length_min = len_min;
    spec.doc_length_max = len_max;
    spec.zipf_exponent = zipf;
    spec.markov_order = markov;
    spec.seed = seed;
    instab::Corpus corpus = instab::generate_clean_corpus(spec);
    instab::write_corpus_file(out_path, corpus);
    std::cout << "wrote " << out_path << " (" << instab::total_tokens(corpus) << " tokens in "
              << corpus.size() << " documents)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"noisy-data pretraining stability laboratory"};
    app.require_subcommand(1);

    std::string config_path, dir, fig, corpus_path, out_path, mode = "insert";
    int jobs = 1;
    bool force = false;
    double alpha = 0.0, zipf = 1.0;
    std::uint32_t noise_vocab_k = 5, vocab_size = 512, reserved = 16, len_min = 32, len_max = 96;
    std::uint64_t num_documents = 6000, seed = 2;
    int markov = 1;

    auto* run = app.add_subcommand("run", "execute an experiment config");
    run->add_option("config", config_path, "experiment JSON file")->required();
    run->add_option("--jobs", jobs, "worker pool size")->check(CLI::PositiveNumber);
    run->add_flag("--force", force, "overwrite artifacts from a different config");

    auto* figures = app.add_subcommand("figures", "emit figure-data CSVs from an artifact tree");
    figures->add_option("dir", dir, "experiment output directory")->required();
    figures->add_option("--fig", fig, "fig2|fig3|fig4|fig5|fig7|fig8")->required();

    auto* diagnose = app.add_subcommand("diagnose", "classify runs by failure mode");
    diagnose->add_option("dir", dir, "experiment output directory")->required();

    auto* inject = app.add_subcommand("inject", "inject noise into a corpus file");
    inject->add_option("--corpus", corpus_path, "input corpus file")->required();
    inject->add_option("--alpha", alpha, "target noise ratio in [0,1)")->required();
    inject->add_option("--mode", mode, "insert|overwrite")
        ->check(CLI::IsMember({"insert", "overwrite"}));
    inject->add_option("--noise-vocab-k", noise_vocab_k, "use the first k token ids as noise");
    inject->add_option("--out", out_path, "output corpus file")->required();
    inject->add_option("--seed", seed, "injection seed");

    auto* corpus = app.add_subcommand("corpus", "synthesize a clean corpus file");
    corpus->add_option("--out", out_path, "output corpus file")->required();
    corpus->add_option("--vocab-size", vocab_size, "token-id universe size");
    corpus->add_option("--reserved-zero-freq", reserved, "trailing ids kept out of the corpus");
    corpus->add_option("--num-documents", num_documents, "document count");
    corpus->add_option("--doc-length-min", len_min, "minimum document length");
    corpus->add_option("--doc-length-max", len_max, "maximum document length");
    corpus->add_option("--zipf-exponent", zipf, "marginal frequency skew");
    corpus->add_option("--markov-order", markov, "0 (i.i.d.) or 1 (bigram structure)");
    corpus->add_option("--seed", seed, "generation seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, jobs, force);
        if (figures->parsed()) return cmd_figures(dir, fig);
        if (diagnose->parsed()) return cmd_diagnose(dir);
        if (inject->parsed())
            return cmd_inject(corpus_path, alpha, mode, noise_vocab_k, out_path, seed);
        if (corpus->parsed())
            return cmd_corpus(out_path, vocab_size, reserved, num_documents, len_min, len_max,
                              zipf, markov, seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
