#ifndef INSTAB_EXPERIMENT_HPP
#define INSTAB_EXPERIMENT_HPP

// Operator surface: declarative experiment configs (single JSON document,
// unknown keys rejected), sweep cells over noise / model-shape / LR axes,
// idempotent artifact tree, and figure-data CSVs. Every figure number is
// recomputable from RunLogs alone.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "instab/corpus.hpp"
#include "instab/diagnosis.hpp"
#include "instab/harness.hpp"
#include "instab/runlog.hpp"

namespace instab {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

struct NoiseSelector {
    enum class Kind { FirstK, Explicit, ByFrequency };
    Kind kind = Kind::FirstK;
    std::uint32_t k = 5;
    std::vector<std::uint32_t> ids;     // Explicit
    double target_mean_freq = 0.0;      // ByFrequency
};

struct NoiseSetting {
    NoiseMode mode = NoiseMode::Insert;
    double alpha = 0.0;
    NoiseSelector selector;
    std::uint64_t seed = 2;
};

struct ExperimentConfig {
    std::string name;
    std::vector<std::uint64_t> seeds;
    std::string output_dir;
    std::int64_t seed_offset = 0;
    CorpusSpec corpus;
    std::vector<NoiseSetting> noise_cells;
    bool noise_is_axis = false;
    std::vector<ModelConfig> model_cells;
    bool model_is_axis = false;
    TrainConfig train;
    std::vector<double> lr_cells;  // peak_lr per cell; single entry when no axis
    bool lr_is_axis = false;
    DivergenceCriterion criterion;
    ThresholdConfig thresholds;
    bool qk_intervention_axis = false;  // duplicates every cell with QK-layernorm on
};

namespace cfgdetail {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& ctx) {
    if (!j.is_object()) throw ConfigError("config section '" + ctx + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in " + ctx);
}

template <class T>
T get_or(const json& j, const char* key, T def) {
    return j.contains(key) ? j.at(key).get<T>() : def;
}

inline CorpusSpec parse_corpus(const json& j) {
    check_keys(j,
               {"vocab_size", "reserved_zero_freq", "num_documents", "doc_length_min",
                "doc_length_max", "zipf_exponent", "markov_order", "seed"},
               "corpus");
    CorpusSpec c;
    c.vocab.size = get_or<std::uint32_t>(j, "vocab_size", c.vocab.size);
    c.vocab.reserved_zero_freq =
        get_or<std::uint32_t>(j, "reserved_zero_freq", c.vocab.reserved_zero_freq);
    c.num_documents = get_or<std::uint64_t>(j, "num_documents", c.num_documents);
    c.doc_length_min = get_or<std::uint32_t>(j, "doc_length_min", c.doc_length_min);
    c.doc_length_max = get_or<std::uint32_t>(j, "doc_length_max", c.doc_length_max);
    c.zipf_exponent = get_or<double>(j, "zipf_exponent", c.zipf_exponent);
    c.markov_order = get_or<int>(j, "markov_order", c.markov_order);
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
    return c;
}

inline json corpus_to_json(const CorpusSpec& c) {
    return {{"vocab_size", c.vocab.size},
            {"reserved_zero_freq", c.vocab.reserved_zero_freq},
            {"num_documents", c.num_documents},
            {"doc_length_min", c.doc_length_min},
            {"doc_length_max", c.doc_length_max},
            {"zipf_exponent", c.zipf_exponent},
            {"markov_order", c.markov_order},
            {"seed", c.seed}};
}

inline NoiseSetting parse_noise(const json& j) {
    check_keys(j, {"mode", "alpha", "vocab", "seed"}, "noise");
    NoiseSetting n;
    const auto mode = get_or<std::string>(j, "mode", "insert");
    if (mode == "insert")
        n.mode = NoiseMode::Insert;
    else if (mode == "overwrite")
        n.mode = NoiseMode::Overwrite;
    else
        throw ConfigError("noise.mode must be 'insert' or 'overwrite'");
    n.alpha = get_or<double>(j, "alpha", 0.0);
    n.seed = get_or<std::uint64_t>(j, "seed", n.seed);
    if (j.contains("vocab")) {
        const auto& v = j.at("vocab");
        check_keys(v, {"first_k", "ids", "by_frequency"}, "noise.vocab");
        if (v.size() != 1)
            throw ConfigError("noise.vocab must hold exactly one of first_k | ids | by_frequency");
        if (v.contains("first_k")) {
            n.selector.kind = NoiseSelector::Kind::FirstK;
            n.selector.k = v.at("first_k").get<std::uint32_t>();
        } else if (v.contains("ids")) {
            n.selector.kind = NoiseSelector::Kind::Explicit;
            n.selector.ids = v.at("ids").get<std::vector<std::uint32_t>>();
            if (n.selector.ids.empty()) throw ConfigError("noise.vocab.ids must be nonempty");
        } else {
            const auto& bf = v.at("by_frequency");
            check_keys(bf, {"k", "target_mean_freq"}, "noise.vocab.by_frequency");
            n.selector.kind = NoiseSelector::Kind::ByFrequency;
            n.selector.k = bf.at("k").get<std::uint32_t>();
            n.selector.target_mean_freq = bf.at("target_mean_freq").get<double>();
        }
    }
    return n;
}

inline json noise_to_json(const NoiseSetting& n) {
    json v;
    switch (n.selector.kind) {
        case NoiseSelector::Kind::FirstK: v = {{"first_k", n.selector.k}}; break;
        case NoiseSelector::Kind::Explicit: v = {{"ids", n.selector.ids}}; break;
        case NoiseSelector::Kind::ByFrequency:
            v = {{"by_frequency",
                  {{"k", n.selector.k}, {"target_mean_freq", n.selector.target_mean_freq}}}};
            break;
    }
    if (n.selector.kind == NoiseSelector::Kind::ByFrequency)
        return {{"mode", to_string(n.mode)}, {"alpha", n.alpha}, {"vocab", v}, {"seed", n.seed}};
    return {{"mode", to_string(n.mode)}, {"alpha", n.alpha}, {"vocab", v}, {"seed", n.seed}};
}

inline ModelConfig parse_model(const json& j, std::uint32_t corpus_vocab) {
    check_keys(j,
               {"model_dim", "num_layers", "num_query_heads", "num_kv_heads", "head_dim",
                "ffn_multiplier", "rope_theta", "qk_layernorm", "vocab_size", "mup_base_width",
                "moe", "seed"},
               "model");
    ModelConfig m;
    m.model_dim = get_or<std::uint32_t>(j, "model_dim", m.model_dim);
    m.num_layers = get_or<std::uint32_t>(j, "num_layers", m.num_layers);
    m.head_dim = get_or<std::uint32_t>(j, "head_dim", m.head_dim);
    // Query heads track width (heads = dim / head_dim) unless pinned.
    m.num_query_heads =
        get_or<std::uint32_t>(j, "num_query_heads", std::max(1u, m.model_dim / m.head_dim));
    m.num_kv_heads =
        get_or<std::uint32_t>(j, "num_kv_heads", std::max(1u, m.num_query_heads / 2));
    m.ffn_multiplier = get_or<double>(j, "ffn_multiplier", m.ffn_multiplier);
    m.rope_theta = get_or<double>(j, "rope_theta", m.rope_theta);
    m.qk_layernorm = get_or<bool>(j, "qk_layernorm", m.qk_layernorm);
    m.vocab_size = get_or<std::uint32_t>(j, "vocab_size", corpus_vocab);
    if (m.vocab_size != corpus_vocab)
        throw ConfigError("model.vocab_size must match corpus.vocab_size");
    m.mup_base_width = get_or<std::uint32_t>(j, "mup_base_width", m.mup_base_width);
    m.seed = get_or<std::uint64_t>(j, "seed", m.seed);
    if (j.contains("moe") && !j.at("moe").is_null()) {
        const auto& mo = j.at("moe");
        check_keys(mo,
                   {"num_experts", "top_k", "ffn_scale", "expert_bias_coefficient",
                    "router_zloss_coefficient"},
                   "model.moe");
        MoEConfig mc;
        mc.num_experts = get_or<std::uint32_t>(mo, "num_experts", mc.num_experts);
        mc.top_k = get_or<std::uint32_t>(mo, "top_k", mc.top_k);
        mc.ffn_scale = get_or<double>(mo, "ffn_scale", mc.ffn_scale);
        mc.expert_bias_coefficient =
            get_or<double>(mo, "expert_bias_coefficient", mc.expert_bias_coefficient);
        mc.router_zloss_coefficient =
            get_or<double>(mo, "router_zloss_coefficient", mc.router_zloss_coefficient);
        m.moe = mc;
    }
    m.validate();
    return m;
}

inline json model_to_json(const ModelConfig& m) {
    json j = {{"model_dim", m.model_dim},
              {"num_layers", m.num_layers},
              {"num_query_heads", m.num_query_heads},
              {"num_kv_heads", m.num_kv_heads},
              {"head_dim", m.head_dim},
              {"ffn_multiplier", m.ffn_multiplier},
              {"rope_theta", m.rope_theta},
              {"qk_layernorm", m.qk_layernorm},
              {"vocab_size", m.vocab_size},
              {"mup_base_width", m.mup_base_width},
              {"seed", m.seed}};
    if (m.moe)
        j["moe"] = {{"num_experts", m.moe->num_experts},
                    {"top_k", m.moe->top_k},
                    {"ffn_scale", m.moe->ffn_scale},
                    {"expert_bias_coefficient", m.moe->expert_bias_coefficient},
                    {"router_zloss_coefficient", m.moe->router_zloss_coefficient}};
    else
        j["moe"] = nullptr;
    return j;
}

inline TrainConfig parse_train(const json& j) {
    check_keys(j,
               {"peak_lr", "warmup_steps", "total_steps", "min_lr_ratio", "beta1", "beta2",
                "epsilon", "weight_decay", "clip_norm", "batch_tokens", "seq_len",
                "telemetry_steps", "schedule_horizon_steps"},
               "train");
    TrainConfig t;
    t.peak_lr = get_or<double>(j, "peak_lr", t.peak_lr);
    t.warmup_steps = get_or<std::uint32_t>(j, "warmup_steps", t.warmup_steps);
    t.total_steps = get_or<std::uint32_t>(j, "total_steps", t.total_steps);
    t.min_lr_ratio = get_or<double>(j, "min_lr_ratio", t.min_lr_ratio);
    t.beta1 = get_or<double>(j, "beta1", t.beta1);
    t.beta2 = get_or<double>(j, "beta2", t.beta2);
    t.epsilon = get_or<double>(j, "epsilon", t.epsilon);
    t.weight_decay = get_or<double>(j, "weight_decay", t.weight_decay);
    t.clip_norm = get_or<double>(j, "clip_norm", t.clip_norm);
    t.batch_tokens = get_or<std::uint32_t>(j, "batch_tokens", t.batch_tokens);
    t.seq_len = get_or<std::uint32_t>(j, "seq_len", t.seq_len);
    t.schedule_horizon_steps =
        get_or<std::uint32_t>(j, "schedule_horizon_steps", t.schedule_horizon_steps);
    if (j.contains("telemetry_steps"))
        for (const auto& s : j.at("telemetry_steps"))
            t.telemetry_steps.insert(s.get<std::uint32_t>());
    return t;
}

inline json train_to_json(const TrainConfig& t) {
    json steps = json::array();
    for (auto s : t.telemetry_steps) steps.push_back(s);
    return {{"peak_lr", t.peak_lr},
            {"warmup_steps", t.warmup_steps},
            {"total_steps", t.total_steps},
            {"min_lr_ratio", t.min_lr_ratio},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"epsilon", t.epsilon},
            {"weight_decay", t.weight_decay},
            {"clip_norm", t.clip_norm},
            {"batch_tokens", t.batch_tokens},
            {"seq_len", t.seq_len},
            {"telemetry_steps", steps},
            {"schedule_horizon_steps", t.schedule_horizon_steps}};
}

inline std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace cfgdetail

inline ExperimentConfig config_from_json(const json& j) {
    using namespace cfgdetail;
    check_keys(j,
               {"name", "seeds", "output_dir", "seed_offset", "corpus", "noise", "noise_axis",
                "model", "model_axis", "train", "lr_axis", "criterion", "thresholds",
                "qk_intervention_axis"},
               "experiment");
    ExperimentConfig cfg;
    if (!j.contains("name")) throw ConfigError("experiment config requires 'name'");
    cfg.name = j.at("name").get<std::string>();
    if (!j.contains("seeds")) throw ConfigError("experiment config requires 'seeds'");
    cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (cfg.seeds.empty()) throw ConfigError("'seeds' must be nonempty");
    {
        std::set<std::uint64_t> uniq(cfg.seeds.begin(), cfg.seeds.end());
        if (uniq.size() != cfg.seeds.size()) throw ConfigError("'seeds' contains duplicates");
    }
    cfg.output_dir = get_or<std::string>(j, "output_dir", "instab_out/" + cfg.name);
    cfg.seed_offset = get_or<std::int64_t>(j, "seed_offset", 0);
    if (const char* env = std::getenv("INSTAB_SEED_OFFSET"); env && *env)
        cfg.seed_offset = std::stoll(env);
    cfg.corpus = j.contains("corpus") ? parse_corpus(j.at("corpus")) : CorpusSpec{};
    cfg.corpus.validate();

    if (j.contains("noise") && j.contains("noise_axis"))
        throw ConfigError("declare exactly one of 'noise' or 'noise_axis'");
    if (j.contains("noise_axis")) {
        cfg.noise_is_axis = true;
        for (const auto& n : j.at("noise_axis")) cfg.noise_cells.push_back(parse_noise(n));
        if (cfg.noise_cells.empty()) throw ConfigError("'noise_axis' must be nonempty");
    } else {
        cfg.noise_cells.push_back(j.contains("noise") ? parse_noise(j.at("noise"))
                                                      : NoiseSetting{});
    }
    if (j.contains("model") && j.contains("model_axis"))
        throw ConfigError("declare exactly one of 'model' or 'model_axis'");
    if (j.contains("model_axis")) {
        cfg.model_is_axis = true;
        for (const auto& m : j.at("model_axis"))
            cfg.model_cells.push_back(parse_model(m, cfg.corpus.vocab.size));
        if (cfg.model_cells.empty()) throw ConfigError("'model_axis' must be nonempty");
    } else {
        cfg.model_cells.push_back(
            parse_model(j.contains("model") ? j.at("model") : json::object(),
                        cfg.corpus.vocab.size));
    }
    cfg.train = j.contains("train") ? parse_train(j.at("train")) : TrainConfig{};
    if (j.contains("lr_axis")) {
        cfg.lr_is_axis = true;
        cfg.lr_cells = j.at("lr_axis").get<std::vector<double>>();
        if (cfg.lr_cells.empty()) throw ConfigError("'lr_axis' must be nonempty");
    } else {
        cfg.lr_cells.push_back(cfg.train.peak_lr);
    }
    cfg.qk_intervention_axis = get_or<bool>(j, "qk_intervention_axis", false);

    cfg.criterion.delta_nats = 0.5;
    cfg.criterion.window_steps = 0;
    cfg.criterion.evaluation_horizon = 0;
    cfg.criterion.ema_alpha = 0.0;
    if (j.contains("criterion")) {
        const auto& c = j.at("criterion");
        check_keys(c, {"delta_nats", "window_steps", "evaluation_horizon", "ema_alpha"},
                   "criterion");
        cfg.criterion.delta_nats = get_or<double>(c, "delta_nats", 0.5);
        cfg.criterion.window_steps = get_or<std::uint32_t>(c, "window_steps", 0);
        cfg.criterion.evaluation_horizon = get_or<std::uint32_t>(c, "evaluation_horizon", 0);
        cfg.criterion.ema_alpha = get_or<double>(c, "ema_alpha", 0.0);
    }
    if (cfg.criterion.window_steps == 0)
        cfg.criterion.window_steps = default_window_for(cfg.train.total_steps);
    if (cfg.criterion.evaluation_horizon == 0)
        cfg.criterion.evaluation_horizon = std::max(1u, cfg.train.total_steps);

    cfg.thresholds = ThresholdConfig{};
    cfg.thresholds.probe_step =
        std::max(1u, std::min(100u, cfg.train.total_steps > 1 ? cfg.train.total_steps - 1 : 1u));
    if (j.contains("thresholds")) {
        const auto& t = j.at("thresholds");
        check_keys(t, {"tau_high_lr", "tau_noise", "probe_step"}, "thresholds");
        cfg.thresholds.tau_high_lr = get_or<double>(t, "tau_high_lr", cfg.thresholds.tau_high_lr);
        cfg.thresholds.tau_noise = get_or<double>(t, "tau_noise", cfg.thresholds.tau_noise);
        cfg.thresholds.probe_step =
            get_or<std::uint32_t>(t, "probe_step", cfg.thresholds.probe_step);
    }
    cfg.thresholds.validate();
    if (cfg.train.total_steps > 0 && cfg.thresholds.probe_step >= cfg.train.total_steps)
        throw ConfigError("thresholds.probe_step must be < train.total_steps");

    // Telemetry defaults: run edges, warmup end, probe and midpoint.
    if (cfg.train.telemetry_steps.empty() && cfg.train.total_steps > 0) {
        cfg.train.telemetry_steps = {0u, cfg.train.warmup_steps, cfg.train.total_steps / 2,
                                     cfg.train.total_steps - 1};
    }
    cfg.train.telemetry_steps.insert(cfg.thresholds.probe_step);
    std::erase_if(cfg.train.telemetry_steps,
                  [&](std::uint32_t s) { return s >= cfg.train.total_steps; });
    cfg.train.validate();
    for (const auto& m : cfg.model_cells)
        if (cfg.train.seq_len < 2 || m.vocab_size != cfg.corpus.vocab.size)
            throw ConfigError("model/corpus vocabulary mismatch");
    return cfg;
}

inline json resolved_json(const ExperimentConfig& cfg) {
    using namespace cfgdetail;
    json j;
    j["name"] = cfg.name;
    j["seeds"] = cfg.seeds;
    j["output_dir"] = cfg.output_dir;
    j["seed_offset"] = cfg.seed_offset;
    j["corpus"] = corpus_to_json(cfg.corpus);
    if (cfg.noise_is_axis) {
        j["noise_axis"] = json::array();
        for (const auto& n : cfg.noise_cells) j["noise_axis"].push_back(noise_to_json(n));
    } else {
        j["noise"] = noise_to_json(cfg.noise_cells.front());
    }
    if (cfg.model_is_axis) {
        j["model_axis"] = json::array();
        for (const auto& m : cfg.model_cells) j["model_axis"].push_back(model_to_json(m));
    } else {
        j["model"] = model_to_json(cfg.model_cells.front());
    }
    j["train"] = train_to_json(cfg.train);
    if (cfg.lr_is_axis) j["lr_axis"] = cfg.lr_cells;
    if (cfg.qk_intervention_axis) j["qk_intervention_axis"] = true;
    j["criterion"] = {{"delta_nats", cfg.criterion.delta_nats},
                      {"window_steps", cfg.criterion.window_steps},
                      {"evaluation_horizon", cfg.criterion.evaluation_horizon},
                      {"ema_alpha", cfg.criterion.ema_alpha}};
    j["thresholds"] = {{"tau_high_lr", cfg.thresholds.tau_high_lr},
                       {"tau_noise", cfg.thresholds.tau_noise},
                       {"probe_step", cfg.thresholds.probe_step}};
    return j;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_config: cannot open " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("load_config: invalid JSON in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

struct CellPlan {
    std::string name;
    NoiseSetting noise;
    ModelConfig model;
    TrainConfig train;       // peak_lr resolved for the cell
    std::string config_hash;
    json resolved;           // hash source, covers everything result-affecting
};

namespace cfgdetail {

inline std::string sanitize(std::string s) {
    for (char& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '-';
    return s;
}

inline std::string selector_tag(const NoiseSelector& sel) {
    switch (sel.kind) {
        case NoiseSelector::Kind::FirstK: return "k" + std::to_string(sel.k);
        case NoiseSelector::Kind::Explicit: return "ids" + std::to_string(sel.ids.size());
        default:
            return "f" + sanitize(fmt_g(sel.target_mean_freq)) + "k" + std::to_string(sel.k);
    }
}

}  // namespace cfgdetail

inline std::vector<CellPlan> expand_cells(const ExperimentConfig& cfg) {
    using namespace cfgdetail;
    std::vector<CellPlan> cells;
    std::set<std::string> names;
    const std::vector<bool> qk_variants =
        cfg.qk_intervention_axis ? std::vector<bool>{false, true} : std::vector<bool>{false};
    for (const auto& model : cfg.model_cells)
        for (const auto& noise : cfg.noise_cells)
            for (double lr : cfg.lr_cells)
                for (bool qk_on : qk_variants) {
                    CellPlan cell;
                    cell.noise = noise;
                    cell.model = model;
                    if (qk_on) cell.model.qk_layernorm = true;
                    cell.train = cfg.train;
                    cell.train.peak_lr = lr;
                    std::string name;
                    if (cfg.model_is_axis)
                        name += "d" + std::to_string(model.model_dim) + "L" +
                                std::to_string(model.num_layers) + (model.moe ? "moe" : "") + "_";
                    name += std::string(to_string(noise.mode)) + "_a" +
                            sanitize(fmt_g(noise.alpha)) + "_" + selector_tag(noise.selector);
                    if (cfg.lr_is_axis) name += "_lr" + sanitize(fmt_g(lr));
                    if (cfg.qk_intervention_axis) name += qk_on ? "_qkln" : "_noqkln";
                    while (names.count(name)) name += "x";
                    names.insert(name);
                    cell.name = name;
                    json cj;
                    cj["cell"] = cell.name;
                    cj["seed_offset"] = cfg.seed_offset;
                    cj["corpus"] = corpus_to_json(cfg.corpus);
                    cj["noise"] = noise_to_json(cell.noise);
                    cj["model"] = model_to_json(cell.model);
                    cj["train"] = train_to_json(cell.train);
                    cj["criterion"] = {{"delta_nats", cfg.criterion.delta_nats},
                                       {"window_steps", cfg.criterion.window_steps},
                                       {"evaluation_horizon", cfg.criterion.evaluation_horizon},
                                       {"ema_alpha", cfg.criterion.ema_alpha}};
                    cj["thresholds"] = {{"tau_high_lr", cfg.thresholds.tau_high_lr},
                                        {"tau_noise", cfg.thresholds.tau_noise},
                                        {"probe_step", cfg.thresholds.probe_step}};
                    cell.resolved = cj;
                    cell.config_hash = hash_hex(fnv1a64(cj.dump()));
                    cells.push_back(std::move(cell));
                }
    return cells;
}

// Resolves the concrete noise vocabulary for a cell against the clean corpus.
struct MaterializedNoise {
    NoiseSpec spec;
    double mean_corpus_frequency = 0.0;
};

inline MaterializedNoise materialize_noise(const NoiseSetting& setting, const VocabSpec& vocab,
                                           const std::vector<std::uint64_t>& freqs,
                                           std::int64_t seed_offset) {
    MaterializedNoise out;
    out.spec.mode = setting.mode;
    out.spec.alpha = setting.alpha;
    out.spec.seed = setting.seed + static_cast<std::uint64_t>(seed_offset);
    switch (setting.selector.kind) {
        case NoiseSelector::Kind::FirstK:
            out.spec.noise_vocab = select_noise_vocab_first_k(vocab, setting.selector.k);
            break;
        case NoiseSelector::Kind::Explicit:
            out.spec.noise_vocab = setting.selector.ids;
            std::sort(out.spec.noise_vocab.begin(), out.spec.noise_vocab.end());
            break;
        case NoiseSelector::Kind::ByFrequency:
            out.spec.noise_vocab = select_noise_vocab_by_frequency(
                freqs, setting.selector.k, setting.selector.target_mean_freq);
            break;
    }
    out.spec.validate(vocab.size);
    double acc = 0.0;
    for (auto t : out.spec.noise_vocab) acc += static_cast<double>(freqs[t]);
    out.mean_corpus_frequency =
        out.spec.noise_vocab.empty() ? 0.0 : acc / static_cast<double>(out.spec.noise_vocab.size());
    return out;
}

// ---------------------------------------------------------------------------
// Artifact tree
// ---------------------------------------------------------------------------

struct CellResult {
    CellPlan plan;
    MaterializedNoise noise;
    StabilityReport report;
    std::vector<RunLog> logs;
    bool unstable_configuration = false;
};

inline std::optional<double> probe_max_logit(const RunLog& log, std::uint32_t probe_step) {
    for (const auto& r : log.records)
        if (r.step == probe_step && r.telemetry) return r.telemetry->max_attention_logit;
    return std::nullopt;
}

namespace cfgdetail {

inline void write_text_file(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("write_text_file: cannot open " + tmp);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw DataError("write_text_file: write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

}  // namespace cfgdetail

inline std::string summary_csv(const std::vector<CellResult>& results) {
    std::string out =
        "cell,mode,alpha,noise_vocab_size,noise_vocab_mean_freq,peak_lr,model_dim,num_layers,"
        "moe,qk_layernorm,num_seeds,num_diverged,probability,standard_error,"
        "unstable_configuration\n";
    for (const auto& r : results) {
        out += r.plan.name;
        out += ',';
        out += to_string(r.plan.noise.mode);
        out += ',';
        out += cfgdetail::fmt_g(r.plan.noise.alpha);
        out += ',';
        out += std::to_string(r.noise.spec.noise_vocab.size());
        out += ',';
        out += cfgdetail::fmt_g(r.noise.mean_corpus_frequency);
        out += ',';
        out += cfgdetail::fmt_g(r.plan.train.peak_lr);
        out += ',';
        out += std::to_string(r.plan.model.model_dim);
        out += ',';
        out += std::to_string(r.plan.model.num_layers);
        out += ',';
        out += r.plan.model.moe ? "1" : "0";
        out += ',';
        out += r.plan.model.qk_layernorm ? "1" : "0";
        out += ',';
        out += std::to_string(r.report.num_seeds);
        out += ',';
        out += std::to_string(r.report.num_diverged);
        out += ',';
        out += cfgdetail::fmt_g(r.report.probability);
        out += ',';
        out += cfgdetail::fmt_g(r.report.standard_error);
        out += ',';
        out += r.unstable_configuration ? "1" : "0";
        out += '\n';
    }
    return out;
}

inline std::string diagnosis_csv(const std::vector<CellResult>& results,
                                 const ThresholdConfig& thresholds) {
    std::string out = "run_id,status,trigger_step,probe_max_logit,label,tau_noise,tau_high_lr\n";
    for (const auto& r : results) {
        for (std::size_t i = 0; i < r.report.per_seed.size(); ++i) {
            const auto& sv = r.report.per_seed[i];
            const auto& log = r.logs[i];
            auto probe = probe_max_logit(log, thresholds.probe_step);
            if (!probe)
                throw DiagnosticError("diagnosis: missing probe snapshot at step " +
                                      std::to_string(thresholds.probe_step) + " for run " +
                                      log.run_id);
            auto diag = classify_run(log.run_id, sv.verdict, *probe, thresholds);
            out += log.run_id;
            out += ',';
            out += sv.verdict.status == RunStatus::Diverged ? "diverged" : "stable";
            out += ',';
            out += sv.verdict.trigger_step ? std::to_string(*sv.verdict.trigger_step) : "";
            out += ',';
            out += cfgdetail::fmt_g(*probe);
            out += ',';
            out += to_string(diag.label);
            out += ',';
            out += cfgdetail::fmt_g(thresholds.tau_noise);
            out += ',';
            out += cfgdetail::fmt_g(thresholds.tau_high_lr);
            out += '\n';
        }
    }
    return out;
}

struct RunExperimentOptions {
    int jobs = 1;
    bool force = false;
    bool quiet = true;
};

inline std::vector<CellResult> run_experiment(const ExperimentConfig& cfg,
                                              const RunExperimentOptions& opts = {}) {
    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir / "runs");
    cfgdetail::write_text_file(out_dir / "config.resolved.json", resolved_json(cfg).dump(2) + "\n");

    CorpusSpec corpus_spec = cfg.corpus;
    corpus_spec.seed += static_cast<std::uint64_t>(cfg.seed_offset);
    const Corpus clean = generate_clean_corpus(corpus_spec);
    const auto freqs = frequency_table(clean, corpus_spec.vocab);

    std::vector<std::uint64_t> eff_seeds;
    eff_seeds.reserve(cfg.seeds.size());
    for (auto s : cfg.seeds) eff_seeds.push_back(s + static_cast<std::uint64_t>(cfg.seed_offset));

    auto cells = expand_cells(cfg);

    // Refuse to mix artifacts produced under a different resolved config.
    std::vector<std::string> mismatched;
    for (const auto& cell : cells) {
        for (auto seed : eff_seeds) {
            const fs::path p = out_dir / "runs" / cell.name / (std::to_string(seed) + ".jsonl");
            if (!fs::exists(p)) continue;
            bool ok = false;
            try {
                ok = read_runlog(p).config_hash == cell.config_hash;
            } catch (const std::exception&) {
                ok = false;
            }
            if (!ok) {
                if (opts.force)
                    fs::remove(p);
                else
                    mismatched.push_back(p.string());
            }
        }
    }
    if (!mismatched.empty()) {
        std::string msg = "run_experiment: existing artifacts do not match this config "
                          "(rerun with --force to overwrite):";
        for (const auto& p : mismatched) msg += "\n  " + p;
        throw ConfigError(msg);
    }

    std::vector<CellResult> results;
    for (const auto& cell : cells) {
        CellResult res;
        res.plan = cell;
        res.noise = materialize_noise(cell.noise, corpus_spec.vocab, freqs, cfg.seed_offset);
        const Corpus noisy = inject_corpus(clean, res.noise.spec);

        const fs::path cell_dir = out_dir / "runs" / cell.name;
        RunSeedsOptions ro;
        ro.criterion = cfg.criterion;
        ro.early_halt = true;
        ro.min_steps_before_halt = cfg.thresholds.probe_step + 1;
        ro.jobs = opts.jobs;
        ro.persist = [&, cell_dir](const RunLog& log) {
            RunLog stamped = log;
            stamped.run_id = cell.name + "/seed" + std::to_string(log.seed);
            stamped.config_hash = cell.config_hash;
            stamped.resolved_config_json = cell.resolved.dump();
            write_runlog(cell_dir / (std::to_string(log.seed) + ".jsonl"), stamped);
        };
        ro.cached = [&, cell_dir](std::uint64_t seed) -> std::optional<RunLog> {
            const fs::path p = cell_dir / (std::to_string(seed) + ".jsonl");
            if (!fs::exists(p)) return std::nullopt;
            return read_runlog(p);
        };
        auto rr = run_seeds(cell.model, cell.train, noisy, eff_seeds, ro, cell.name);
        res.report = std::move(rr.report);
        res.logs = std::move(rr.logs);
        for (auto& log : res.logs) {
            if (log.run_id.empty()) {
                log.run_id = cell.name + "/seed" + std::to_string(log.seed);
                log.config_hash = cell.config_hash;
            }
            auto probe = probe_max_logit(log, cfg.thresholds.probe_step);
            if (probe && *probe > cfg.thresholds.tau_noise) res.unstable_configuration = true;
        }
        results.push_back(std::move(res));
    }

    cfgdetail::write_text_file(out_dir / "summary.csv", summary_csv(results));
    cfgdetail::write_text_file(out_dir / "diagnosis.csv",
                               diagnosis_csv(results, cfg.thresholds));
    return results;
}

// Rebuilds cell results from persisted RunLogs only.
inline std::vector<CellResult> load_results(const std::string& output_dir) {
    const fs::path out_dir(output_dir);
    std::ifstream in(out_dir / "config.resolved.json");
    if (!in) throw DataError("load_results: missing config.resolved.json in " + output_dir);
    ExperimentConfig cfg = config_from_json(json::parse(in));

    CorpusSpec corpus_spec = cfg.corpus;
    corpus_spec.seed += static_cast<std::uint64_t>(cfg.seed_offset);
    const Corpus clean = generate_clean_corpus(corpus_spec);
    const auto freqs = frequency_table(clean, corpus_spec.vocab);

    std::vector<CellResult> results;
    for (const auto& cell : expand_cells(cfg)) {
        CellResult res;
        res.plan = cell;
        res.noise = materialize_noise(cell.noise, corpus_spec.vocab, freqs, cfg.seed_offset);
        std::vector<SeedVerdict> verdicts;
        bool incomplete = false;
        for (auto s : cfg.seeds) {
            const auto seed = s + static_cast<std::uint64_t>(cfg.seed_offset);
            const fs::path p = out_dir / "runs" / cell.name / (std::to_string(seed) + ".jsonl");
            if (!fs::exists(p)) {
                incomplete = true;
                continue;
            }
            RunLog log = read_runlog(p);
            SeedVerdict sv;
            sv.seed = seed;
            auto series = log.loss_series();
            sv.verdict = detect_divergence(series, cfg.criterion);
            verdicts.push_back(sv);
            auto probe = probe_max_logit(log, cfg.thresholds.probe_step);
            if (probe && *probe > cfg.thresholds.tau_noise) res.unstable_configuration = true;
            res.logs.push_back(std::move(log));
        }
        res.report = StabilityReport::aggregate(cell.name, std::move(verdicts), incomplete);
        results.push_back(std::move(res));
    }
    return results;
}

inline ThresholdConfig thresholds_of(const std::string& output_dir) {
    std::ifstream in(fs::path(output_dir) / "config.resolved.json");
    if (!in) throw DataError("thresholds_of: missing config.resolved.json in " + output_dir);
    return config_from_json(json::parse(in)).thresholds;
}

// ---------------------------------------------------------------------------
// Figure data
// ---------------------------------------------------------------------------

enum class Figure { VocabSize, ContentFrequency, InsertOverwrite, LogitBars, CleanLoss,
                    ExpertScatter };

inline Figure figure_from_name(const std::string& name) {
    if (name == "fig2" || name == "vocab-size") return Figure::VocabSize;
    if (name == "fig3" || name == "content-frequency") return Figure::ContentFrequency;
    if (name == "fig4" || name == "insert-overwrite") return Figure::InsertOverwrite;
    if (name == "fig5" || name == "logit-bars") return Figure::LogitBars;
    if (name == "fig7" || name == "clean-loss") return Figure::CleanLoss;
    if (name == "fig8" || name == "expert-scatter") return Figure::ExpertScatter;
    throw ConfigError("unknown figure '" + name + "'; expected fig2|fig3|fig4|fig5|fig7|fig8");
}

inline std::vector<std::string> emit_figure_data(const std::string& output_dir, Figure fig) {
    using cfgdetail::fmt_g;
    const fs::path out_dir(output_dir);
    const fs::path fig_dir = out_dir / "figures";
    auto results = load_results(output_dir);
    const ThresholdConfig thresholds = thresholds_of(output_dir);
    std::vector<std::string> written;
    auto emit = [&](const std::string& name, const std::string& text) {
        cfgdetail::write_text_file(fig_dir / name, text);
        written.push_back((fig_dir / name).string());
    };

    switch (fig) {
        case Figure::VocabSize: {
            std::string csv = "noise_vocab_size,probability,standard_error\n";
            std::size_t rows = 0;
            for (const auto& r : results) {
                if (r.plan.noise.selector.kind != NoiseSelector::Kind::FirstK) continue;
                csv += std::to_string(r.noise.spec.noise_vocab.size()) + "," +
                       fmt_g(r.report.probability) + "," + fmt_g(r.report.standard_error) + "\n";
                ++rows;
            }
            if (rows < 2)
                throw DiagnosticError(
                    "fig2 requires >= 2 cells with a first_k noise vocabulary; found " +
                    std::to_string(rows));
            emit("fig2.csv", csv);
            break;
        }
        case Figure::ContentFrequency: {
            std::vector<std::pair<double, StabilityReport>> cells;
            for (const auto& r : results)
                if (r.plan.noise.selector.kind == NoiseSelector::Kind::ByFrequency)
                    cells.emplace_back(r.noise.mean_corpus_frequency, r.report);
            if (cells.size() < 2)
                throw DiagnosticError(
                    "fig3 requires >= 2 cells with a by_frequency noise vocabulary; found " +
                    std::to_string(cells.size()));
            auto analysis = content_frequency_analysis(cells);
            std::string csv = "mean_noise_frequency,probability,standard_error\n";
            for (const auto& p : analysis.scatter)
                csv += fmt_g(p.mean_frequency) + "," + fmt_g(p.probability) + "," +
                       fmt_g(p.standard_error) + "\n";
            emit("fig3.csv", csv);
            std::string stats = "pearson_r,zero_variance_flag\n";
            stats += analysis.pearson_r ? fmt_g(*analysis.pearson_r) + ",0\n" : ",1\n";
            emit("fig3_stats.csv", stats);
            break;
        }
        case Figure::InsertOverwrite: {
            bool have_insert = false, have_overwrite = false;
            std::string csv = "mode,alpha,probability,standard_error\n";
            for (const auto& r : results) {
                csv += std::string(to_string(r.plan.noise.mode)) + "," +
                       fmt_g(r.plan.noise.alpha) + "," + fmt_g(r.report.probability) + "," +
                       fmt_g(r.report.standard_error) + "\n";
                (r.plan.noise.mode == NoiseMode::Insert ? have_insert : have_overwrite) = true;
            }
            if (!have_insert || !have_overwrite)
                throw DiagnosticError(std::string("fig4 requires both modes; missing: ") +
                                      (!have_insert ? "insert " : "") +
                                      (!have_overwrite ? "overwrite" : ""));
            emit("fig4.csv", csv);
            break;
        }
        case Figure::LogitBars: {
            std::string csv = "cell,status,num_runs,mean_probe_max_logit\n";
            for (const auto& r : results) {
                double acc[2] = {0.0, 0.0};
                std::uint64_t cnt[2] = {0, 0};
                for (std::size_t i = 0; i < r.report.per_seed.size(); ++i) {
                    auto probe = probe_max_logit(r.logs[i], thresholds.probe_step);
                    if (!probe)
                        throw DiagnosticError("fig5: missing probe snapshot at step " +
                                              std::to_string(thresholds.probe_step) +
                                              " for run " + r.logs[i].run_id);
                    const int k =
                        r.report.per_seed[i].verdict.status == RunStatus::Diverged ? 1 : 0;
                    acc[k] += *probe;
                    ++cnt[k];
                }
                // Missing bars: no row when a config has zero runs of a type.
                for (int k = 0; k < 2; ++k)
                    if (cnt[k] > 0)
                        csv += r.plan.name + "," + (k == 1 ? "diverged" : "stable") + "," +
                               std::to_string(cnt[k]) + "," +
                               fmt_g(acc[k] / static_cast<double>(cnt[k])) + "\n";
            }
            emit("fig5.csv", csv);
            break;
        }
        case Figure::CleanLoss: {
            std::string csv = "cell,step,mean_clean_token_loss,num_stable_seeds\n";
            std::string flags = "cell,flag\n";
            bool any_flag = false;
            for (const auto& r : results) {
                std::vector<const RunLog*> stable;
                for (std::size_t i = 0; i < r.report.per_seed.size(); ++i)
                    if (r.report.per_seed[i].verdict.status == RunStatus::Stable)
                        stable.push_back(&r.logs[i]);
                if (stable.empty()) {
                    flags += r.plan.name + ",all_seeds_diverged\n";
                    any_flag = true;
                    continue;
                }
                const std::size_t steps = stable.front()->records.size();
                for (std::size_t s = 0; s < steps; ++s) {
                    double acc = 0.0;
                    std::uint64_t cnt = 0;
                    for (const auto* log : stable) {
                        if (s >= log->records.size()) continue;
                        if (log->records[s].clean_token_loss) {
                            acc += *log->records[s].clean_token_loss;
                            ++cnt;
                        }
                    }
                    if (cnt > 0)
                        csv += r.plan.name + "," + std::to_string(s) + "," +
                               fmt_g(acc / static_cast<double>(cnt)) + "," +
                               std::to_string(stable.size()) + "\n";
                }
            }
            emit("fig7.csv", csv);
            if (any_flag) emit("fig7_flags.csv", flags);
            break;
        }
        case Figure::ExpertScatter: {
            // A representative run: the first diverged MoE run, else the first
            // MoE run with expert stats at the probe step.
            const RunLog* chosen = nullptr;
            std::string chosen_cell;
            for (int want_diverged = 1; want_diverged >= 0 && !chosen; --want_diverged) {
                for (const auto& r : results) {
                    if (!r.plan.model.moe) continue;
                    for (std::size_t i = 0; i < r.report.per_seed.size(); ++i) {
                        const bool diverged =
                            r.report.per_seed[i].verdict.status == RunStatus::Diverged;
                        if (diverged != (want_diverged == 1)) continue;
                        chosen = &r.logs[i];
                        chosen_cell = r.plan.name;
                        break;
                    }
                    if (chosen) break;
                }
            }
            if (!chosen)
                throw DiagnosticError("fig8 requires at least one MoE cell with runs");
            std::vector<ExpertStat> stats;
            for (const auto& rec : chosen->records)
                if (rec.step == thresholds.probe_step && rec.telemetry)
                    stats = rec.telemetry->expert_stats;
            if (stats.empty())
                throw DiagnosticError("fig8: run " + chosen->run_id +
                                      " has no expert stats at probe step " +
                                      std::to_string(thresholds.probe_step));
            std::map<std::uint32_t, std::vector<ExpertStat>> by_layer;
            for (const auto& st : stats) by_layer[st.layer].push_back(st);
            for (const auto& [layer, entries] : by_layer)
                emit("fig8_layer" + std::to_string(layer) + ".csv", expert_stats_csv(entries));
            auto analysis = router_correlation_analysis(stats);
            std::string csv = "layer,pearson_r,skipped_flag\n";
            for (const auto& lr : analysis.per_layer)
                csv += std::to_string(lr.layer) + "," + (lr.r ? fmt_g(*lr.r) : "") + "," +
                       (lr.r ? "0" : "1") + "\n";
            csv += std::string("mean,") + (analysis.mean_r ? fmt_g(*analysis.mean_r) : "") + "," +
                   (analysis.mean_r ? "0" : "1") + "\n";
            emit("fig8_correlations.csv", csv);
            break;
        }
    }
    return written;
}

}  // namespace instab

#endif  // INSTAB_EXPERIMENT_HPP
