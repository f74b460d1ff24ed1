#ifndef INSTAB_RUNLOG_HPP
#define INSTAB_RUNLOG_HPP

// RunLog file format: JSON lines. A header line carries the resolved config
// and its hash, then one StepRecord per line, then a footer marking
// completion and any early-halt truncation. +inf is serialized as the string
// "inf". Files are written atomically (tmp + rename).

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "instab/trainer.hpp"

namespace instab {

namespace detail {

inline nlohmann::json json_number(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

inline double parse_number(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto& s = j.get_ref<const std::string&>();
        if (s == "inf") return kInf;
        if (s == "-inf") return -kInf;
        return std::numeric_limits<double>::quiet_NaN();
    }
    return j.get<double>();
}

}  // namespace detail

inline nlohmann::json snapshot_to_json(const TelemetrySnapshot& s) {
    nlohmann::json j;
    j["step"] = s.step;
    j["max_attention_logit"] = detail::json_number(s.max_attention_logit);
    j["per_layer_max_logit"] = nlohmann::json::array();
    for (double v : s.per_layer_max_logit) j["per_layer_max_logit"].push_back(detail::json_number(v));
    j["param_rms"] = detail::json_number(s.param_rms);
    j["param_rms_per_tensor"] = nlohmann::json::object();
    for (const auto& [name, v] : s.param_rms_per_tensor)
        j["param_rms_per_tensor"][name] = detail::json_number(v);
    j["grad_rms"] = detail::json_number(s.grad_rms);
    const std::pair<const std::vector<double>*, const char*> act_lists[] = {
        {&s.layer_input_absmean, "layer_input_absmean"},
        {&s.attn_out_absmean, "attn_out_absmean"},
        {&s.ffn_out_absmean, "ffn_out_absmean"}};
    for (const auto& [vec, key] : act_lists) {
        j[key] = nlohmann::json::array();
        for (double v : *vec) j[key].push_back(detail::json_number(v));
    }
    j["qk_stats"] = nlohmann::json::array();
    for (const auto& q : s.qk_stats)
        j["qk_stats"].push_back({{"mean_q_norm", detail::json_number(q.mean_q_norm)},
                                 {"mean_k_norm", detail::json_number(q.mean_k_norm)},
                                 {"argmax_q_norm", detail::json_number(q.argmax_q_norm)},
                                 {"argmax_k_norm", detail::json_number(q.argmax_k_norm)},
                                 {"argmax_cos", detail::json_number(q.argmax_cos)},
                                 {"max_abs_q_gain", detail::json_number(q.max_abs_q_gain)},
                                 {"max_abs_k_gain", detail::json_number(q.max_abs_k_gain)}});
    if (!s.expert_stats.empty()) {
        j["expert_stats"] = nlohmann::json::array();
        for (const auto& e : s.expert_stats)
            j["expert_stats"].push_back({{"layer", e.layer},
                                         {"expert", e.expert},
                                         {"token_count", e.token_count},
                                         {"noisy_fraction", detail::json_number(e.noisy_fraction)},
                                         {"ffn_out_absmean", detail::json_number(e.ffn_out_absmean)}});
    }
    return j;
}

inline TelemetrySnapshot snapshot_from_json(const nlohmann::json& j) {
    TelemetrySnapshot s;
    s.step = j.at("step").get<std::uint32_t>();
    s.max_attention_logit = detail::parse_number(j.at("max_attention_logit"));
    for (const auto& v : j.at("per_layer_max_logit"))
        s.per_layer_max_logit.push_back(detail::parse_number(v));
    s.param_rms = detail::parse_number(j.at("param_rms"));
    for (const auto& [name, v] : j.at("param_rms_per_tensor").items())
        s.param_rms_per_tensor[name] = detail::parse_number(v);
    s.grad_rms = detail::parse_number(j.at("grad_rms"));
    for (const auto& v : j.at("layer_input_absmean"))
        s.layer_input_absmean.push_back(detail::parse_number(v));
    for (const auto& v : j.at("attn_out_absmean")) s.attn_out_absmean.push_back(detail::parse_number(v));
    for (const auto& v : j.at("ffn_out_absmean")) s.ffn_out_absmean.push_back(detail::parse_number(v));
    for (const auto& q : j.at("qk_stats")) {
        QKStat st;
        st.mean_q_norm = detail::parse_number(q.at("mean_q_norm"));
        st.mean_k_norm = detail::parse_number(q.at("mean_k_norm"));
        st.argmax_q_norm = detail::parse_number(q.at("argmax_q_norm"));
        st.argmax_k_norm = detail::parse_number(q.at("argmax_k_norm"));
        st.argmax_cos = detail::parse_number(q.at("argmax_cos"));
        st.max_abs_q_gain = detail::parse_number(q.at("max_abs_q_gain"));
        st.max_abs_k_gain = detail::parse_number(q.at("max_abs_k_gain"));
        s.qk_stats.push_back(st);
    }
    if (j.contains("expert_stats")) {
        for (const auto& e : j.at("expert_stats")) {
            ExpertStat st;
            st.layer = e.at("layer").get<std::uint32_t>();
            st.expert = e.at("expert").get<std::uint32_t>();
            st.token_count = e.at("token_count").get<std::uint64_t>();
            st.noisy_fraction = detail::parse_number(e.at("noisy_fraction"));
            st.ffn_out_absmean = detail::parse_number(e.at("ffn_out_absmean"));
            s.expert_stats.push_back(st);
        }
    }
    return s;
}

inline std::string runlog_to_jsonl(const RunLog& log) {
    std::string out;
    nlohmann::json header;
    header["type"] = "header";
    header["format_version"] = 1;
    header["run_id"] = log.run_id;
    header["seed"] = log.seed;
    header["config_hash"] = log.config_hash;
    header["config"] = log.resolved_config_json.empty()
                           ? nlohmann::json::object()
                           : nlohmann::json::parse(log.resolved_config_json);
    out += header.dump();
    out += '\n';
    for (const auto& r : log.records) {
        nlohmann::json j;
        j["step"] = r.step;
        j["train_loss"] = detail::json_number(r.train_loss);
        if (r.clean_token_loss) j["clean_token_loss"] = detail::json_number(*r.clean_token_loss);
        j["lr"] = detail::json_number(r.lr);
        j["grad_norm_preclip"] = detail::json_number(r.grad_norm_preclip);
        if (r.telemetry) j["telemetry"] = snapshot_to_json(*r.telemetry);
        out += j.dump();
        out += '\n';
    }
    nlohmann::json footer;
    footer["type"] = "footer";
    footer["completed_steps"] = log.records.size();
    footer["truncated_early"] = log.truncated_early;
    if (log.halt_trigger_step)
        footer["halt_trigger_step"] = *log.halt_trigger_step;
    else
        footer["halt_trigger_step"] = nullptr;
    out += footer.dump();
    out += '\n';
    return out;
}

inline void write_runlog(const std::filesystem::path& path, const RunLog& log) {
    std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("write_runlog: cannot open " + tmp);
        const std::string text = runlog_to_jsonl(log);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw DataError("write_runlog: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

// Strict = footer required; loose reads accept truncated files as absent.
inline RunLog read_runlog(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("read_runlog: cannot open " + path.string());
    RunLog log;
    std::string line;
    bool have_header = false, have_footer = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        if (j.is_object() && j.contains("type")) {
            const auto type = j.at("type").get<std::string>();
            if (type == "header") {
                log.run_id = j.at("run_id").get<std::string>();
                log.seed = j.at("seed").get<std::uint64_t>();
                log.config_hash = j.at("config_hash").get<std::string>();
                log.resolved_config_json = j.at("config").dump();
                have_header = true;
            } else if (type == "footer") {
                log.truncated_early = j.at("truncated_early").get<bool>();
                if (!j.at("halt_trigger_step").is_null())
                    log.halt_trigger_step = j.at("halt_trigger_step").get<std::uint32_t>();
                have_footer = true;
            }
            continue;
        }
        StepRecord r;
        r.step = j.at("step").get<std::uint32_t>();
        r.train_loss = detail::parse_number(j.at("train_loss"));
        if (j.contains("clean_token_loss"))
            r.clean_token_loss = detail::parse_number(j.at("clean_token_loss"));
        r.lr = detail::parse_number(j.at("lr"));
        r.grad_norm_preclip = detail::parse_number(j.at("grad_norm_preclip"));
        if (j.contains("telemetry")) r.telemetry = snapshot_from_json(j.at("telemetry"));
        log.records.push_back(std::move(r));
    }
    if (!have_header) throw DataError("read_runlog: missing header in " + path.string());
    if (!have_footer) throw DataError("read_runlog: missing footer in " + path.string());
    return log;
}

}  // namespace instab

#endif  // INSTAB_RUNLOG_HPP
