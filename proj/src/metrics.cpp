#include "fstq/metrics.h"

#include <sstream>

#include "fstq/errors.h"
#include "fstq/fisher.h"

namespace fstq {

double token_recall(const std::set<TokenRef>& reference, const std::set<TokenRef>& retained) {
    if (reference.empty()) return 1.0;
    std::size_t hit = 0;
    for (const TokenRef& t : reference) hit += retained.count(t);
    return static_cast<double>(hit) / static_cast<double>(reference.size());
}

std::set<TokenRef> top_sensitive_tokens(const ToyModel& model, std::span<const Sample> corpus,
                                        double fraction) {
    std::set<TokenRef> out;
    for (std::size_t n = 0; n < corpus.size(); ++n) {
        const TokenSequence& seq = corpus[n].sequence;
        const std::size_t targets = seq.target_count();
        const std::vector<double> ones(targets, 1.0);
        const BatchGradients bg = backward_weighted(model, seq, ones);
        std::vector<double> g(targets);
        for (std::size_t i = 0; i < targets; ++i) g[i] = token_sensitivity(bg.token_embed_grads[i]);
        const TokenMask mask = topk_mask(g, retained_token_count(targets, fraction));
        for (std::size_t i = 0; i < targets; ++i) {
            if (mask.z[i]) out.emplace(n, i);
        }
    }
    return out;
}

MetricsReport compute_metrics(std::span<const RoundLog> logs, double target_accuracy) {
    MetricsReport out;
    out.rounds = logs.size();
    double elapsed = 0.0;
    for (const RoundLog& r : logs) {
        elapsed += r.round_seconds;
        out.cumulative_uplink_bytes += r.delivered_bytes();
        if (!out.time_to_target && r.accuracy >= target_accuracy) {
            out.time_to_target = elapsed;
            out.bytes_to_target = out.cumulative_uplink_bytes;
        }
    }
    out.total_seconds = elapsed;
    if (!logs.empty()) {
        out.final_accuracy = logs.back().accuracy;
        out.token_recall = logs.back().token_recall;
    }
    return out;
}

void to_json(nlohmann::json& j, const ClientRecord& r) {
    j = nlohmann::json{{"client", r.client},
                       {"available", r.available},
                       {"delivered", r.delivered},
                       {"payload_bits", r.payload_bits},
                       {"rate_bps", r.rate_bps},
                       {"t_comp", r.comp_seconds},
                       {"t_comm", r.comm_seconds},
                       {"distortion", r.distortion},
                       {"retained_token_fraction", r.retained_token_fraction}};
}

void from_json(const nlohmann::json& j, ClientRecord& r) {
    j.at("client").get_to(r.client);
    j.at("available").get_to(r.available);
    j.at("delivered").get_to(r.delivered);
    j.at("payload_bits").get_to(r.payload_bits);
    j.at("rate_bps").get_to(r.rate_bps);
    j.at("t_comp").get_to(r.comp_seconds);
    j.at("t_comm").get_to(r.comm_seconds);
    j.at("distortion").get_to(r.distortion);
    j.at("retained_token_fraction").get_to(r.retained_token_fraction);
}

void to_json(nlohmann::json& j, const RoundLog& r) {
    j = nlohmann::json{{"round", r.round},
                       {"clients", r.clients},
                       {"t_round", r.round_seconds},
                       {"empty_round", r.empty_round},
                       {"energy_mean", r.energy.mean_round_joules},
                       {"energy_straggler", r.energy.straggler_joules},
                       {"accuracy", r.accuracy},
                       {"mean_distortion", r.mean_distortion},
                       {"retained_token_fraction", r.retained_token_fraction}};
    j["token_recall"] = r.token_recall ? nlohmann::json(*r.token_recall) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, RoundLog& r) {
    j.at("round").get_to(r.round);
    j.at("clients").get_to(r.clients);
    j.at("t_round").get_to(r.round_seconds);
    j.at("empty_round").get_to(r.empty_round);
    j.at("energy_mean").get_to(r.energy.mean_round_joules);
    j.at("energy_straggler").get_to(r.energy.straggler_joules);
    j.at("accuracy").get_to(r.accuracy);
    j.at("mean_distortion").get_to(r.mean_distortion);
    j.at("retained_token_fraction").get_to(r.retained_token_fraction);
    const auto& recall = j.at("token_recall");
    r.token_recall = recall.is_null() ? std::nullopt : std::optional<double>(recall.get<double>());
}

std::string to_jsonl(std::span<const RoundLog> logs) {
    std::string out;
    for (const RoundLog& r : logs) {
        out += nlohmann::json(r).dump();
        out += '\n';
    }
    return out;
}

std::vector<RoundLog> parse_jsonl(const std::string& text) {
    std::vector<RoundLog> logs;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            logs.push_back(nlohmann::json::parse(line).get<RoundLog>());
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("round log line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return logs;
}

}  // namespace fstq
