#pragma once

// Experiment scenarios: the versioned JSON config, the method catalogue, and
// runners for single methods and method comparisons.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fstq/fed_protocol.h"
#include "fstq/metrics.h"
#include "fstq/synthetic.h"
#include "fstq/toy_model.h"

namespace fstq {

inline constexpr int kConfigSchemaVersion = 1;

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> names = {"fed-fstq", "fedavg-lossless", "qsgd", "topk"};
    return names;
}

struct ScenarioConfig {
    std::uint64_t seed = 1;

    SyntheticTaskSpec task;
    std::size_t held_out_size = 400;
    ModelShape model{.vocab = 256, .embed_dim = 16, .rank = 4, .alpha = 4.0};

    FederatedConfig federation;  // policy fields are set per method
    double lambda = 1e8;
    std::optional<std::uint64_t> budget_bits = 4000;
    PercentileThresholds percentiles;
    unsigned qsgd_levels = 7;
    std::size_t topk_count = 40;

    char profile = 'b';
    ChannelProfile channel_a = ChannelProfile::profile_a();
    ChannelProfile channel_b = ChannelProfile::profile_b();
    EnergyModel energy;
    ComputeModel compute{.base_seconds = 0.002, .jitter = 0.1};
    double server_seconds = 0.0;
    double packet_loss = 0.0;
    std::size_t chunk_bytes = 1500;
    std::map<std::string, double> compute_multipliers = {
        {"fed-fstq", 1.17}, {"fedavg-lossless", 1.0}, {"qsgd", 1.10}, {"topk", 1.0}};

    double target_accuracy = 0.6;
    double recall_top_fraction = 0.1;
    std::size_t recall_corpus_size = 100;
    std::vector<std::string> methods = known_methods();

    ScenarioConfig();

    // Throws ConfigError listing every offending setting.
    void validate() const;
};

// Versioned JSON. Parsing rejects unknown keys and mistyped values, listing
// all of them in one ConfigError.
nlohmann::json scenario_to_json(const ScenarioConfig& config);
ScenarioConfig scenario_from_json(const nlohmann::json& j);

// Federated settings for one method, with its compression policy.
FederatedConfig method_config(const ScenarioConfig& config, const std::string& method);
NetworkScenario method_network(const ScenarioConfig& config, const std::string& method);

FederationSetup build_setup(const ScenarioConfig& config, const std::string& method);

struct MethodRun {
    std::string method;
    std::vector<RoundLog> logs;
    MetricsReport report;
    ServerState final_state;
};

struct RunHooks {
    // Called after every round with the log and the server state it produced.
    std::function<void(const RoundLog&, const ServerState&)> on_round;
    std::optional<ServerState> resume_from;
    std::vector<RoundLog> prior_logs;  // rounds already completed before resume
    // Final adapter of the lossless, unmasked reference run, for Token Recall.
    // Computed on demand when unset.
    std::optional<std::vector<double>> reference_adapter;
};

MethodRun run_method(const ScenarioConfig& config, const std::string& method, RunHooks hooks = {});

struct ComparisonRow {
    std::string method;
    MetricsReport report;
};

std::vector<MethodRun> run_comparison(const ScenarioConfig& config);

// One row per method: payload bytes, time_to_target, final accuracy, token_recall.
std::string comparison_csv(const std::vector<ComparisonRow>& rows);
std::string summary_text(const std::string& method, const MetricsReport& report, double target_accuracy);

}  // namespace fstq
