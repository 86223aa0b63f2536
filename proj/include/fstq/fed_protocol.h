#pragma once

// Synchronous federated rounds over LoRA adapters: Dirichlet non-IID
// partitioning, client sampling with dropout, the token-filtered client
// protocol, and weighted aggregation of dequantized updates.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fstq/codec.h"
#include "fstq/fisher.h"
#include "fstq/netsim.h"
#include "fstq/synthetic.h"
#include "fstq/toy_model.h"

namespace fstq {

struct FederatedConfig {
    std::size_t num_clients = 100;       // K
    std::size_t clients_per_round = 10;  // m
    std::size_t local_steps = 20;        // E
    std::size_t batch_size = 4;
    double learning_rate = 0.5;          // eta
    std::optional<double> grad_clip;
    double server_lr = 1.0;              // eta_server
    std::size_t refresh_interval = 10;   // H
    double token_rho = kDefaultEmaDecay;
    double fisher_rho = kDefaultEmaDecay;
    double token_ratio = 0.8;            // r_tok
    // Off: every step trains on the full loss and no sensitivity is tracked.
    bool token_filtering = true;
    double drop_prob = 0.1;              // p_drop
    double dirichlet_alpha = 0.5;
    std::uint64_t seed = 0;
    CompressionPolicyConfig policy;
    std::size_t rounds = 50;

    // Throws ConfigError on any violated invariant.
    void validate() const;
};

struct ClientState {
    std::uint32_t id = 0;
    std::vector<Sample> shard;

    std::size_t sample_count() const { return shard.size(); }
};

struct ServerState {
    std::uint64_t round = 0;         // rounds completed
    std::vector<double> adapter;     // flattened Theta_t
};

struct RoundPlan {
    std::vector<std::uint32_t> sampled;  // ascending client ids
    std::vector<std::uint8_t> available;

    std::vector<std::uint32_t> responders() const;
};

// Per class, client proportions ~ Dirichlet(alpha); that class's items are
// shuffled and cut at the cumulative proportions. Returns item indices.
std::vector<std::vector<std::size_t>> partition_dirichlet(std::span<const std::uint32_t> labels,
                                                          std::size_t num_clients, double alpha,
                                                          std::uint64_t seed);

RoundPlan plan_round(const FederatedConfig& config, std::uint64_t round);

// Indices into a shard for one local step: min(batch, shard) distinct draws.
std::vector<std::size_t> sample_minibatch(std::size_t shard_size, std::size_t batch_size,
                                          std::uint64_t seed, std::uint32_t client,
                                          std::uint64_t round, std::size_t step);

struct ClientTelemetry {
    std::size_t steps_run = 0;
    std::size_t refresh_steps = 0;
    double distortion = 0.0;              // Fisher-weighted, of the transmitted delta
    double retained_token_fraction = 1.0; // mean mask density over training steps
    // Among the first refresh minibatch, fraction of sequences whose critical
    // target position the refreshed mask keeps. Unset without filtering.
    std::optional<double> critical_retained_after_first_refresh;
    std::uint64_t payload_bits = 0;
    bool budget_too_small = false;
};

struct ClientUpdate {
    std::uint32_t client = 0;
    std::vector<double> delta;  // theta_local - Theta_t, before compression
    CompressionResult compression;
    ClientTelemetry telemetry;
};

// `global` carries the frozen parts plus the current global adapter.
ClientUpdate client_round(const ToyModel& global, const ClientState& client,
                          const FederatedConfig& config, std::uint64_t round,
                          const GroupLayout& layout);

struct Contribution {
    std::uint32_t client = 0;
    std::size_t sample_count = 0;
    std::vector<std::uint8_t> bytes;
};

struct AggregationResult {
    std::vector<double> adapter;
    std::vector<std::uint32_t> accepted;  // ascending
    std::vector<std::uint32_t> rejected;  // undecodable
    std::vector<double> weights;          // aligned with `accepted`
};

AggregationResult server_aggregate(std::span<const double> global,
                                   std::span<const Contribution> contributions,
                                   const GroupLayout& layout, double server_lr);

// ---------------------------------------------------------------------------
// Round orchestration

struct NetworkScenario {
    ChannelProfile profile;
    EnergyModel energy;
    ComputeModel compute;
    double compute_multiplier = 1.0;  // per-method T_comp factor
    double server_seconds = 0.0;
    double packet_loss = 0.0;
    std::size_t chunk_bytes = 1500;

    void validate() const;
};

struct ClientRecord {
    std::uint32_t client = 0;
    bool available = false;
    bool delivered = false;
    std::uint64_t payload_bits = 0;
    double rate_bps = 0.0;
    double comp_seconds = 0.0;
    double comm_seconds = 0.0;
    double distortion = 0.0;
    double retained_token_fraction = 0.0;
};

struct RoundLog {
    std::uint64_t round = 0;  // 1-based
    std::vector<ClientRecord> clients;
    double round_seconds = 0.0;
    bool empty_round = false;
    EnergySummary energy;
    double accuracy = 0.0;
    double mean_distortion = 0.0;
    double retained_token_fraction = 0.0;
    std::optional<double> token_recall;  // filled on the final round by the runner

    std::uint64_t delivered_bytes() const;
};

struct FederationSetup {
    ToyModel model;  // frozen parts plus the initial global adapter
    std::vector<ClientState> clients;
    std::vector<Sample> held_out;
    FederatedConfig config;
    NetworkScenario scenario;
};

class Federation {
public:
    explicit Federation(FederationSetup setup);

    bool done() const { return server_.round >= setup_.config.rounds; }
    RoundLog step();

    const ServerState& server() const { return server_; }
    const ToyModel& global_model() const { return model_; }
    const FederationSetup& setup() const { return setup_; }
    const GroupLayout& layout() const { return layout_; }

    // Continue from a checkpointed server state; every per-round draw is keyed
    // by (seed, round), so resuming reproduces the uninterrupted run.
    void restore(const ServerState& state);

private:
    FederationSetup setup_;
    ToyModel model_;
    GroupLayout layout_;
    ServerState server_;
};

std::vector<RoundLog> run_federation(FederationSetup setup);

}  // namespace fstq
