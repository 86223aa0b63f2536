#include "fstq/fed_protocol.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "fstq/errors.h"
#include "fstq/fisher.h"
#include "fstq/rng.h"

namespace fstq {

void FederatedConfig::validate() const {
    if (num_clients < 1) throw ConfigError("num_clients must be at least 1");
    if (clients_per_round < 1 || clients_per_round > num_clients) {
        throw ConfigError("clients_per_round must lie in [1, num_clients]");
    }
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be positive");
    }
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    if (!(server_lr > 0.0) || !std::isfinite(server_lr)) throw ConfigError("server_lr must be positive");
    if (refresh_interval < 1) throw ConfigError("refresh_interval must be at least 1");
    if (!(token_rho > 0.0 && token_rho < 1.0) || !(fisher_rho > 0.0 && fisher_rho < 1.0)) {
        throw ConfigError("EMA decays must lie in (0, 1)");
    }
    if (!(token_ratio > 0.0 && token_ratio <= 1.0)) throw ConfigError("token_ratio must lie in (0, 1]");
    if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw ConfigError("drop_prob must lie in [0, 1)");
    if (!(dirichlet_alpha > 0.0) || !std::isfinite(dirichlet_alpha)) {
        throw ConfigError("dirichlet_alpha must be positive");
    }
    policy.validate();
}

std::vector<std::uint32_t> RoundPlan::responders() const {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
        if (available[i]) out.push_back(sampled[i]);
    }
    return out;
}

std::vector<std::vector<std::size_t>> partition_dirichlet(std::span<const std::uint32_t> labels,
                                                          std::size_t num_clients, double alpha,
                                                          std::uint64_t seed) {
    if (num_clients < 1) throw ArgumentError("partition needs at least one client");
    if (!(alpha > 0.0)) throw ArgumentError("Dirichlet concentration must be positive");

    std::vector<std::vector<std::size_t>> shards(num_clients);
    if (labels.empty()) return shards;

    const std::uint32_t classes = *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    for (std::uint32_t c = 0; c < classes; ++c) {
        auto& items = by_class[c];
        if (items.empty()) continue;
        auto gen = rng::stream(seed, rng::Purpose::kPartition, {c});
        std::gamma_distribution<double> gamma(alpha, 1.0);
        std::vector<double> p(num_clients);
        double total = 0.0;
        for (double& v : p) total += (v = gamma(gen));
        if (!(total > 0.0)) {
            // Every draw underflowed; fall back to a single random owner.
            std::fill(p.begin(), p.end(), 0.0);
            p[gen() % num_clients] = 1.0;
            total = 1.0;
        }
        std::shuffle(items.begin(), items.end(), gen);

        const double n = static_cast<double>(items.size());
        double cum = 0.0;
        std::size_t start = 0;
        for (std::size_t k = 0; k < num_clients; ++k) {
            cum += p[k] / total;
            std::size_t stop = k + 1 == num_clients
                                   ? items.size()
                                   : std::min(items.size(), static_cast<std::size_t>(std::llround(cum * n)));
            stop = std::max(stop, start);
            shards[k].insert(shards[k].end(), items.begin() + static_cast<std::ptrdiff_t>(start),
                             items.begin() + static_cast<std::ptrdiff_t>(stop));
            start = stop;
        }
    }
    for (auto& s : shards) std::sort(s.begin(), s.end());
    return shards;
}

RoundPlan plan_round(const FederatedConfig& config, std::uint64_t round) {
    RoundPlan plan;
    std::vector<std::uint32_t> ids(config.num_clients);
    std::iota(ids.begin(), ids.end(), 0u);
    auto gen = rng::stream(config.seed, rng::Purpose::kClientSampling, {round});
    // Partial Fisher-Yates: the first m entries are a uniform m-subset.
    for (std::size_t i = 0; i < config.clients_per_round; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(gen() % (ids.size() - i));
        std::swap(ids[i], ids[j]);
    }
    plan.sampled.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(config.clients_per_round));
    std::sort(plan.sampled.begin(), plan.sampled.end());
    for (std::uint32_t k : plan.sampled) {
        auto avail = rng::stream(config.seed, rng::Purpose::kAvailability, {round, k});
        plan.available.push_back(rng::uniform01(avail) >= config.drop_prob ? 1 : 0);
    }
    return plan;
}

std::vector<std::size_t> sample_minibatch(std::size_t shard_size, std::size_t batch_size,
                                          std::uint64_t seed, std::uint32_t client,
                                          std::uint64_t round, std::size_t step) {
    const std::size_t n = std::min(shard_size, batch_size);
    std::vector<std::size_t> pool(shard_size);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    auto gen = rng::stream(seed, rng::Purpose::kMinibatch, {client, round, step});
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(gen() % (shard_size - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(n);
    return pool;
}

ClientUpdate client_round(const ToyModel& global, const ClientState& client,
                          const FederatedConfig& config, std::uint64_t round,
                          const GroupLayout& layout) {
    if (client.shard.empty()) throw ArgumentError("client_round needs a non-empty shard");

    ClientUpdate out;
    out.client = client.id;
    ToyModel local = global;
    const std::vector<double> theta0 = global.adapter.flatten();
    std::vector<double> theta = theta0;
    const std::size_t dim = theta.size();

    std::size_t width = 0;
    for (const Sample& s : client.shard) width = std::max(width, s.sequence.target_count());
    const std::size_t slots = std::min(config.batch_size, client.shard.size());
    const std::size_t grid = slots * width;

    TokenSensitivityTracker tracker(grid, config.token_rho);
    DiagonalFisher fisher(dim, config.fisher_rho);
    TokenMask mask{std::vector<std::uint8_t>(grid, 1), grid};
    bool refreshed_once = false;
    double density_sum = 0.0;

    std::vector<double> grad(dim);
    std::vector<double> g(grid);
    std::vector<double> weights;
    for (std::size_t s = 1; s <= config.local_steps; ++s) {
        const auto batch = sample_minibatch(client.shard.size(), config.batch_size, config.seed,
                                            client.id, round, s);
        const bool refresh = config.token_filtering && s % config.refresh_interval == 0;
        const bool full_loss = !config.token_filtering || refresh;

        std::fill(grad.begin(), grad.end(), 0.0);
        std::fill(g.begin(), g.end(), -std::numeric_limits<double>::infinity());
        std::size_t targets = 0;
        std::size_t kept = 0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const TokenSequence& seq = client.shard[batch[b]].sequence;
            const std::size_t n = seq.target_count();
            weights.assign(n, 1.0);
            if (!full_loss) {
                for (std::size_t i = 0; i < n; ++i) weights[i] = mask.z[b * width + i];
            }
            targets += n;
            kept += static_cast<std::size_t>(std::accumulate(weights.begin(), weights.end(), 0.0));
            const BatchGradients bg = backward_weighted(local, seq, weights);
            const auto flat = bg.flat_adapter_grad();
            for (std::size_t j = 0; j < dim; ++j) grad[j] += flat[j];
            if (refresh) {
                for (std::size_t i = 0; i < n; ++i) g[b * width + i] = token_sensitivity(bg.token_embed_grads[i]);
            }
        }
        // Mean per-token loss over the minibatch's target positions.
        const double norm = targets > 0 ? 1.0 / static_cast<double>(targets) : 0.0;
        for (double& v : grad) v *= norm;
        density_sum += targets > 0 ? static_cast<double>(kept) / static_cast<double>(targets) : 1.0;

        fisher.accumulate(grad);
        sgd_step(theta, grad, config.learning_rate, config.grad_clip);
        local.adapter.assign(theta);

        if (refresh) {
            ++out.telemetry.refresh_steps;
            std::vector<double> ema_in(grid);
            std::size_t finite = 0;
            for (std::size_t i = 0; i < grid; ++i) {
                const bool pad = std::isinf(g[i]);
                ema_in[i] = pad ? 0.0 : g[i];
                finite += !pad;
            }
            tracker.update(ema_in);
            std::vector<double> scores(tracker.scores().begin(), tracker.scores().end());
            for (std::size_t i = 0; i < grid; ++i) {
                if (std::isinf(g[i])) scores[i] = -std::numeric_limits<double>::infinity();
            }
            mask = topk_mask(scores, retained_token_count(finite, config.token_ratio));

            if (!refreshed_once) {
                refreshed_once = true;
                std::size_t hit = 0;
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    hit += mask.z[b * width + client.shard[batch[b]].critical_position];
                }
                out.telemetry.critical_retained_after_first_refresh =
                    static_cast<double>(hit) / static_cast<double>(batch.size());
            }
        }
    }
    out.telemetry.steps_run = config.local_steps;
    out.telemetry.retained_token_fraction =
        config.local_steps > 0 ? density_sum / static_cast<double>(config.local_steps) : 1.0;

    out.delta.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) out.delta[j] = theta[j] - theta0[j];

    const bool nothing_to_send =
        std::all_of(out.delta.begin(), out.delta.end(), [](double v) { return v == 0.0; });
    if (nothing_to_send) {
        SparseUpdateMessage empty;
        empty.dim = static_cast<std::uint32_t>(dim);
        empty.group_count = static_cast<std::uint16_t>(layout.groups.size());
        out.compression.message = empty;
        out.compression.bytes = pack(empty);
        out.compression.reconstructed.assign(dim, 0.0);
    } else {
        out.compression = compress_update(out.delta, fisher.values(), layout, config.policy,
                                          rng::derive(config.seed, rng::Purpose::kQsgd, {client.id, round}));
    }
    out.telemetry.budget_too_small = out.compression.budget_too_small;
    out.telemetry.payload_bits = 8 * static_cast<std::uint64_t>(out.compression.bytes.size());
    out.telemetry.distortion = fisher_distortion(fisher.values(), out.delta, out.compression.reconstructed);
    return out;
}

AggregationResult server_aggregate(std::span<const double> global,
                                   std::span<const Contribution> contributions,
                                   const GroupLayout& layout, double server_lr) {
    if (global.size() != layout.dim) throw ArgumentError("global adapter does not match the layout");

    std::vector<const Contribution*> order;
    for (const Contribution& c : contributions) order.push_back(&c);
    std::sort(order.begin(), order.end(),
              [](const Contribution* a, const Contribution* b) { return a->client < b->client; });

    AggregationResult out;
    out.adapter.assign(global.begin(), global.end());
    std::vector<std::vector<double>> decoded;
    std::vector<double> sizes;
    for (const Contribution* c : order) {
        try {
            decoded.push_back(dequantize(unpack(c->bytes, layout), layout));
        } catch (const DecodeError& e) {
            spdlog::warn("dropping update from client {}: {}", c->client, e.what());
            out.rejected.push_back(c->client);
            continue;
        }
        out.accepted.push_back(c->client);
        sizes.push_back(static_cast<double>(c->sample_count));
    }
    const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0);
    if (out.accepted.empty() || !(total > 0.0)) {
        out.weights.assign(out.accepted.size(), 0.0);
        return out;
    }
    for (std::size_t k = 0; k < decoded.size(); ++k) {
        const double w = sizes[k] / total;
        out.weights.push_back(w);
        for (std::size_t j = 0; j < out.adapter.size(); ++j) {
            out.adapter[j] += server_lr * w * decoded[k][j];
        }
    }
    return out;
}

void NetworkScenario::validate() const {
    profile.validate();
    energy.validate();
    if (!(compute.base_seconds >= 0.0) || !(compute.jitter >= 0.0 && compute.jitter < 1.0)) {
        throw ConfigError("compute model needs nonnegative base seconds and jitter in [0, 1)");
    }
    if (!(compute_multiplier > 0.0)) throw ConfigError("compute multiplier must be positive");
    if (!(server_seconds >= 0.0)) throw ConfigError("server seconds must be nonnegative");
    if (!(packet_loss >= 0.0 && packet_loss < 1.0)) throw ConfigError("packet loss must lie in [0, 1)");
    if (chunk_bytes == 0) throw ConfigError("chunk bytes must be positive");
}

std::uint64_t RoundLog::delivered_bytes() const {
    std::uint64_t sum = 0;
    for (const ClientRecord& c : clients) {
        if (c.delivered) sum += c.payload_bits / 8;
    }
    return sum;
}

Federation::Federation(FederationSetup setup)
    : setup_(std::move(setup)), model_(setup_.model), layout_(lora_group_layout(setup_.model.adapter)) {
    setup_.config.validate();
    setup_.scenario.validate();
    model_.validate();
    if (setup_.clients.size() != setup_.config.num_clients) {
        throw ConfigError("client list does not match num_clients");
    }
    server_.adapter = model_.adapter.flatten();
}

void Federation::restore(const ServerState& state) {
    if (state.adapter.size() != layout_.dim) throw ConfigError("checkpoint adapter has the wrong size");
    server_ = state;
    model_.adapter.assign(server_.adapter);
}

RoundLog Federation::step() {
    const FederatedConfig& cfg = setup_.config;
    const NetworkScenario& net = setup_.scenario;
    const std::uint64_t t = server_.round + 1;
    const RoundPlan plan = plan_round(cfg, t);

    RoundLog log;
    log.round = t;
    std::vector<ClientTiming> timings;
    std::vector<Contribution> delivered;
    double distortion_sum = 0.0;
    double density_sum = 0.0;
    std::size_t trained = 0;

    for (std::size_t i = 0; i < plan.sampled.size(); ++i) {
        const std::uint32_t k = plan.sampled[i];
        const ClientState& client = setup_.clients[k];
        ClientRecord rec;
        rec.client = k;
        rec.available = plan.available[i] && !client.shard.empty();
        ClientTiming timing;
        timing.available = rec.available;
        if (rec.available) {
            ClientUpdate up = client_round(model_, client, cfg, t, layout_);
            rec.payload_bits = up.telemetry.payload_bits;
            rec.rate_bps = sample_rate(net.profile, k, t, cfg.seed);
            rec.comp_seconds = net.compute.sample(net.compute_multiplier, k, t, cfg.seed);
            rec.comm_seconds = comm_time(static_cast<double>(rec.payload_bits), rec.rate_bps);
            rec.distortion = up.telemetry.distortion;
            rec.retained_token_fraction = up.telemetry.retained_token_fraction;
            rec.delivered = apply_packet_loss(up.compression.bytes.size(), net.packet_loss, net.chunk_bytes,
                                              rng::derive(cfg.seed, rng::Purpose::kPacketLoss, {k, t}));
            timing.comp_seconds = rec.comp_seconds;
            timing.comm_seconds = rec.comm_seconds;
            distortion_sum += rec.distortion;
            density_sum += rec.retained_token_fraction;
            ++trained;
            if (rec.delivered) {
                delivered.push_back({k, client.sample_count(), std::move(up.compression.bytes)});
            }
        }
        timings.push_back(timing);
        log.clients.push_back(rec);
    }

    const RoundTime rt = round_time(timings, net.server_seconds);
    log.round_seconds = rt.seconds;
    log.empty_round = rt.empty;
    log.energy = round_energy(timings, net.energy);
    log.mean_distortion = trained ? distortion_sum / static_cast<double>(trained) : 0.0;
    log.retained_token_fraction = trained ? density_sum / static_cast<double>(trained) : 0.0;

    const AggregationResult agg = server_aggregate(server_.adapter, delivered, layout_, cfg.server_lr);
    server_.adapter = agg.adapter;
    server_.round = t;
    model_.adapter.assign(server_.adapter);
    log.accuracy = answer_accuracy(model_, setup_.held_out);
    spdlog::debug("round {}: {} delivered, T_round {:.4f} s, accuracy {:.4f}", t, agg.accepted.size(),
                  log.round_seconds, log.accuracy);
    return log;
}

std::vector<RoundLog> run_federation(FederationSetup setup) {
    Federation fed(std::move(setup));
    std::vector<RoundLog> logs;
    while (!fed.done()) logs.push_back(fed.step());
    return logs;
}

}  // namespace fstq
