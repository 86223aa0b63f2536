#include "fstq/netsim.h"

#include <algorithm>
#include <cmath>

#include "fstq/errors.h"
#include "fstq/rng.h"

namespace fstq {

void ChannelProfile::validate() const {
    auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
    if (kind == Kind::kFixed) {
        if (!positive(fixed_rate_bps)) throw ConfigError("fixed rate must be positive");
        return;
    }
    if (!positive(base_rate_lo_bps) || !(base_rate_hi_bps >= base_rate_lo_bps)) {
        throw ConfigError("base rate band must be positive and ordered");
    }
    if (!positive(straggler_rate_lo_bps) || !(straggler_rate_hi_bps >= straggler_rate_lo_bps)) {
        throw ConfigError("straggler rate band must be positive and ordered");
    }
    if (!(straggler_fraction >= 0.0 && straggler_fraction <= 1.0)) {
        throw ConfigError("straggler fraction must lie in [0, 1]");
    }
    if (!(jitter >= 0.0 && jitter < 1.0)) throw ConfigError("rate jitter must lie in [0, 1)");
}

bool is_straggler(const ChannelProfile& profile, std::uint32_t client, std::uint64_t seed) {
    if (profile.kind == ChannelProfile::Kind::kFixed) return false;
    auto gen = rng::stream(seed, rng::Purpose::kChannelBase, {client});
    return rng::uniform01(gen) < profile.straggler_fraction;
}

double sample_rate(const ChannelProfile& profile, std::uint32_t client, std::uint64_t round,
                   std::uint64_t seed) {
    if (profile.kind == ChannelProfile::Kind::kFixed) return profile.fixed_rate_bps;

    auto gen = rng::stream(seed, rng::Purpose::kChannelBase, {client});
    const bool straggler = rng::uniform01(gen) < profile.straggler_fraction;
    const double u = rng::uniform01(gen);
    double lo, hi, base;
    if (straggler) {
        lo = profile.straggler_rate_lo_bps;
        hi = profile.straggler_rate_hi_bps;
        base = lo + u * (hi - lo);
    } else {
        lo = profile.base_rate_lo_bps;
        hi = profile.base_rate_hi_bps;
        base = std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
    }
    if (profile.jitter == 0.0) return base;
    auto jit = rng::stream(seed, rng::Purpose::kChannelJitter, {client, round});
    const double factor = 1.0 + profile.jitter * (2.0 * rng::uniform01(jit) - 1.0);
    return std::clamp(base * factor, lo, hi);
}

double comm_time(double bits, double rate_bps) {
    if (!(rate_bps > 0.0)) throw ArgumentError("uplink rate must be positive");
    if (bits < 0.0) throw ArgumentError("payload bits must be nonnegative");
    return bits / rate_bps;
}

RoundTime round_time(std::span<const ClientTiming> clients, double server_seconds) {
    RoundTime out;
    double slowest = 0.0;
    for (const ClientTiming& c : clients) {
        if (!c.available) continue;
        out.empty = false;
        slowest = std::max(slowest, c.total());
    }
    out.seconds = server_seconds + slowest;
    return out;
}

void EnergyModel::validate() const {
    if (!(tx_power_watts > 0.0) || !(compute_power_watts > 0.0)) {
        throw ConfigError("transmit and compute powers must be positive");
    }
}

double client_energy(const ClientTiming& timing, const EnergyModel& model) {
    return model.compute_power_watts * timing.comp_seconds + model.tx_power_watts * timing.comm_seconds;
}

EnergySummary round_energy(std::span<const ClientTiming> clients, const EnergyModel& model) {
    EnergySummary out;
    if (clients.empty()) return out;
    double sum = 0.0;
    for (const ClientTiming& c : clients) {
        const double e = client_energy(c, model);
        sum += e;
        if (c.available) out.straggler_joules = std::max(out.straggler_joules, e);
    }
    out.mean_round_joules = sum / static_cast<double>(clients.size());
    return out;
}

bool apply_packet_loss(std::size_t message_bytes, double loss_rate, std::size_t chunk_bytes,
                       std::uint64_t seed) {
    if (!(loss_rate >= 0.0 && loss_rate < 1.0)) throw ArgumentError("loss rate must lie in [0, 1)");
    if (chunk_bytes == 0) throw ArgumentError("chunk size must be positive");
    if (loss_rate == 0.0) return true;
    const std::size_t chunks = (message_bytes + chunk_bytes - 1) / chunk_bytes;
    auto gen = rng::stream(seed, rng::Purpose::kPacketLoss);
    for (std::size_t c = 0; c < chunks; ++c) {
        if (rng::uniform01(gen) < loss_rate) return false;
    }
    return true;
}

double ComputeModel::sample(double method_multiplier, std::uint32_t client, std::uint64_t round,
                            std::uint64_t seed) const {
    double factor = 1.0;
    if (jitter > 0.0) {
        auto gen = rng::stream(seed, rng::Purpose::kCompute, {client, round});
        factor += jitter * (2.0 * rng::uniform01(gen) - 1.0);
    }
    return base_seconds * method_multiplier * factor;
}

}  // namespace fstq
