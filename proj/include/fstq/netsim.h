#pragma once

// Uplink channel profiles, straggler-limited round timing, whole-message
// packet loss, and radio/compute energy accounting. Units are decimal:
// 1 MB = 1e6 bytes, 1 Mbps = 1e6 bit/s.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace fstq {

inline constexpr double kMegabit = 1e6;

inline constexpr double megabytes_to_bits(double mb) { return mb * 1e6 * 8.0; }

struct ChannelProfile {
    enum class Kind { kFixed, kHeterogeneous };

    Kind kind = Kind::kFixed;
    // Profile A
    double fixed_rate_bps = 20.0 * kMegabit;
    // Profile B: log-uniform base rates plus a slow straggler tail
    double base_rate_lo_bps = 5.0 * kMegabit;
    double base_rate_hi_bps = 50.0 * kMegabit;
    double straggler_fraction = 0.2;
    double straggler_rate_lo_bps = 0.5 * kMegabit;
    double straggler_rate_hi_bps = 2.0 * kMegabit;
    double jitter = 0.1;  // per-round multiplicative +-jitter, clamped to the client's band

    static ChannelProfile profile_a() { return {}; }
    static ChannelProfile profile_b() {
        ChannelProfile p;
        p.kind = Kind::kHeterogeneous;
        return p;
    }

    void validate() const;
};

// R_{k,t} in bit/s, a pure function of (profile, seed, client, round).
double sample_rate(const ChannelProfile& profile, std::uint32_t client, std::uint64_t round,
                   std::uint64_t seed);

// True when `client` falls in the straggler tail of a heterogeneous profile.
bool is_straggler(const ChannelProfile& profile, std::uint32_t client, std::uint64_t seed);

double comm_time(double bits, double rate_bps);

struct ClientTiming {
    double comp_seconds = 0.0;
    double comm_seconds = 0.0;
    bool available = false;

    double total() const { return comp_seconds + comm_seconds; }
};

struct RoundTime {
    double seconds = 0.0;
    bool empty = true;  // no available client
};

// T_srv + max over available clients of (T_comp + T_comm).
RoundTime round_time(std::span<const ClientTiming> clients, double server_seconds = 0.0);

struct EnergyModel {
    double tx_power_watts = 1.5;
    double compute_power_watts = 4.0;

    void validate() const;
};

double client_energy(const ClientTiming& timing, const EnergyModel& model);

struct EnergySummary {
    double mean_round_joules = 0.0;  // over every sampled client
    double straggler_joules = 0.0;   // max over available clients
};

EnergySummary round_energy(std::span<const ClientTiming> clients, const EnergyModel& model);

// Splits the message into ceil(bytes / chunk) chunks, each lost independently
// with `loss_rate`; any loss discards the whole message. Draws come from one
// stream per seed, so a shorter message sees a prefix of a longer one's draws.
bool apply_packet_loss(std::size_t message_bytes, double loss_rate, std::size_t chunk_bytes,
                       std::uint64_t seed);

// Simulated local compute time: base * method multiplier * (1 +- jitter),
// seeded per (seed, client, round).
struct ComputeModel {
    double base_seconds = 5.0;
    double jitter = 0.1;

    double sample(double method_multiplier, std::uint32_t client, std::uint64_t round,
                  std::uint64_t seed) const;
};

}  // namespace fstq
