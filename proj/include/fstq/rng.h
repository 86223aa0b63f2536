#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fstq::rng {

// Independent, reproducible random streams keyed by (seed, purpose, ids...).
// Every stochastic choice in the simulator draws from its own stream so that
// methods compared under one seed see identical sampling, availability and
// channel draws regardless of what else they consume.
enum class Purpose : std::uint64_t {
    kModelInit = 1,
    kDataset,
    kHeldOut,
    kPartition,
    kClientSampling,
    kAvailability,
    kMinibatch,
    kChannelBase,
    kChannelJitter,
    kCompute,
    kPacketLoss,
    kQsgd,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive(std::uint64_t seed, Purpose purpose,
                            std::initializer_list<std::uint64_t> ids = {}) {
    std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(purpose)));
    for (std::uint64_t id : ids) {
        h = splitmix64(h ^ splitmix64(id + 0x632be59bd9b4e019ULL));
    }
    return h;
}

inline std::mt19937_64 stream(std::uint64_t seed, Purpose purpose,
                              std::initializer_list<std::uint64_t> ids = {}) {
    return std::mt19937_64(derive(seed, purpose, ids));
}

// Uniform double in [0, 1) using the top 53 bits.
inline double uniform01(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

}  // namespace fstq::rng
