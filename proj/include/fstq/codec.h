#pragma once

// Mixed-precision sparse uplink codec for adapter deltas.
//
// Pipeline: Fisher-weighted importance -> bit allocation over {0, 2, 4, 16}
// -> group-wise symmetric quantization -> bit-exact packed message. The
// server side unpacks and dequantizes into a dense delta.
//
// Wire layout, all multi-byte fields big-endian:
//
//   header (20 bytes)  magic "FSTQ" u32 | version u16 | mode u8 | pad u8 |
//                      d u32 | retained u32 | group_count u16 | reserved u16
//   indices            retained x u32, strictly increasing (absent in dense mode)
//   tags               2 bits per retained coordinate, 4 per byte, MSB first,
//                      01 = 2-bit, 10 = 4-bit, 11 = 16-bit (absent for lossless)
//   values             segments for widths 16, 4, 2 in that order, each
//                      byte-aligned, two's complement, ascending index order
//                      (lossless: retained x IEEE-754 float32)
//   scales             float32 per active (group, width) pair, in
//                      lexicographic (group id, width) order

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fstq/toy_model.h"

namespace fstq {

enum class BitWidth : std::uint8_t {
    kPruned = 0,
    kTwo = 2,
    kFour = 4,
    kSixteen = 16,
    kLossless = 32,  // raw float32 passthrough, debug/reference only
};

inline constexpr std::array<BitWidth, 3> kQuantizedWidths = {BitWidth::kTwo, BitWidth::kFour,
                                                             BitWidth::kSixteen};

constexpr int bit_count(BitWidth w) { return static_cast<int>(w); }

// Largest representable magnitude, 2^(b-1) - 1.
constexpr std::int32_t quant_max(BitWidth w) {
    return w == BitWidth::kPruned || w == BitWidth::kLossless
               ? 0
               : (std::int32_t{1} << (bit_count(w) - 1)) - 1;
}

struct BitAllocation {
    std::vector<BitWidth> widths;

    std::size_t size() const { return widths.size(); }
    std::size_t retained_count() const;
};

// Contiguous span of flattened coordinates sharing quantization scales.
struct QuantGroup {
    std::uint16_t id = 0;
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
};

struct GroupLayout {
    std::vector<QuantGroup> groups;
    std::size_t dim = 0;

    // Throws ArgumentError unless the groups partition [0, dim) in id order.
    void validate() const;
    std::size_t group_of(std::size_t coordinate) const;
};

GroupLayout single_group_layout(std::size_t dim);
// One group per LoRA factor: A, then B.
GroupLayout lora_group_layout(const LoraAdapter& adapter);

enum class CompressionMode { kPercentile, kBudgetGreedy, kLossless, kQsgd, kTopK };

struct PercentileThresholds {
    double high = 99.0;
    double mid = 90.0;
    double low = 50.0;
};

struct CompressionPolicyConfig {
    CompressionMode mode = CompressionMode::kBudgetGreedy;
    double lambda = 1.0;
    PercentileThresholds percentiles;
    std::optional<std::uint64_t> budget_bits;  // B_max; unset means unlimited
    double epsilon_scale = 1e-12;
    unsigned qsgd_levels = 7;
    std::size_t topk_count = 0;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Importance and allocation

// u_j = F_j * delta_j^2
std::vector<double> importance_scores(std::span<const double> fisher, std::span<const double> delta);

// max(0, 0.5 * log2(u / lambda)); a reference quantity, never transmitted.
std::vector<double> continuous_bitwidth(std::span<const double> importance, double lambda);

// Value at 1-based rank ceil(p/100 * n) of an ascending-sorted sample.
double nearest_rank_percentile(std::span<const double> sorted_ascending, double p);

BitAllocation percentile_allocate(std::span<const double> importance,
                                  const PercentileThresholds& thresholds);

// Bit price of a message with the given retained-width counts.
struct BitCostModel {
    std::uint64_t header_bits = 160;
    std::uint64_t index_bits = 32;
    std::uint64_t tag_bits = 2;
    std::uint64_t scale_bits = 32;
    bool byte_aligned = true;  // tags and each value segment padded to bytes
};

struct WidthCounts {
    std::uint64_t two = 0;
    std::uint64_t four = 0;
    std::uint64_t sixteen = 0;
    std::uint64_t active_scales = 0;

    std::uint64_t retained() const { return two + four + sixteen; }
};

std::uint64_t message_bits(const BitCostModel& cost, const WidthCounts& counts);

inline constexpr std::uint64_t kUnlimitedBudget = std::numeric_limits<std::uint64_t>::max();

struct GreedyAllocation {
    BitAllocation allocation;
    std::uint64_t total_bits = 0;  // under the cost model
    double distortion = 0.0;       // Fisher-weighted, with the real quantizer
    bool budget_too_small = false; // budget below the fixed header
};

// Budget-constrained greedy rate-distortion allocation.
//
// Starts with everything pruned and repeatedly applies the upgrade (any
// coordinate, current width -> any higher width) with the best ratio of
// Fisher-weighted distortion reduction to exact marginal message bits. Stops
// when no upgrade both fits the budget and pays the bit price 1/lambda.
// The climb runs once per subset of allowed widths, each finished with all
// widths allowed, and the lowest bits + lambda * D wins; the result is
// locally optimal under single upgrades.
GreedyAllocation greedy_budget_allocate(std::span<const double> delta, std::span<const double> fisher,
                                        const GroupLayout& layout, std::uint64_t budget_bits,
                                        double lambda, const BitCostModel& cost = {},
                                        double epsilon = 1e-12);

// Message bits plus lambda times Fisher-weighted distortion.
double lagrangian_objective(std::uint64_t bits, double distortion, double lambda);

// ---------------------------------------------------------------------------
// Quantization and the wire format

enum class WireMode : std::uint8_t { kMixed = 0, kLossless = 1, kQsgd = 2, kTopK = 3 };

inline constexpr std::uint32_t kWireMagic = 0x46535451;  // "FSTQ"
inline constexpr std::uint16_t kWireVersion = 1;
inline constexpr std::uint8_t kDenseIndexFlag = 0x80;
inline constexpr std::size_t kHeaderBytes = 20;

struct ScaleEntry {
    std::uint16_t group = 0;
    BitWidth width = BitWidth::kPruned;
    float scale = 0.0f;

    bool operator==(const ScaleEntry&) const = default;
};

struct SparseUpdateMessage {
    WireMode mode = WireMode::kMixed;
    bool dense = false;  // indices implied as 0..d-1 and not serialized
    std::uint32_t dim = 0;
    std::uint16_t group_count = 0;
    std::vector<std::uint32_t> indices;
    std::vector<BitWidth> widths;
    std::vector<std::int32_t> values;  // quantized modes
    std::vector<float> raw;            // lossless mode
    std::vector<ScaleEntry> scales;

    std::size_t retained_count() const { return indices.size(); }
    bool operator==(const SparseUpdateMessage&) const = default;
};

// max|delta_g| / (q_max + eps), rounded toward zero to a float32 so that
// x / scale never shrinks below its exact-scale value and ties stay ties.
// Only the group's largest magnitude can clip, by at most q_max ulps.
float group_scale(double max_abs, BitWidth width, double epsilon = 1e-12);

// round-half-away-from-zero(x / scale) clipped to [-q_max, q_max]; 0 for a zero scale.
std::int32_t quantize_value(double x, float scale, BitWidth width);

// Symmetric group-wise quantization of the retained coordinates; one scale
// per (group, active width) from the whole group's max magnitude.
SparseUpdateMessage quantize(std::span<const double> delta, const BitAllocation& alloc,
                             const GroupLayout& layout, double epsilon = 1e-12,
                             WireMode mode = WireMode::kMixed);

SparseUpdateMessage lossless_message(std::span<const double> delta, const GroupLayout& layout);

// Dense reconstruction with zeros at pruned coordinates.
std::vector<double> dequantize(const SparseUpdateMessage& msg, const GroupLayout& layout);

enum class DecodeErrorCode {
    kTruncated,
    kBadMagic,
    kUnknownVersion,
    kBadMode,
    kLayoutMismatch,
    kIndexOutOfRange,
    kNonIncreasingIndices,
    kReservedTag,
    kValueOutOfRange,
    kTrailingBytes,
};

const char* to_string(DecodeErrorCode code);

class DecodeError : public std::runtime_error {
public:
    DecodeError(DecodeErrorCode code, const std::string& detail);
    DecodeErrorCode code() const { return code_; }

private:
    DecodeErrorCode code_;
};

// Throws ArgumentError for a structurally invalid message.
std::vector<std::uint8_t> pack(const SparseUpdateMessage& msg);

// The layout is shared model structure; it is needed to place scales.
SparseUpdateMessage unpack(std::span<const std::uint8_t> bytes, const GroupLayout& layout);

struct PayloadBreakdown {
    std::uint64_t header_bits = 0;
    std::uint64_t index_bits = 0;
    std::uint64_t tag_bits = 0;
    std::uint64_t value_bits = 0;
    std::uint64_t scale_bits = 0;
    std::uint64_t total_bits = 0;

    bool operator==(const PayloadBreakdown&) const = default;
};

PayloadBreakdown payload_bits(const SparseUpdateMessage& msg);

// sum_j F_j (delta_j - delta_hat_j)^2
double fisher_distortion(std::span<const double> fisher, std::span<const double> delta,
                         std::span<const double> delta_hat);

// ---------------------------------------------------------------------------
// Baselines

// Stochastic rounding onto `levels` uniform levels per group (unbiased),
// dense, all 4-bit when levels <= 7 and all 16-bit otherwise.
SparseUpdateMessage qsgd_compress(std::span<const double> delta, const GroupLayout& layout,
                                  unsigned levels, std::uint64_t seed);

// The k largest magnitudes (ties to the lower index) at 16 bits.
SparseUpdateMessage topk_compress(std::span<const double> delta, const GroupLayout& layout,
                                  std::size_t k, double epsilon = 1e-12);

struct CompressionResult {
    SparseUpdateMessage message;
    std::vector<std::uint8_t> bytes;
    std::vector<double> reconstructed;
    bool budget_too_small = false;
};

// Full client-side compression under a policy. `seed` drives QSGD only.
CompressionResult compress_update(std::span<const double> delta, std::span<const double> fisher,
                                  const GroupLayout& layout, const CompressionPolicyConfig& policy,
                                  std::uint64_t seed);

}  // namespace fstq
