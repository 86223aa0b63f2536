#include "fstq/codec.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include "fstq/errors.h"
#include "fstq/rng.h"

namespace fstq {

namespace {

void check_same_size(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw ArgumentError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                            " vs " + std::to_string(b) + ")");
    }
}

// Index into a per-group [2, 4, 16] array.
int width_slot(BitWidth w) {
    switch (w) {
        case BitWidth::kTwo: return 0;
        case BitWidth::kFour: return 1;
        case BitWidth::kSixteen: return 2;
        default: return -1;
    }
}

std::uint8_t width_tag(BitWidth w) {
    switch (w) {
        case BitWidth::kTwo: return 0b01;
        case BitWidth::kFour: return 0b10;
        case BitWidth::kSixteen: return 0b11;
        default: throw ArgumentError("width has no wire tag");
    }
}

std::uint64_t padded(std::uint64_t bits, bool byte_aligned) {
    return byte_aligned ? (bits + 7) / 8 * 8 : bits;
}

std::vector<double> group_max_abs(std::span<const double> delta, const GroupLayout& layout) {
    std::vector<double> out(layout.groups.size(), 0.0);
    for (std::size_t g = 0; g < layout.groups.size(); ++g) {
        for (std::size_t j = layout.groups[g].begin; j < layout.groups[g].end; ++j) {
            out[g] = std::max(out[g], std::abs(delta[j]));
        }
    }
    return out;
}

float scale_lookup(const SparseUpdateMessage& msg, std::uint16_t group, BitWidth width) {
    for (const ScaleEntry& s : msg.scales) {
        if (s.group == group && s.width == width) return s.scale;
    }
    throw ArgumentError("message lacks a scale for group " + std::to_string(group) + " width " +
                        std::to_string(bit_count(width)));
}

// Active (group, width) pairs in lexicographic order.
std::vector<std::pair<std::uint16_t, BitWidth>> active_pairs(std::span<const std::uint32_t> indices,
                                                             std::span<const BitWidth> widths,
                                                             const GroupLayout& layout) {
    std::vector<std::array<bool, 3>> used(layout.groups.size(), {false, false, false});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int slot = width_slot(widths[i]);
        if (slot >= 0) used[layout.group_of(indices[i])][static_cast<std::size_t>(slot)] = true;
    }
    std::vector<std::pair<std::uint16_t, BitWidth>> pairs;
    for (std::size_t g = 0; g < used.size(); ++g) {
        for (std::size_t s = 0; s < 3; ++s) {
            if (used[g][s]) pairs.emplace_back(layout.groups[g].id, kQuantizedWidths[s]);
        }
    }
    return pairs;
}

class BitWriter {
public:
    void put_u8(std::uint8_t v) { align(); bytes_.push_back(v); }
    void put_u16(std::uint16_t v) { put_u8(static_cast<std::uint8_t>(v >> 8)); put_u8(static_cast<std::uint8_t>(v)); }
    void put_u32(std::uint32_t v) { put_u16(static_cast<std::uint16_t>(v >> 16)); put_u16(static_cast<std::uint16_t>(v)); }
    void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }

    // Low `n` bits of v, most significant first.
    void put_bits(std::uint32_t v, int n) {
        for (int i = n - 1; i >= 0; --i) {
            if (bit_ == 0) bytes_.push_back(0);
            if ((v >> i) & 1u) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> bit_);
            bit_ = (bit_ + 1) % 8;
        }
    }
    void align() { bit_ = 0; }

    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
    int bit_ = 0;
};

class BitReader {
public:
    explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint8_t get_u8() {
        align();
        need_bytes(1);
        return bytes_[pos_++];
    }
    std::uint16_t get_u16() { const auto hi = get_u8(); return static_cast<std::uint16_t>(hi << 8 | get_u8()); }
    std::uint32_t get_u32() { const std::uint32_t hi = get_u16(); return hi << 16 | get_u16(); }
    float get_f32() { return std::bit_cast<float>(get_u32()); }

    std::uint32_t get_bits(int n) {
        std::uint32_t v = 0;
        for (int i = 0; i < n; ++i) {
            if (bit_ == 0) need_bytes(1);
            v = (v << 1) | ((bytes_[pos_] >> (7 - bit_)) & 1u);
            if (++bit_ == 8) {
                bit_ = 0;
                ++pos_;
            }
        }
        return v;
    }
    void align() {
        if (bit_ != 0) {
            bit_ = 0;
            ++pos_;
        }
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need_bytes(std::size_t n) const {
        if (pos_ + n > bytes_.size()) {
            throw DecodeError(DecodeErrorCode::kTruncated, "payload ends at byte " + std::to_string(bytes_.size()));
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    int bit_ = 0;
};

std::int32_t sign_extend(std::uint32_t v, int bits) {
    const std::uint32_t sign = 1u << (bits - 1);
    return static_cast<std::int32_t>((v ^ sign)) - static_cast<std::int32_t>(sign);
}

void validate_message(const SparseUpdateMessage& msg) {
    const std::size_t n = msg.indices.size();
    if (msg.widths.size() != n) throw ArgumentError("message widths and indices differ in length");
    for (std::size_t i = 0; i < n; ++i) {
        if (msg.indices[i] >= msg.dim) throw ArgumentError("message index out of range");
        if (i > 0 && msg.indices[i] <= msg.indices[i - 1]) {
            throw ArgumentError("message indices must be strictly increasing");
        }
    }
    if (msg.dense) {
        if (n != msg.dim) throw ArgumentError("dense message must retain every coordinate");
    }
    if (msg.mode == WireMode::kLossless) {
        if (!msg.dense) throw ArgumentError("lossless messages are dense");
        if (msg.raw.size() != n || !msg.values.empty() || !msg.scales.empty()) {
            throw ArgumentError("lossless message carries raw values only");
        }
        for (BitWidth w : msg.widths) {
            if (w != BitWidth::kLossless) throw ArgumentError("lossless message with quantized width");
        }
        return;
    }
    if (msg.values.size() != n || !msg.raw.empty()) {
        throw ArgumentError("quantized message needs one value per retained coordinate");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (width_slot(msg.widths[i]) < 0) throw ArgumentError("retained width must be 2, 4 or 16");
        if (std::abs(msg.values[i]) > quant_max(msg.widths[i])) {
            throw ArgumentError("quantized value exceeds its width");
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t BitAllocation::retained_count() const {
    return static_cast<std::size_t>(
        std::count_if(widths.begin(), widths.end(), [](BitWidth w) { return w != BitWidth::kPruned; }));
}

void GroupLayout::validate() const {
    std::size_t next = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].id != g) throw ArgumentError("group ids must be 0..G-1 in order");
        if (groups[g].begin != next || groups[g].end < groups[g].begin) {
            throw ArgumentError("groups must partition the coordinates contiguously");
        }
        next = groups[g].end;
    }
    if (next != dim) throw ArgumentError("groups do not cover every coordinate");
    if (groups.size() > std::numeric_limits<std::uint16_t>::max()) throw ArgumentError("too many groups");
}

std::size_t GroupLayout::group_of(std::size_t coordinate) const {
    const auto it = std::upper_bound(groups.begin(), groups.end(), coordinate,
                                     [](std::size_t c, const QuantGroup& g) { return c < g.end; });
    if (it == groups.end()) throw ArgumentError("coordinate outside the group layout");
    return static_cast<std::size_t>(it - groups.begin());
}

GroupLayout single_group_layout(std::size_t dim) { return {{QuantGroup{0, 0, dim}}, dim}; }

GroupLayout lora_group_layout(const LoraAdapter& adapter) {
    const auto na = static_cast<std::size_t>(adapter.a.size());
    const auto nb = static_cast<std::size_t>(adapter.b.size());
    return {{QuantGroup{0, 0, na}, QuantGroup{1, na, na + nb}}, na + nb};
}

void CompressionPolicyConfig::validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be positive and finite");
    const auto& p = percentiles;
    if (!(p.low > 0.0 && p.low < p.mid && p.mid < p.high && p.high < 100.0)) {
        throw ConfigError("percentiles must satisfy 0 < low < mid < high < 100");
    }
    if (!(epsilon_scale > 0.0)) throw ConfigError("epsilon_scale must be positive");
    if (mode == CompressionMode::kQsgd && (qsgd_levels < 1 || qsgd_levels > 32767)) {
        throw ConfigError("qsgd_levels must lie in [1, 32767]");
    }
}

std::vector<double> importance_scores(std::span<const double> fisher, std::span<const double> delta) {
    check_same_size(fisher.size(), delta.size(), "importance_scores");
    std::vector<double> u(delta.size());
    for (std::size_t j = 0; j < u.size(); ++j) u[j] = fisher[j] * delta[j] * delta[j];
    return u;
}

std::vector<double> continuous_bitwidth(std::span<const double> importance, double lambda) {
    if (!(lambda > 0.0)) throw ArgumentError("lambda must be positive");
    std::vector<double> b(importance.size());
    for (std::size_t j = 0; j < b.size(); ++j) {
        b[j] = importance[j] > 0.0 ? std::max(0.0, 0.5 * std::log2(importance[j] / lambda)) : 0.0;
    }
    return b;
}

double nearest_rank_percentile(std::span<const double> sorted_ascending, double p) {
    if (sorted_ascending.empty()) throw ArgumentError("percentile of an empty sample");
    const double n = static_cast<double>(sorted_ascending.size());
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, sorted_ascending.size());
    return sorted_ascending[rank - 1];
}

BitAllocation percentile_allocate(std::span<const double> importance, const PercentileThresholds& t) {
    if (importance.empty()) throw ArgumentError("percentile allocation needs at least one coordinate");
    std::vector<double> sorted(importance.begin(), importance.end());
    std::sort(sorted.begin(), sorted.end());
    const double high = nearest_rank_percentile(sorted, t.high);
    const double mid = nearest_rank_percentile(sorted, t.mid);
    const double low = nearest_rank_percentile(sorted, t.low);
    BitAllocation alloc;
    alloc.widths.reserve(importance.size());
    for (double u : importance) {
        if (u >= high) alloc.widths.push_back(BitWidth::kSixteen);
        else if (u >= mid) alloc.widths.push_back(BitWidth::kFour);
        else if (u >= low) alloc.widths.push_back(BitWidth::kTwo);
        else alloc.widths.push_back(BitWidth::kPruned);
    }
    return alloc;
}

std::uint64_t message_bits(const BitCostModel& cost, const WidthCounts& c) {
    const std::uint64_t n = c.retained();
    return cost.header_bits + cost.index_bits * n + padded(cost.tag_bits * n, cost.byte_aligned) +
           16 * c.sixteen + padded(4 * c.four, cost.byte_aligned) +
           padded(2 * c.two, cost.byte_aligned) + cost.scale_bits * c.active_scales;
}

double lagrangian_objective(std::uint64_t bits, double distortion, double lambda) {
    return static_cast<double>(bits) + lambda * distortion;
}

GreedyAllocation greedy_budget_allocate(std::span<const double> delta, std::span<const double> fisher,
                                        const GroupLayout& layout, std::uint64_t budget_bits,
                                        double lambda, const BitCostModel& cost, double epsilon) {
    check_same_size(delta.size(), fisher.size(), "greedy_budget_allocate");
    check_same_size(delta.size(), layout.dim, "greedy_budget_allocate layout");
    if (!(lambda > 0.0)) throw ArgumentError("lambda must be positive");
    const std::size_t d = delta.size();

    GreedyAllocation out;
    out.allocation.widths.assign(d, BitWidth::kPruned);

    // Weighted squared error per coordinate at [pruned, 2, 4, 16].
    const auto max_abs = group_max_abs(delta, layout);
    std::vector<std::size_t> group(d);
    std::vector<std::array<double, 4>> wd(d);
    for (std::size_t g = 0; g < layout.groups.size(); ++g) {
        std::array<float, 3> scales{};
        for (std::size_t s = 0; s < 3; ++s) scales[s] = group_scale(max_abs[g], kQuantizedWidths[s], epsilon);
        for (std::size_t j = layout.groups[g].begin; j < layout.groups[g].end; ++j) {
            group[j] = g;
            wd[j][0] = fisher[j] * delta[j] * delta[j];
            for (std::size_t s = 0; s < 3; ++s) {
                const double rec = static_cast<double>(scales[s]) *
                                   quantize_value(delta[j], scales[s], kQuantizedWidths[s]);
                const double e = delta[j] - rec;
                wd[j][s + 1] = fisher[j] * e * e;
            }
        }
    }
    for (std::size_t j = 0; j < d; ++j) out.distortion += wd[j][0];

    struct State {
        WidthCounts counts;
        std::vector<std::array<std::uint32_t, 3>> pair_use;
        std::vector<int> level;  // 0 = pruned, 1..3 = slots 2/4/16
        std::uint64_t bits = 0;
        double distortion = 0.0;
    };
    State empty;
    empty.pair_use.assign(layout.groups.size(), {0, 0, 0});
    empty.level.assign(d, 0);
    empty.bits = message_bits(cost, empty.counts);
    empty.distortion = out.distortion;
    if (empty.bits > budget_bits) {
        out.budget_too_small = true;
        out.total_bits = 0;
        return out;
    }

    auto counts_after = [&](const State& st, std::size_t j, int to) {
        WidthCounts c = st.counts;
        const int from = st.level[j];
        auto bump = [&](int lvl, int delta_count) {
            std::uint64_t* field = lvl == 1 ? &c.two : lvl == 2 ? &c.four : &c.sixteen;
            *field = static_cast<std::uint64_t>(static_cast<std::int64_t>(*field) + delta_count);
            const auto use = st.pair_use[group[j]][static_cast<std::size_t>(lvl - 1)];
            if (delta_count > 0 && use == 0) ++c.active_scales;
            if (delta_count < 0 && use == 1) --c.active_scales;
        };
        if (from > 0) bump(from, -1);
        bump(to, +1);
        return c;
    };

    // Greedy upgrades restricted to the widths in `allowed` (bit s = slot s).
    auto climb = [&](State& st, unsigned allowed) {
        while (true) {
            bool found = false;
            std::size_t best_j = 0;
            int best_to = 0;
            double best_gain = 0.0;
            std::int64_t best_cost = 0;
            std::uint64_t best_bits = 0;
            // Upgrades that add no bits rank first, by objective decrease; the
            // rest by gain/cost ratio, compared by cross-multiplication.
            auto better = [&](double gain, std::int64_t dc) {
                if (!found) return true;
                const bool free_new = dc <= 0, free_best = best_cost <= 0;
                if (free_new != free_best) return free_new;
                if (free_new) {
                    return lambda * gain - static_cast<double>(dc) >
                           lambda * best_gain - static_cast<double>(best_cost);
                }
                return gain * static_cast<double>(best_cost) > best_gain * static_cast<double>(dc);
            };
            for (std::size_t j = 0; j < d; ++j) {
                for (int to = st.level[j] + 1; to <= 3; ++to) {
                    if (!(allowed & (1u << (to - 1)))) continue;
                    const double gain =
                        wd[j][static_cast<std::size_t>(st.level[j])] - wd[j][static_cast<std::size_t>(to)];
                    const std::uint64_t new_bits = message_bits(cost, counts_after(st, j, to));
                    if (new_bits > budget_bits) continue;
                    const auto dc = static_cast<std::int64_t>(new_bits) - static_cast<std::int64_t>(st.bits);
                    // Bit price: lambda * gain must cover the added bits. A move
                    // that frees bits (a scale released) must still lower the objective.
                    if (dc > 0 ? !(gain > 0.0) || lambda * gain < static_cast<double>(dc)
                               : !(lambda * gain - static_cast<double>(dc) > 0.0)) {
                        continue;
                    }
                    if (better(gain, dc)) {
                        found = true;
                        best_j = j;
                        best_to = to;
                        best_gain = gain;
                        best_cost = dc;
                        best_bits = new_bits;
                    }
                }
            }
            if (!found) return;
            const int from = st.level[best_j];
            st.counts = counts_after(st, best_j, best_to);
            if (from > 0) --st.pair_use[group[best_j]][static_cast<std::size_t>(from - 1)];
            ++st.pair_use[group[best_j]][static_cast<std::size_t>(best_to - 1)];
            st.level[best_j] = best_to;
            st.distortion -= best_gain;
            st.bits = best_bits;
        }
    };

    // Scale bits make the objective non-separable: one coordinate alone rarely
    // pays for a new (group, width) scale that several could share. Climb once
    // per subset of widths, finish each with all widths allowed, keep the best.
    State best;
    double best_objective = std::numeric_limits<double>::infinity();
    for (unsigned allowed = 1; allowed <= 7; ++allowed) {
        State st = empty;
        climb(st, allowed);
        if (allowed != 7) climb(st, 7);
        st.distortion = 0.0;
        for (std::size_t j = 0; j < d; ++j) st.distortion += wd[j][static_cast<std::size_t>(st.level[j])];
        const double objective = lagrangian_objective(st.bits, st.distortion, lambda);
        if (objective < best_objective) {
            best_objective = objective;
            best = std::move(st);
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        if (best.level[j] > 0) {
            out.allocation.widths[j] = kQuantizedWidths[static_cast<std::size_t>(best.level[j] - 1)];
        }
    }
    out.total_bits = best.bits;
    out.distortion = best.distortion;
    return out;
}

// ---------------------------------------------------------------------------

float group_scale(double max_abs, BitWidth width, double epsilon) {
    const double s = max_abs / (static_cast<double>(quant_max(width)) + epsilon);
    float f = static_cast<float>(s);
    if (static_cast<double>(f) > s) f = std::nextafter(f, 0.0f);
    return f;
}

std::int32_t quantize_value(double x, float scale, BitWidth width) {
    if (scale == 0.0f) return 0;
    const double q = std::round(x / static_cast<double>(scale));
    const double qmax = quant_max(width);
    return static_cast<std::int32_t>(std::clamp(q, -qmax, qmax));
}

SparseUpdateMessage quantize(std::span<const double> delta, const BitAllocation& alloc,
                             const GroupLayout& layout, double epsilon, WireMode mode) {
    check_same_size(delta.size(), alloc.size(), "quantize");
    check_same_size(delta.size(), layout.dim, "quantize layout");
    const auto max_abs = group_max_abs(delta, layout);

    SparseUpdateMessage msg;
    msg.mode = mode;
    msg.dim = static_cast<std::uint32_t>(delta.size());
    msg.group_count = static_cast<std::uint16_t>(layout.groups.size());
    std::vector<std::array<float, 3>> scales(layout.groups.size());
    for (std::size_t g = 0; g < scales.size(); ++g) {
        for (std::size_t s = 0; s < 3; ++s) scales[g][s] = group_scale(max_abs[g], kQuantizedWidths[s], epsilon);
    }
    for (std::size_t j = 0; j < delta.size(); ++j) {
        const BitWidth w = alloc.widths[j];
        if (w == BitWidth::kPruned) continue;
        const int slot = width_slot(w);
        if (slot < 0) throw ArgumentError("quantize supports widths 0, 2, 4 and 16");
        const auto g = layout.group_of(j);
        msg.indices.push_back(static_cast<std::uint32_t>(j));
        msg.widths.push_back(w);
        msg.values.push_back(quantize_value(delta[j], scales[g][static_cast<std::size_t>(slot)], w));
    }
    for (const auto& [g, w] : active_pairs(msg.indices, msg.widths, layout)) {
        msg.scales.push_back({g, w, scales[g][static_cast<std::size_t>(width_slot(w))]});
    }
    return msg;
}

SparseUpdateMessage lossless_message(std::span<const double> delta, const GroupLayout& layout) {
    check_same_size(delta.size(), layout.dim, "lossless_message layout");
    SparseUpdateMessage msg;
    msg.mode = WireMode::kLossless;
    msg.dense = true;
    msg.dim = static_cast<std::uint32_t>(delta.size());
    msg.group_count = static_cast<std::uint16_t>(layout.groups.size());
    msg.indices.resize(delta.size());
    std::iota(msg.indices.begin(), msg.indices.end(), 0u);
    msg.widths.assign(delta.size(), BitWidth::kLossless);
    msg.raw.reserve(delta.size());
    for (double v : delta) msg.raw.push_back(static_cast<float>(v));
    return msg;
}

std::vector<double> dequantize(const SparseUpdateMessage& msg, const GroupLayout& layout) {
    check_same_size(msg.dim, layout.dim, "dequantize layout");
    std::vector<double> out(msg.dim, 0.0);
    if (msg.mode == WireMode::kLossless) {
        for (std::size_t i = 0; i < msg.indices.size(); ++i) out[msg.indices[i]] = msg.raw[i];
        return out;
    }
    for (std::size_t i = 0; i < msg.indices.size(); ++i) {
        const auto g = static_cast<std::uint16_t>(layout.group_of(msg.indices[i]));
        out[msg.indices[i]] = static_cast<double>(scale_lookup(msg, g, msg.widths[i])) * msg.values[i];
    }
    return out;
}

// ---------------------------------------------------------------------------

const char* to_string(DecodeErrorCode code) {
    switch (code) {
        case DecodeErrorCode::kTruncated: return "truncated payload";
        case DecodeErrorCode::kBadMagic: return "bad magic";
        case DecodeErrorCode::kUnknownVersion: return "unknown version";
        case DecodeErrorCode::kBadMode: return "bad mode";
        case DecodeErrorCode::kLayoutMismatch: return "layout mismatch";
        case DecodeErrorCode::kIndexOutOfRange: return "index out of range";
        case DecodeErrorCode::kNonIncreasingIndices: return "non-increasing indices";
        case DecodeErrorCode::kReservedTag: return "reserved tag";
        case DecodeErrorCode::kValueOutOfRange: return "value out of range";
        case DecodeErrorCode::kTrailingBytes: return "trailing bytes";
    }
    return "unknown";
}

DecodeError::DecodeError(DecodeErrorCode code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

std::vector<std::uint8_t> pack(const SparseUpdateMessage& msg) {
    validate_message(msg);
    BitWriter w;
    w.put_u32(kWireMagic);
    w.put_u16(kWireVersion);
    w.put_u8(static_cast<std::uint8_t>(static_cast<std::uint8_t>(msg.mode) | (msg.dense ? kDenseIndexFlag : 0)));
    w.put_u8(0);
    w.put_u32(msg.dim);
    w.put_u32(static_cast<std::uint32_t>(msg.indices.size()));
    w.put_u16(msg.group_count);
    w.put_u16(0);

    if (!msg.dense) {
        for (std::uint32_t idx : msg.indices) w.put_u32(idx);
    }
    if (msg.mode == WireMode::kLossless) {
        for (float v : msg.raw) w.put_f32(v);
        return w.take();
    }
    for (BitWidth width : msg.widths) w.put_bits(width_tag(width), 2);
    w.align();
    for (BitWidth seg : {BitWidth::kSixteen, BitWidth::kFour, BitWidth::kTwo}) {
        for (std::size_t i = 0; i < msg.widths.size(); ++i) {
            if (msg.widths[i] == seg) {
                w.put_bits(static_cast<std::uint32_t>(msg.values[i]) & ((1u << bit_count(seg)) - 1u), bit_count(seg));
            }
        }
        w.align();
    }
    for (const ScaleEntry& s : msg.scales) w.put_f32(s.scale);
    return w.take();
}

SparseUpdateMessage unpack(std::span<const std::uint8_t> bytes, const GroupLayout& layout) {
    BitReader r(bytes);
    if (bytes.size() < kHeaderBytes) {
        throw DecodeError(DecodeErrorCode::kTruncated, "header needs 20 bytes, got " + std::to_string(bytes.size()));
    }
    if (const auto magic = r.get_u32(); magic != kWireMagic) {
        throw DecodeError(DecodeErrorCode::kBadMagic, "0x" + std::to_string(magic));
    }
    if (const auto version = r.get_u16(); version != kWireVersion) {
        throw DecodeError(DecodeErrorCode::kUnknownVersion, std::to_string(version));
    }
    const std::uint8_t mode_byte = r.get_u8();
    r.get_u8();
    SparseUpdateMessage msg;
    msg.dense = (mode_byte & kDenseIndexFlag) != 0;
    const std::uint8_t mode = mode_byte & 0x7f;
    if (mode > static_cast<std::uint8_t>(WireMode::kTopK)) {
        throw DecodeError(DecodeErrorCode::kBadMode, std::to_string(mode));
    }
    msg.mode = static_cast<WireMode>(mode);
    msg.dim = r.get_u32();
    const std::uint32_t retained = r.get_u32();
    msg.group_count = r.get_u16();
    r.get_u16();
    if (msg.dim != layout.dim || msg.group_count != layout.groups.size()) {
        throw DecodeError(DecodeErrorCode::kLayoutMismatch,
                          "message d=" + std::to_string(msg.dim) + " groups=" + std::to_string(msg.group_count));
    }
    if (retained > msg.dim) {
        throw DecodeError(DecodeErrorCode::kIndexOutOfRange, "retained count exceeds d");
    }
    if (msg.dense && retained != msg.dim) {
        throw DecodeError(DecodeErrorCode::kBadMode, "dense message must retain all coordinates");
    }
    if (msg.mode == WireMode::kLossless && !msg.dense) {
        throw DecodeError(DecodeErrorCode::kBadMode, "lossless messages are dense");
    }

    msg.indices.resize(retained);
    if (msg.dense) {
        std::iota(msg.indices.begin(), msg.indices.end(), 0u);
    } else {
        if (r.remaining() < std::size_t{4} * retained) {
            throw DecodeError(DecodeErrorCode::kTruncated, "index section");
        }
        for (std::uint32_t i = 0; i < retained; ++i) {
            msg.indices[i] = r.get_u32();
            if (msg.indices[i] >= msg.dim) {
                throw DecodeError(DecodeErrorCode::kIndexOutOfRange, std::to_string(msg.indices[i]));
            }
            if (i > 0 && msg.indices[i] <= msg.indices[i - 1]) {
                throw DecodeError(DecodeErrorCode::kNonIncreasingIndices, "at position " + std::to_string(i));
            }
        }
    }

    if (msg.mode == WireMode::kLossless) {
        msg.widths.assign(retained, BitWidth::kLossless);
        msg.raw.resize(retained);
        for (auto& v : msg.raw) v = r.get_f32();
    } else {
        msg.widths.resize(retained);
        for (auto& width : msg.widths) {
            switch (r.get_bits(2)) {
                case 0b01: width = BitWidth::kTwo; break;
                case 0b10: width = BitWidth::kFour; break;
                case 0b11: width = BitWidth::kSixteen; break;
                default: throw DecodeError(DecodeErrorCode::kReservedTag, "tag 00");
            }
        }
        r.align();
        msg.values.assign(retained, 0);
        for (BitWidth seg : {BitWidth::kSixteen, BitWidth::kFour, BitWidth::kTwo}) {
            for (std::size_t i = 0; i < retained; ++i) {
                if (msg.widths[i] != seg) continue;
                const std::int32_t v = sign_extend(r.get_bits(bit_count(seg)), bit_count(seg));
                if (std::abs(v) > quant_max(seg)) {
                    throw DecodeError(DecodeErrorCode::kValueOutOfRange, std::to_string(v));
                }
                msg.values[i] = v;
            }
            r.align();
        }
        for (const auto& [g, width] : active_pairs(msg.indices, msg.widths, layout)) {
            msg.scales.push_back({g, width, r.get_f32()});
        }
    }
    if (r.remaining() != 0) {
        throw DecodeError(DecodeErrorCode::kTrailingBytes, std::to_string(r.remaining()) + " bytes");
    }
    return msg;
}

PayloadBreakdown payload_bits(const SparseUpdateMessage& msg) {
    PayloadBreakdown p;
    const std::uint64_t n = msg.indices.size();
    p.header_bits = kHeaderBytes * 8;
    p.index_bits = msg.dense ? 0 : 32 * n;
    if (msg.mode == WireMode::kLossless) {
        p.value_bits = 32 * n;
    } else {
        std::uint64_t n2 = 0, n4 = 0, n16 = 0;
        for (BitWidth w : msg.widths) {
            n2 += w == BitWidth::kTwo;
            n4 += w == BitWidth::kFour;
            n16 += w == BitWidth::kSixteen;
        }
        p.tag_bits = padded(2 * n, true);
        p.value_bits = 16 * n16 + padded(4 * n4, true) + padded(2 * n2, true);
        p.scale_bits = 32 * msg.scales.size();
    }
    p.total_bits = p.header_bits + p.index_bits + p.tag_bits + p.value_bits + p.scale_bits;
    return p;
}

double fisher_distortion(std::span<const double> fisher, std::span<const double> delta,
                         std::span<const double> delta_hat) {
    check_same_size(fisher.size(), delta.size(), "fisher_distortion");
    check_same_size(delta.size(), delta_hat.size(), "fisher_distortion");
    double d = 0.0;
    for (std::size_t j = 0; j < delta.size(); ++j) {
        const double e = delta[j] - delta_hat[j];
        d += fisher[j] * e * e;
    }
    return d;
}

// ---------------------------------------------------------------------------

SparseUpdateMessage qsgd_compress(std::span<const double> delta, const GroupLayout& layout,
                                  unsigned levels, std::uint64_t seed) {
    if (levels < 1 || levels > 32767) throw ArgumentError("qsgd levels must lie in [1, 32767]");
    check_same_size(delta.size(), layout.dim, "qsgd_compress layout");
    const BitWidth width = levels <= 7 ? BitWidth::kFour : BitWidth::kSixteen;
    const auto max_abs = group_max_abs(delta, layout);
    std::mt19937_64 gen(rng::derive(seed, rng::Purpose::kQsgd));

    SparseUpdateMessage msg;
    msg.mode = WireMode::kQsgd;
    msg.dense = true;
    msg.dim = static_cast<std::uint32_t>(delta.size());
    msg.group_count = static_cast<std::uint16_t>(layout.groups.size());
    msg.indices.resize(delta.size());
    std::iota(msg.indices.begin(), msg.indices.end(), 0u);
    msg.widths.assign(delta.size(), width);
    msg.values.resize(delta.size());
    for (const QuantGroup& g : layout.groups) {
        // Rounded up so |delta| / scale never exceeds `levels`.
        float scale = static_cast<float>(max_abs[g.id] / levels);
        if (static_cast<double>(scale) * levels < max_abs[g.id]) {
            scale = std::nextafter(scale, std::numeric_limits<float>::infinity());
        }
        for (std::size_t j = g.begin; j < g.end; ++j) {
            std::int32_t q = 0;
            if (scale > 0.0f) {
                const double v = std::abs(delta[j]) / static_cast<double>(scale);
                const double lower = std::floor(v);
                const double up = rng::uniform01(gen) < (v - lower) ? 1.0 : 0.0;
                q = static_cast<std::int32_t>(std::min(lower + up, static_cast<double>(levels)));
                if (delta[j] < 0) q = -q;
            }
            msg.values[j] = q;
        }
        if (g.size() > 0) msg.scales.push_back({g.id, width, scale});
    }
    return msg;
}

SparseUpdateMessage topk_compress(std::span<const double> delta, const GroupLayout& layout,
                                  std::size_t k, double epsilon) {
    if (k > delta.size()) throw ArgumentError("top-k count exceeds dimension");
    std::vector<std::size_t> order(delta.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t l, std::size_t r) { return std::abs(delta[l]) > std::abs(delta[r]); });
    BitAllocation alloc;
    alloc.widths.assign(delta.size(), BitWidth::kPruned);
    for (std::size_t i = 0; i < k; ++i) alloc.widths[order[i]] = BitWidth::kSixteen;
    return quantize(delta, alloc, layout, epsilon, WireMode::kTopK);
}

CompressionResult compress_update(std::span<const double> delta, std::span<const double> fisher,
                                  const GroupLayout& layout, const CompressionPolicyConfig& policy,
                                  std::uint64_t seed) {
    CompressionResult out;
    switch (policy.mode) {
        case CompressionMode::kLossless:
            out.message = lossless_message(delta, layout);
            break;
        case CompressionMode::kQsgd:
            out.message = qsgd_compress(delta, layout, policy.qsgd_levels, seed);
            break;
        case CompressionMode::kTopK:
            out.message = topk_compress(delta, layout, std::min(policy.topk_count, delta.size()),
                                        policy.epsilon_scale);
            break;
        case CompressionMode::kBudgetGreedy:
            if (policy.budget_bits) {
                auto greedy = greedy_budget_allocate(delta, fisher, layout, *policy.budget_bits,
                                                     policy.lambda, BitCostModel{}, policy.epsilon_scale);
                out.budget_too_small = greedy.budget_too_small;
                out.message = quantize(delta, greedy.allocation, layout, policy.epsilon_scale);
                break;
            }
            [[fallthrough]];
        case CompressionMode::kPercentile: {
            const auto u = importance_scores(fisher, delta);
            out.message = quantize(delta, percentile_allocate(u, policy.percentiles), layout,
                                   policy.epsilon_scale);
            break;
        }
    }
    out.bytes = pack(out.message);
    out.reconstructed = dequantize(out.message, layout);
    return out;
}

}  // namespace fstq
