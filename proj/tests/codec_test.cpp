#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "fstq/codec.h"
#include "fstq/errors.h"
#include "oracles.h"

namespace fstq {
namespace {

using W = BitWidth;

std::vector<std::uint8_t> read_hex_file(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string hex;
    for (char c : ss.str()) {
        if (!std::isspace(static_cast<unsigned char>(c))) hex.push_back(c);
    }
    std::vector<std::uint8_t> out;
    for (std::size_t i = 0; i + 1 < hex.size(); i += 2) {
        out.push_back(static_cast<std::uint8_t>(std::stoul(hex.substr(i, 2), nullptr, 16)));
    }
    return out;
}

// d = 1000, one group, widths (16, 4, 2) at coordinates 7, 123, 999.
SparseUpdateMessage canonical_message() {
    std::vector<double> delta(1000, 0.0);
    delta[7] = 0.5;
    delta[123] = -0.25;
    delta[999] = -0.4;
    BitAllocation alloc{std::vector<W>(1000, W::kPruned)};
    alloc.widths[7] = W::kSixteen;
    alloc.widths[123] = W::kFour;
    alloc.widths[999] = W::kTwo;
    return quantize(delta, alloc, single_group_layout(1000));
}

std::vector<double> random_delta(std::size_t d, std::mt19937_64& gen) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(d);
    for (double& x : v) x = n(gen);
    return v;
}

BitAllocation random_allocation(std::size_t d, std::mt19937_64& gen) {
    static constexpr std::array<W, 4> choices = {W::kPruned, W::kTwo, W::kFour, W::kSixteen};
    BitAllocation a{std::vector<W>(d)};
    for (W& w : a.widths) w = choices[gen() % 4];
    return a;
}

GroupLayout two_group_layout(std::size_t d, std::size_t split) {
    GroupLayout l;
    l.dim = d;
    l.groups = {{0, 0, split}, {1, split, d}};
    return l;
}

TEST(Importance, Examples) {
    EXPECT_EQ(importance_scores(std::vector<double>{2.0, 0.5, 0.0}, std::vector<double>{1.0, 2.0, 5.0}),
              (std::vector<double>{2.0, 2.0, 0.0}));
    EXPECT_EQ(importance_scores(std::vector<double>{3.0, 1.0}, std::vector<double>{0.0, 0.0}),
              (std::vector<double>{0.0, 0.0}));
    const auto a = importance_scores(std::vector<double>{1.0, 4.0}, std::vector<double>{0.5, -2.0});
    const auto b = importance_scores(std::vector<double>{3.0, 12.0}, std::vector<double>{0.5, -2.0});
    for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(b[i], 3.0 * a[i]);
    EXPECT_THROW(importance_scores(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), ArgumentError);
}

TEST(ContinuousBitwidth, Examples) {
    const double lambda = 2.5;
    const auto b = continuous_bitwidth(std::vector<double>{4 * lambda, lambda, 0.5 * lambda, 0.0}, lambda);
    EXPECT_DOUBLE_EQ(b[0], 1.0);
    EXPECT_DOUBLE_EQ(b[1], 0.0);
    EXPECT_DOUBLE_EQ(b[2], 0.0);
    EXPECT_DOUBLE_EQ(b[3], 0.0);
}

TEST(PercentileAllocate, NearestRankExample) {
    const std::vector<double> u{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
    const auto a = percentile_allocate(u, {.high = 90, .mid = 70, .low = 40});
    const std::vector<W> expected{W::kSixteen, W::kSixteen, W::kFour, W::kFour, W::kTwo,
                                  W::kTwo,     W::kTwo,     W::kPruned, W::kPruned, W::kPruned};
    EXPECT_EQ(a.widths, expected);

    std::vector<double> sorted(u.rbegin(), u.rend());
    EXPECT_EQ(nearest_rank_percentile(sorted, 90), 9.0);
    EXPECT_EQ(nearest_rank_percentile(sorted, 70), 7.0);
    EXPECT_EQ(nearest_rank_percentile(sorted, 40), 4.0);
}

TEST(PercentileAllocate, TiesAtThreshold) {
    for (double v : {3.0, 0.0}) {
        const auto a = percentile_allocate(std::vector<double>(6, v), {});
        for (W w : a.widths) EXPECT_EQ(w, W::kSixteen);
    }
}

TEST(PercentileAllocate, MonotoneInImportance) {
    std::mt19937_64 gen(8);
    std::exponential_distribution<double> e(1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> u(1 + gen() % 60);
        for (double& x : u) x = e(gen);
        const auto a = percentile_allocate(u, {});
        for (std::size_t i = 0; i < u.size(); ++i) {
            for (std::size_t j = 0; j < u.size(); ++j) {
                if (u[i] > u[j]) EXPECT_GE(bit_count(a.widths[i]), bit_count(a.widths[j]));
            }
        }
    }
}

TEST(GreedyAllocate, HandExample) {
    // u = [100, 10, 1] with per-coordinate overhead 32 + 2 bits and 60 bits
    // available beyond the header.
    const std::vector<double> delta{0.3, 1.0, 0.1};
    const std::vector<double> u{100.0, 10.0, 1.0};
    std::vector<double> fisher(3);
    for (std::size_t j = 0; j < 3; ++j) fisher[j] = u[j] / (delta[j] * delta[j]);
    const BitCostModel cost{.header_bits = 0, .index_bits = 32, .tag_bits = 2, .scale_bits = 0,
                            .byte_aligned = false};
    const auto g = greedy_budget_allocate(delta, fisher, single_group_layout(3), 60, 100.0, cost);
    EXPECT_EQ(g.allocation.widths, (std::vector<W>{W::kSixteen, W::kPruned, W::kPruned}));
    EXPECT_EQ(g.total_bits, 50u);
    EXPECT_FALSE(g.budget_too_small);
}

TEST(GreedyAllocate, BudgetBelowHeader) {
    const std::vector<double> delta{1.0, 2.0};
    const std::vector<double> fisher{1.0, 1.0};
    const auto g = greedy_budget_allocate(delta, fisher, single_group_layout(2), 100, 1e6);
    EXPECT_TRUE(g.budget_too_small);
    EXPECT_EQ(g.allocation.retained_count(), 0u);
}

// Unlimited budget and a vanishing bit price: every coordinate is retained and
// the distortion reaches that of the all-16-bit assignment.
TEST(GreedyAllocate, FreeBitsRetainEverything) {
    std::mt19937_64 gen(12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 4 + gen() % 20;
        const auto delta = random_delta(d, gen);
        std::vector<double> fisher(d);
        for (double& f : fisher) f = 0.1 + oracle::uniform(gen);
        const auto layout = two_group_layout(d, d / 2);
        const auto g = greedy_budget_allocate(delta, fisher, layout, kUnlimitedBudget, 1e30);
        EXPECT_EQ(g.allocation.retained_count(), d);

        const BitAllocation all16{std::vector<W>(d, W::kSixteen)};
        const double d16 = fisher_distortion(fisher, delta, dequantize(quantize(delta, all16, layout), layout));
        EXPECT_LE(g.distortion, d16 + 1e-12);
        // Only a group-max coordinate, exact at every width, may stop short of 16.
        EXPECT_GE(static_cast<std::size_t>(std::count(g.allocation.widths.begin(), g.allocation.widths.end(),
                                                      W::kSixteen)),
                  d - layout.groups.size());
    }
}

TEST(GreedyAllocate, ReportedBitsMatchPackedMessage) {
    std::mt19937_64 gen(21);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 2 + gen() % 50;
        const auto delta = random_delta(d, gen);
        std::vector<double> fisher(d);
        for (double& f : fisher) f = oracle::uniform(gen);
        const auto layout = two_group_layout(d, 1 + gen() % (d - 1));
        const std::uint64_t budget = 160 + gen() % 1500;
        const double lambda = std::pow(10.0, 1.0 + 3.0 * oracle::uniform(gen));
        const auto g = greedy_budget_allocate(delta, fisher, layout, budget, lambda);
        const auto msg = quantize(delta, g.allocation, layout);
        const auto bytes = pack(msg);
        EXPECT_EQ(g.total_bits, 8 * bytes.size());
        EXPECT_LE(8 * bytes.size(), budget);
        EXPECT_NEAR(g.distortion, fisher_distortion(fisher, delta, dequantize(msg, layout)), 1e-12);
    }
}

TEST(GreedyAllocate, NearBruteForceAndLocallyOptimal) {
    std::mt19937_64 gen(55);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t d = 2 + gen() % 5;
        std::vector<double> delta(d), fisher(d);
        for (std::size_t j = 0; j < d; ++j) {
            delta[j] = n(gen);
            fisher[j] = oracle::uniform(gen);
        }
        const auto layout = single_group_layout(d);
        const double lambda = std::pow(10.0, 1.0 + 2.0 * oracle::uniform(gen));
        const std::uint64_t budget = trial % 3 == 0 ? kUnlimitedBudget : 160 + gen() % 440;
        const auto g = greedy_budget_allocate(delta, fisher, layout, budget, lambda);
        const auto e = oracle::evaluate(delta, fisher, g.allocation, layout, lambda);
        ASSERT_LE(e.bits, budget);
        const double best = oracle::brute_force_objective(delta, fisher, layout, budget, lambda);
        EXPECT_LE(e.objective, 1.05 * best + 1e-9) << "trial " << trial;

        for (std::size_t j = 0; j < d; ++j) {
            for (W w : kQuantizedWidths) {
                if (bit_count(w) <= bit_count(g.allocation.widths[j])) continue;
                BitAllocation up = g.allocation;
                up.widths[j] = w;
                const auto u = oracle::evaluate(delta, fisher, up, layout, lambda);
                if (u.bits <= budget) EXPECT_GE(u.objective, e.objective - 1e-9) << "trial " << trial;
            }
        }
    }
}

TEST(Quantize, TwoBitGroup) {
    const std::vector<double> delta{0.5, -1.0, 0.25};
    const BitAllocation alloc{std::vector<W>(3, W::kTwo)};
    const auto layout = single_group_layout(3);
    const auto msg = quantize(delta, alloc, layout);
    EXPECT_EQ(msg.values, (std::vector<std::int32_t>{1, -1, 0}));
    const auto back = dequantize(msg, layout);
    EXPECT_NEAR(back[0], 1.0, 1e-6);
    EXPECT_NEAR(back[1], -1.0, 1e-6);
    EXPECT_EQ(back[2], 0.0);
    EXPECT_NEAR(std::abs(back[0] - delta[0]), 0.5, 1e-6);
}

TEST(Quantize, FourBitHalfAwayFromZero) {
    const std::vector<double> delta{0.6, -0.3, 0.1, 0.0};
    const BitAllocation alloc{std::vector<W>(4, W::kFour)};
    const auto msg = quantize(delta, alloc, single_group_layout(4));
    EXPECT_EQ(msg.values, (std::vector<std::int32_t>{7, -4, 1, 0}));
    ASSERT_EQ(msg.scales.size(), 1u);
    EXPECT_NEAR(msg.scales[0].scale, 0.6 / 7.0, 1e-7);
}

TEST(Quantize, ZeroGroup) {
    const std::vector<double> delta(5, 0.0);
    const BitAllocation alloc{std::vector<W>(5, W::kFour)};
    const auto layout = single_group_layout(5);
    const auto msg = quantize(delta, alloc, layout);
    for (auto v : msg.values) EXPECT_EQ(v, 0);
    for (double v : dequantize(msg, layout)) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(quantize_value(3.0, 0.0f, W::kFour), 0);
}

TEST(Quantize, OddSymmetry) {
    std::mt19937_64 gen(4);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t d = 1 + gen() % 40;
        auto delta = random_delta(d, gen);
        // Exact half-step ties exercise the rounding rule.
        if (d >= 2) delta[1] = delta[0] * 0.5;
        const auto alloc = random_allocation(d, gen);
        const auto layout = single_group_layout(d);
        std::vector<double> neg(d);
        for (std::size_t j = 0; j < d; ++j) neg[j] = -delta[j];
        const auto a = quantize(delta, alloc, layout);
        const auto b = quantize(neg, alloc, layout);
        ASSERT_EQ(a.values.size(), b.values.size());
        for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_EQ(b.values[i], -a.values[i]);
    }
}

TEST(WireFormat, CanonicalVector) {
    const SparseUpdateMessage msg = canonical_message();
    const auto bytes = pack(msg);
    EXPECT_EQ(bytes.size(), 49u);
    EXPECT_EQ(bytes, read_hex_file(std::string(FSTQ_TESTDATA_DIR) + "/message_392bit.hex"));

    // Header fields by hand.
    const std::vector<std::uint8_t> header{0x46, 0x53, 0x54, 0x51, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00,
                                           0x03, 0xe8, 0x00, 0x00, 0x00, 0x03, 0x00, 0x01, 0x00, 0x00};
    EXPECT_TRUE(std::equal(header.begin(), header.end(), bytes.begin()));
    // Tags 11 10 01 00 -> 0xe4.
    EXPECT_EQ(bytes[32], 0xe4);

    const PayloadBreakdown p = payload_bits(msg);
    EXPECT_EQ(p, (PayloadBreakdown{160, 96, 8, 32, 96, 392}));
    EXPECT_EQ(unpack(bytes, single_group_layout(1000)), msg);
}

TEST(WireFormat, EmptyMessage) {
    SparseUpdateMessage msg;
    msg.dim = 12;
    msg.group_count = 1;
    const auto layout = single_group_layout(12);
    const auto bytes = pack(msg);
    EXPECT_EQ(bytes.size(), kHeaderBytes);
    EXPECT_EQ(payload_bits(msg), (PayloadBreakdown{160, 0, 0, 0, 0, 160}));
    for (double v : dequantize(unpack(bytes, layout), layout)) EXPECT_EQ(v, 0.0);
}

TEST(WireFormat, IndexBitsLinearInRetained) {
    const std::size_t d = 64;
    const auto layout = single_group_layout(d);
    std::mt19937_64 gen(2);
    const auto delta = random_delta(d, gen);
    BitAllocation alloc{std::vector<W>(d, W::kPruned)};
    for (std::size_t n = 1; n <= 16; ++n) {
        alloc.widths[n * 3] = W::kSixteen;
        EXPECT_EQ(payload_bits(quantize(delta, alloc, layout)).index_bits, 32 * n);
    }
}

TEST(WireFormat, RoundTripAndAccounting) {
    std::mt19937_64 gen(99);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t d = 1 + gen() % 80;
        const auto delta = random_delta(d, gen);
        const auto alloc = random_allocation(d, gen);
        const auto layout = d > 1 ? two_group_layout(d, 1 + gen() % (d - 1)) : single_group_layout(d);
        const auto msg = quantize(delta, alloc, layout);
        const auto bytes = pack(msg);
        EXPECT_EQ(unpack(bytes, layout), msg);
        EXPECT_EQ(payload_bits(msg).total_bits, 8 * bytes.size());
    }
}

TEST(WireFormat, LosslessAndBaselinesRoundTrip) {
    std::mt19937_64 gen(7);
    const std::size_t d = 30;
    const auto layout = two_group_layout(d, 12);
    const auto delta = random_delta(d, gen);

    const auto lossless = lossless_message(delta, layout);
    const auto lb = pack(lossless);
    EXPECT_EQ(unpack(lb, layout), lossless);
    EXPECT_EQ(payload_bits(lossless).total_bits, 8 * lb.size());
    const auto back = dequantize(lossless, layout);
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(back[j], static_cast<double>(static_cast<float>(delta[j])));

    for (unsigned levels : {1u, 7u, 100u}) {
        const auto q = qsgd_compress(delta, layout, levels, 5);
        const auto qb = pack(q);
        EXPECT_EQ(unpack(qb, layout), q);
        EXPECT_EQ(payload_bits(q).total_bits, 8 * qb.size());
    }
    const auto t = topk_compress(delta, layout, 9);
    EXPECT_EQ(unpack(pack(t), layout), t);
}

TEST(WireFormat, DecodeErrors) {
    const auto layout = single_group_layout(1000);
    const auto good = pack(canonical_message());
    auto expect_code = [&](std::vector<std::uint8_t> bytes, DecodeErrorCode code) {
        try {
            unpack(bytes, layout);
            ADD_FAILURE() << "expected " << to_string(code);
        } catch (const DecodeError& e) {
            EXPECT_EQ(e.code(), code) << e.what();
        }
    };
    auto bad = good;
    bad[0] = 'X';
    expect_code(bad, DecodeErrorCode::kBadMagic);
    bad = good;
    bad[5] = 9;
    expect_code(bad, DecodeErrorCode::kUnknownVersion);
    expect_code({good.begin(), good.begin() + 30}, DecodeErrorCode::kTruncated);
    expect_code({good.begin(), good.begin() + 10}, DecodeErrorCode::kTruncated);
    bad = good;
    bad[32] = 0xe0;  // third tag 00
    expect_code(bad, DecodeErrorCode::kReservedTag);
    bad = good;
    bad[27] = 7;  // second index equals the first
    bad[26] = 0;
    expect_code(bad, DecodeErrorCode::kNonIncreasingIndices);
    bad = good;
    bad.push_back(0);
    expect_code(bad, DecodeErrorCode::kTrailingBytes);
    EXPECT_THROW(unpack(good, single_group_layout(999)), DecodeError);
}

TEST(RoundTripBound, RetainedErrorWithinHalfStep) {
    std::mt19937_64 gen(31);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t d = 2 + gen() % 60;
        const auto delta = random_delta(d, gen);
        const auto alloc = random_allocation(d, gen);
        const auto layout = two_group_layout(d, 1 + gen() % (d - 1));
        const auto msg = quantize(delta, alloc, layout);
        const auto back = dequantize(unpack(pack(msg), layout), layout);
        for (std::size_t j = 0; j < d; ++j) {
            const W w = alloc.widths[j];
            if (w == W::kPruned) {
                EXPECT_EQ(back[j], 0.0);
                continue;
            }
            const auto g = layout.group_of(j);
            float s = 0.0f;
            for (const auto& e : msg.scales) {
                if (e.group == g && e.width == w) s = e.scale;
            }
            if (std::abs(delta[j]) <= static_cast<double>(s) * quant_max(w)) {
                EXPECT_LE(std::abs(delta[j] - back[j]), static_cast<double>(s) / 2 + 1e-12);
            }
        }
    }
}

TEST(FisherDistortion, Examples) {
    EXPECT_DOUBLE_EQ(fisher_distortion(std::vector<double>{1, 2}, std::vector<double>{1, 1},
                                       std::vector<double>{1, 0}),
                     2.0);
    const std::vector<double> d{0.3, -2.0};
    EXPECT_EQ(fisher_distortion(std::vector<double>{5, 5}, d, d), 0.0);
    EXPECT_DOUBLE_EQ(fisher_distortion(std::vector<double>{3, 6}, std::vector<double>{1, 1},
                                       std::vector<double>{0, 0.5}),
                     3.0 * fisher_distortion(std::vector<double>{1, 2}, std::vector<double>{1, 1},
                                             std::vector<double>{0, 0.5}));
    EXPECT_THROW(fisher_distortion(std::vector<double>{1}, d, d), ArgumentError);
}

TEST(TopK, Examples) {
    const std::vector<double> delta{3.0, -5.0, 1.0};
    const auto layout = single_group_layout(3);
    const auto m = topk_compress(delta, layout, 2);
    EXPECT_EQ(m.indices, (std::vector<std::uint32_t>{0, 1}));
    const auto back = dequantize(m, layout);
    EXPECT_NEAR(back[0], 3.0, 1e-3);
    EXPECT_NEAR(back[1], -5.0, 1e-3);
    EXPECT_EQ(back[2], 0.0);
    EXPECT_EQ(topk_compress(delta, layout, 3).indices, (std::vector<std::uint32_t>{0, 1, 2}));
    EXPECT_EQ(topk_compress(delta, layout, 0).retained_count(), 0u);
    EXPECT_THROW(topk_compress(delta, layout, 4), ArgumentError);
    EXPECT_THROW(qsgd_compress(delta, layout, 0, 1), ArgumentError);
}

TEST(Qsgd, UnbiasedMonteCarlo) {
    const std::vector<double> delta{0.37, -0.81, 0.05, 1.0};
    const auto layout = single_group_layout(4);
    const int trials = 100000;
    std::vector<double> sum(4, 0.0), sum_sq(4, 0.0);
    for (int t = 0; t < trials; ++t) {
        const auto back = dequantize(qsgd_compress(delta, layout, 3, static_cast<std::uint64_t>(t)), layout);
        for (std::size_t j = 0; j < 4; ++j) {
            sum[j] += back[j];
            sum_sq[j] += back[j] * back[j];
        }
    }
    for (std::size_t j = 0; j < 4; ++j) {
        const double mean = sum[j] / trials;
        const double var = std::max(0.0, sum_sq[j] / trials - mean * mean);
        const double se = std::sqrt(var / trials);
        EXPECT_LE(std::abs(mean - delta[j]), 3.0 * se + 1e-6) << "coordinate " << j;
    }
    EXPECT_EQ(qsgd_compress(delta, layout, 3, 11), qsgd_compress(delta, layout, 3, 11));
}

}  // namespace
}  // namespace fstq
