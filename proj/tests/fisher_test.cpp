#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "fstq/errors.h"
#include "fstq/fisher.h"
#include "fstq/synthetic.h"

namespace fstq {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

TEST(TokenSensitivity, SquaredNorm) {
    Vector g(2);
    g << 3.0, 4.0;
    EXPECT_DOUBLE_EQ(token_sensitivity(g), 25.0);
    EXPECT_EQ(token_sensitivity(Vector::Zero(5)), 0.0);
}

TEST(TokenSensitivityTracker, GeometricSum) {
    TokenSensitivityTracker t(1, 0.9);
    const std::vector<double> one{1.0};
    for (int i = 0; i < 3; ++i) t.update(one);
    EXPECT_NEAR(t.scores()[0], 1.0 - 0.9 * 0.9 * 0.9, 1e-15);
    EXPECT_NEAR(t.scores()[0], 0.271, 1e-12);
}

TEST(TokenSensitivityTracker, SingleUpdateAndFixedPoint) {
    TokenSensitivityTracker t(2, 0.9);
    t.update(std::vector<double>{2.0, 7.0});
    EXPECT_NEAR(t.scores()[0], 0.2, 1e-15);
    EXPECT_NEAR(t.scores()[1], 0.7, 1e-15);

    const std::vector<double> s(t.scores().begin(), t.scores().end());
    t.update(s);
    EXPECT_NEAR(t.scores()[0], s[0], 1e-15);
    EXPECT_NEAR(t.scores()[1], s[1], 1e-15);

    t.reset();
    EXPECT_EQ(t.scores()[0], 0.0);
}

TEST(TokenSensitivityTracker, Errors) {
    TokenSensitivityTracker t(3);
    EXPECT_THROW(t.update(std::vector<double>{1.0}), ArgumentError);
    EXPECT_THROW(TokenSensitivityTracker(3, 0.0), ArgumentError);
    EXPECT_THROW(TokenSensitivityTracker(3, 1.0), ArgumentError);
}

TEST(TokenSensitivityTracker, NonnegativeAndContracting) {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        TokenSensitivityTracker t(4, 0.5 + 0.49 * u(gen) / 3.0);
        std::vector<double> g(4);
        for (double& v : g) v = u(gen) * 2.0;
        t.update(g);
        const double s0 = *std::max_element(t.scores().begin(), t.scores().end());
        const double m = 3.0;
        for (int k = 0; k < 30; ++k) {
            for (double& v : g) v = u(gen);
            t.update(g);
            for (double s : t.scores()) {
                EXPECT_GE(s, 0.0);
                EXPECT_LE(s, std::max(s0, m) + 1e-12);
            }
        }
    }
}

TEST(TopkMask, TieGoesToLowerIndex) {
    const auto m = topk_mask(std::vector<double>{5, 1, 5, 0}, 2);
    EXPECT_EQ(m.z, (std::vector<std::uint8_t>{1, 0, 1, 0}));
    EXPECT_EQ(m.retained_count, 2u);
    const auto t = topk_mask(std::vector<double>{2, 2, 2}, 2);
    EXPECT_EQ(t.z, (std::vector<std::uint8_t>{1, 1, 0}));
}

TEST(TopkMask, Boundaries) {
    const std::vector<double> s{0.3, 0.1, 0.2};
    EXPECT_EQ(topk_mask(s, 3).z, (std::vector<std::uint8_t>{1, 1, 1}));
    EXPECT_EQ(topk_mask(s, 0).z, (std::vector<std::uint8_t>{0, 0, 0}));
    EXPECT_THROW(topk_mask(s, 4), ArgumentError);
}

TEST(TopkMask, PaddingNeverRetained) {
    const std::vector<double> s{kNegInf, 0.0, kNegInf, 1.0};
    EXPECT_EQ(topk_mask(s, 2).z, (std::vector<std::uint8_t>{0, 1, 0, 1}));
    EXPECT_THROW(topk_mask(s, 3), ArgumentError);
}

TEST(TopkMask, ExactSizeProperty) {
    std::mt19937_64 gen(17);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + gen() % 40;
        std::vector<double> s(n);
        std::size_t finite = 0;
        for (double& v : s) {
            v = gen() % 7 == 0 ? kNegInf : static_cast<double>(gen() % 5);
            finite += std::isfinite(v);
        }
        const std::size_t k = finite == 0 ? 0 : gen() % (finite + 1);
        const TokenMask m = topk_mask(s, k);
        std::size_t ones = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ones += m.z[i];
            if (std::isinf(s[i])) EXPECT_EQ(m.z[i], 0);
        }
        EXPECT_EQ(ones, k);
        EXPECT_EQ(m.retained_count, k);
    }
}

TEST(RetainedTokenCount, Ceiling) {
    EXPECT_EQ(retained_token_count(23, 0.8), 19u);
    EXPECT_EQ(retained_token_count(10, 0.8), 8u);
    EXPECT_EQ(retained_token_count(10, 0.3), 3u);
    EXPECT_EQ(retained_token_count(7, 1.0), 7u);
    EXPECT_EQ(retained_token_count(0, 0.8), 0u);
}

TEST(DiagonalFisher, UpdateRule) {
    DiagonalFisher f(2, 0.9);
    f.accumulate(std::vector<double>{2.0, 0.0});
    EXPECT_NEAR(f.values()[0], 0.4, 1e-15);
    EXPECT_EQ(f.values()[1], 0.0);
    f.accumulate(std::vector<double>{0.0, 0.0});
    EXPECT_NEAR(f.values()[0], 0.36, 1e-15);
    EXPECT_THROW(f.accumulate(std::vector<double>{1.0}), ArgumentError);
}

TEST(DiagonalFisher, NonnegativeUnderSignedGradients) {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> n(0.0, 10.0);
    DiagonalFisher f(16);
    std::vector<double> g(16);
    for (int k = 0; k < 100; ++k) {
        for (double& v : g) v = n(gen);
        f.accumulate(g);
        for (double v : f.values()) EXPECT_GE(v, 0.0);
    }
}

// On the planted-token task, track one training sequence's positions with the
// full-loss sensitivity while the adapter trains, and ask whether the critical
// token's position enters the Top-K mask within 50 refresh steps.
TEST(PlantedToken, DetectedWithinFiftyRefreshes) {
    SyntheticTaskSpec spec;
    spec.size = 16;
    const double ratio = 0.8;
    int detected = 0;
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
        const auto data = generate_synthetic_dataset(spec, seed);
        ToyModel model = make_toy_model({.vocab = spec.vocab, .embed_dim = 8, .rank = 2, .alpha = 2.0}, seed);
        const Sample& target = data[0];
        const std::size_t n = target.sequence.target_count();
        TokenSensitivityTracker tracker(n);
        std::vector<double> theta = model.adapter.flatten();
        bool hit = false;
        for (int refresh = 0; refresh < 50 && !hit; ++refresh) {
            const Sample& train = data[static_cast<std::size_t>(refresh) % data.size()];
            const auto bg = backward_weighted(model, target.sequence, std::vector<double>(n, 1.0));
            std::vector<double> g = token_sensitivity(bg.token_embed_grads);
            g.resize(n);
            tracker.update(g);
            const TokenMask mask = topk_mask(tracker.scores(), retained_token_count(n, ratio));
            hit = mask.z[target.critical_position] == 1;

            const auto step = backward_weighted(model, train.sequence,
                                                std::vector<double>(train.sequence.target_count(), 1.0));
            sgd_step(theta, step.flat_adapter_grad(), 0.5, 1.0);
            model.adapter.assign(theta);
        }
        detected += hit;
    }
    EXPECT_GE(detected, 38) << detected << " of 40 seeds";
}

}  // namespace
}  // namespace fstq
