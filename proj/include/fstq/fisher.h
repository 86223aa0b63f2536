#pragma once

// Token-level sensitivity tracking, Top-K token masks, and the diagonal
// token-coupled Fisher over adapter coordinates.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fstq/toy_model.h"

namespace fstq {

inline constexpr double kDefaultEmaDecay = 0.9;

// Squared L2 norm of one embedding gradient.
double token_sensitivity(const Vector& embed_grad);
std::vector<double> token_sensitivity(std::span<const Vector> embed_grads);

// EMA-smoothed per-position sensitivity, S <- rho * S + (1 - rho) * g.
// The layout (number of tracked positions) is fixed at construction; the
// federated client keeps one tracker per round over its (slot, position) grid.
class TokenSensitivityTracker {
public:
    explicit TokenSensitivityTracker(std::size_t positions, double rho = kDefaultEmaDecay);

    void update(std::span<const double> g);
    void reset();

    std::span<const double> scores() const { return scores_; }
    double rho() const { return rho_; }
    std::size_t size() const { return scores_.size(); }

private:
    std::vector<double> scores_;
    double rho_;
};

struct TokenMask {
    std::vector<std::uint8_t> z;
    std::size_t retained_count = 0;

    std::vector<double> as_weights() const { return {z.begin(), z.end()}; }
};

// ceil(ratio * maskable), robust to representation error in the product.
std::size_t retained_token_count(std::size_t maskable, double ratio);

// Exactly k ones at the k largest scores, ties broken toward the lower index.
// Scores of -infinity mark padding and are never retained; k may not exceed
// the number of finite scores.
TokenMask topk_mask(std::span<const double> scores, std::size_t k);

// F(j) <- rho * F(j) + (1 - rho) * g_j^2 over flattened adapter coordinates.
class DiagonalFisher {
public:
    explicit DiagonalFisher(std::size_t dim, double rho = kDefaultEmaDecay);

    void accumulate(std::span<const double> adapter_grad);

    std::span<const double> values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    double rho() const { return rho_; }

private:
    std::vector<double> values_;
    double rho_;
};

}  // namespace fstq
