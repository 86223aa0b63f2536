#include "fstq/fisher.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "fstq/errors.h"

namespace fstq {

namespace {

void check_rho(double rho) {
    if (!(rho > 0.0 && rho < 1.0)) {
        throw ArgumentError("EMA decay must lie in (0, 1)");
    }
}

}  // namespace

double token_sensitivity(const Vector& embed_grad) { return embed_grad.squaredNorm(); }

std::vector<double> token_sensitivity(std::span<const Vector> embed_grads) {
    std::vector<double> g(embed_grads.size());
    std::transform(embed_grads.begin(), embed_grads.end(), g.begin(),
                   [](const Vector& v) { return v.squaredNorm(); });
    return g;
}

TokenSensitivityTracker::TokenSensitivityTracker(std::size_t positions, double rho)
    : scores_(positions, 0.0), rho_(rho) {
    check_rho(rho);
}

void TokenSensitivityTracker::update(std::span<const double> g) {
    if (g.size() != scores_.size()) {
        throw ArgumentError("sensitivity update has " + std::to_string(g.size()) +
                            " positions, tracker has " + std::to_string(scores_.size()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        scores_[i] = rho_ * scores_[i] + (1.0 - rho_) * g[i];
    }
}

void TokenSensitivityTracker::reset() { std::fill(scores_.begin(), scores_.end(), 0.0); }

std::size_t retained_token_count(std::size_t maskable, double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ArgumentError("token retention ratio must lie in [0, 1]");
    }
    const double raw = ratio * static_cast<double>(maskable);
    const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::min(k, maskable);
}

TokenMask topk_mask(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> candidates;
    candidates.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i] != -std::numeric_limits<double>::infinity()) candidates.push_back(i);
    }
    if (k > candidates.size()) {
        throw ArgumentError("cannot retain " + std::to_string(k) + " of " +
                            std::to_string(candidates.size()) + " maskable positions");
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t l, std::size_t r) { return scores[l] > scores[r]; });
    TokenMask mask;
    mask.z.assign(scores.size(), 0);
    for (std::size_t i = 0; i < k; ++i) mask.z[candidates[i]] = 1;
    mask.retained_count = k;
    return mask;
}

DiagonalFisher::DiagonalFisher(std::size_t dim, double rho) : values_(dim, 0.0), rho_(rho) {
    check_rho(rho);
}

void DiagonalFisher::accumulate(std::span<const double> adapter_grad) {
    if (adapter_grad.size() != values_.size()) {
        throw ArgumentError("Fisher has dimension " + std::to_string(values_.size()) +
                            ", gradient has " + std::to_string(adapter_grad.size()));
    }
    for (std::size_t j = 0; j < values_.size(); ++j) {
        values_[j] = rho_ * values_[j] + (1.0 - rho_) * adapter_grad[j] * adapter_grad[j];
    }
}

}  // namespace fstq
