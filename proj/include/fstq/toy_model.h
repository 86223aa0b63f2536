#pragma once

// Minimal next-token model with closed-form gradients.
//
// The context at input position i is the causal mean of the token embeddings
// e_0..e_i. Logits are produced by a frozen base projection plus a LoRA
// increment:
//
//   logits_i = W0 c_i + (alpha / r) B A c_i
//
// and position i predicts token i + 1. Embeddings and W0 stay frozen; only the
// adapter factors A (r x d_e) and B (V x r) are trained and transmitted.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace fstq {

using TokenId = std::uint32_t;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct Vocabulary {
    std::size_t size = 0;
};

struct TokenSequence {
    std::vector<TokenId> tokens;

    std::size_t length() const { return tokens.size(); }
    // Number of (context, target) pairs.
    std::size_t target_count() const { return tokens.empty() ? 0 : tokens.size() - 1; }
};

struct LoraAdapter {
    RowMatrix a;  // r x d_in
    RowMatrix b;  // d_out x r
    double alpha = 1.0;

    std::size_t rank() const { return static_cast<std::size_t>(a.rows()); }
    double scale() const { return alpha / static_cast<double>(rank()); }

    // Coordinates are flattened A first, then B, both row-major.
    std::size_t parameter_count() const { return static_cast<std::size_t>(a.size() + b.size()); }
    std::vector<double> flatten() const;
    void assign(std::span<const double> flat);
};

struct ModelShape {
    std::size_t vocab = 8;
    std::size_t embed_dim = 4;
    std::size_t rank = 2;
    double alpha = 1.0;
    double base_scale = 0.5;    // std-dev of W0 entries, relative to 1/sqrt(d_e)
    double adapter_scale = 1.0; // std-dev of A entries, relative to 1/sqrt(d_e)
};

struct ToyModel {
    RowMatrix embeddings;  // V x d_e, frozen
    RowMatrix base;        // V x d_e, frozen (d_out = V, d_in = d_e)
    LoraAdapter adapter;

    Vocabulary vocabulary() const { return {static_cast<std::size_t>(embeddings.rows())}; }
    std::size_t embed_dim() const { return static_cast<std::size_t>(embeddings.cols()); }

    // Throws ConfigError on inconsistent shapes or a non-finite parameter.
    void validate() const;
};

// Random frozen embeddings and base, Gaussian A, and B = 0 so the initial
// model equals the frozen base.
ToyModel make_toy_model(const ModelShape& shape, std::uint64_t seed);

struct BatchGradients {
    RowMatrix grad_a;
    RowMatrix grad_b;
    std::vector<Vector> token_embed_grads;  // one per input position
    std::vector<double> per_token_losses;   // one per target position

    std::vector<double> flat_adapter_grad() const;
};

// Logits for target positions 0..T-2.
std::vector<Vector> forward(const ToyModel& model, const TokenSequence& seq);

std::vector<double> per_token_losses(const ToyModel& model, const TokenSequence& seq);

// Adapter gradients of sum_i w_i * loss_i, and embedding gradients of the
// unweighted loss sum_i loss_i with respect to every input position.
BatchGradients backward_weighted(const ToyModel& model, const TokenSequence& seq,
                                 std::span<const double> token_weights);

// Most likely next token at target position `position`.
TokenId predict(const ToyModel& model, const TokenSequence& seq, std::size_t position);

double finite_difference_grad(const std::function<double(double)>& loss_fn, double x, double h);

double global_norm(std::span<const double> values);

// theta <- theta - eta * g, with g rescaled to norm `clip` first when it is longer.
void sgd_step(std::span<double> params, std::span<const double> grads, double eta,
              std::optional<double> clip = std::nullopt);

}  // namespace fstq
