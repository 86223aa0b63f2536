#include "fstq/toy_model.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "fstq/errors.h"
#include "fstq/rng.h"

namespace fstq {

namespace {

void check_sequence(const ToyModel& model, const TokenSequence& seq) {
    if (seq.length() < 2) {
        throw ArgumentError("token sequence needs at least two tokens");
    }
    const std::size_t vocab = model.vocabulary().size;
    for (TokenId t : seq.tokens) {
        if (t >= vocab) {
            throw ArgumentError("token id " + std::to_string(t) + " outside vocabulary of size " +
                                std::to_string(vocab));
        }
    }
}

// Causal means c_0..c_{T-2} of the gathered embeddings.
std::vector<Vector> causal_contexts(const ToyModel& model, const TokenSequence& seq) {
    const std::size_t targets = seq.target_count();
    std::vector<Vector> contexts;
    contexts.reserve(targets);
    Vector running = Vector::Zero(static_cast<Eigen::Index>(model.embed_dim()));
    for (std::size_t i = 0; i < targets; ++i) {
        running += model.embeddings.row(seq.tokens[i]).transpose();
        contexts.push_back(running / static_cast<double>(i + 1));
    }
    return contexts;
}

RowMatrix effective_weight(const ToyModel& model) {
    return model.base + model.adapter.scale() * model.adapter.b * model.adapter.a;
}

// Log-sum-exp shifted by the max for stability.
double log_sum_exp(const Vector& logits) {
    const double m = logits.maxCoeff();
    return m + std::log((logits.array() - m).exp().sum());
}

}  // namespace

std::vector<double> LoraAdapter::flatten() const {
    std::vector<double> flat(parameter_count());
    std::copy(a.data(), a.data() + a.size(), flat.begin());
    std::copy(b.data(), b.data() + b.size(), flat.begin() + a.size());
    return flat;
}

void LoraAdapter::assign(std::span<const double> flat) {
    if (flat.size() != parameter_count()) {
        throw ArgumentError("adapter assignment expects " + std::to_string(parameter_count()) +
                            " coordinates, got " + std::to_string(flat.size()));
    }
    std::copy(flat.begin(), flat.begin() + a.size(), a.data());
    std::copy(flat.begin() + a.size(), flat.end(), b.data());
}

void ToyModel::validate() const {
    if (embeddings.rows() < 2) {
        throw ConfigError("vocabulary must contain at least two tokens");
    }
    if (embeddings.cols() < 1) {
        throw ConfigError("embedding dimension must be positive");
    }
    if (base.rows() != embeddings.rows() || base.cols() != embeddings.cols()) {
        throw ConfigError("frozen base must be V x d_e to match the embedding table");
    }
    const auto r = adapter.a.rows();
    if (r < 1 || r > std::min(base.rows(), base.cols())) {
        throw ConfigError("adapter rank must lie in [1, min(d_out, d_in)]");
    }
    if (adapter.a.cols() != base.cols() || adapter.b.rows() != base.rows() || adapter.b.cols() != r) {
        throw ConfigError("adapter factors do not match the frozen base shape");
    }
    if (!(adapter.alpha >= 0.0) || !std::isfinite(adapter.alpha)) {
        throw ConfigError("adapter alpha must be finite and nonnegative");
    }
    if (!embeddings.allFinite() || !base.allFinite() || !adapter.a.allFinite() || !adapter.b.allFinite()) {
        throw ConfigError("model parameters must be finite");
    }
}

ToyModel make_toy_model(const ModelShape& shape, std::uint64_t seed) {
    if (shape.vocab < 2 || shape.embed_dim < 1 || shape.rank < 1 ||
        shape.rank > std::min(shape.vocab, shape.embed_dim)) {
        throw ConfigError("invalid model shape");
    }
    auto gen = rng::stream(seed, rng::Purpose::kModelInit);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto v = static_cast<Eigen::Index>(shape.vocab);
    const auto d = static_cast<Eigen::Index>(shape.embed_dim);
    const auto r = static_cast<Eigen::Index>(shape.rank);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(shape.embed_dim));

    ToyModel model;
    model.embeddings.resize(v, d);
    for (Eigen::Index i = 0; i < model.embeddings.size(); ++i) model.embeddings.data()[i] = normal(gen);
    model.base.resize(v, d);
    for (Eigen::Index i = 0; i < model.base.size(); ++i) {
        model.base.data()[i] = shape.base_scale * inv_sqrt_d * normal(gen);
    }
    model.adapter.a.resize(r, d);
    for (Eigen::Index i = 0; i < model.adapter.a.size(); ++i) {
        model.adapter.a.data()[i] = shape.adapter_scale * inv_sqrt_d * normal(gen);
    }
    model.adapter.b = RowMatrix::Zero(v, r);
    model.adapter.alpha = shape.alpha;
    model.validate();
    return model;
}

std::vector<double> BatchGradients::flat_adapter_grad() const {
    std::vector<double> flat(static_cast<std::size_t>(grad_a.size() + grad_b.size()));
    std::copy(grad_a.data(), grad_a.data() + grad_a.size(), flat.begin());
    std::copy(grad_b.data(), grad_b.data() + grad_b.size(), flat.begin() + grad_a.size());
    return flat;
}

std::vector<Vector> forward(const ToyModel& model, const TokenSequence& seq) {
    check_sequence(model, seq);
    const RowMatrix w = effective_weight(model);
    std::vector<Vector> logits;
    for (const Vector& c : causal_contexts(model, seq)) {
        logits.push_back(w * c);
    }
    return logits;
}

std::vector<double> per_token_losses(const ToyModel& model, const TokenSequence& seq) {
    const auto logits = forward(model, seq);
    std::vector<double> losses(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        losses[i] = log_sum_exp(logits[i]) - logits[i](seq.tokens[i + 1]);
    }
    return losses;
}

BatchGradients backward_weighted(const ToyModel& model, const TokenSequence& seq,
                                 std::span<const double> token_weights) {
    check_sequence(model, seq);
    const std::size_t targets = seq.target_count();
    if (token_weights.size() != targets) {
        throw ArgumentError("expected " + std::to_string(targets) + " token weights, got " +
                            std::to_string(token_weights.size()));
    }
    const LoraAdapter& ad = model.adapter;
    const double s = ad.scale();
    const RowMatrix w = effective_weight(model);
    const auto contexts = causal_contexts(model, seq);

    BatchGradients out;
    out.grad_a = RowMatrix::Zero(ad.a.rows(), ad.a.cols());
    out.grad_b = RowMatrix::Zero(ad.b.rows(), ad.b.cols());
    out.per_token_losses.resize(targets);
    std::vector<Vector> context_grads(targets);

    for (std::size_t i = 0; i < targets; ++i) {
        const Vector& c = contexts[i];
        const Vector logits = w * c;
        const double lse = log_sum_exp(logits);
        const TokenId target = seq.tokens[i + 1];
        out.per_token_losses[i] = lse - logits(target);

        // d loss_i / d logits = softmax - onehot
        Vector delta = (logits.array() - lse).exp().matrix();
        delta(target) -= 1.0;

        const double z = token_weights[i];
        if (z != 0.0) {
            const Vector h = ad.a * c;
            out.grad_b.noalias() += (s * z) * delta * h.transpose();
            out.grad_a.noalias() += (s * z) * (ad.b.transpose() * delta) * c.transpose();
        }
        context_grads[i] = w.transpose() * delta;
    }

    // e_j enters every context c_i with i >= j, each with weight 1 / (i + 1).
    const auto d = static_cast<Eigen::Index>(model.embed_dim());
    out.token_embed_grads.assign(seq.length(), Vector::Zero(d));
    Vector suffix = Vector::Zero(d);
    for (std::size_t i = targets; i-- > 0;) {
        suffix += context_grads[i] / static_cast<double>(i + 1);
        out.token_embed_grads[i] = suffix;
    }
    return out;
}

TokenId predict(const ToyModel& model, const TokenSequence& seq, std::size_t position) {
    check_sequence(model, seq);
    if (position >= seq.target_count()) {
        throw ArgumentError("prediction position out of range");
    }
    Vector c = Vector::Zero(static_cast<Eigen::Index>(model.embed_dim()));
    for (std::size_t j = 0; j <= position; ++j) c += model.embeddings.row(seq.tokens[j]).transpose();
    c /= static_cast<double>(position + 1);
    const Vector logits = effective_weight(model) * c;
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<TokenId>(best);
}

double finite_difference_grad(const std::function<double(double)>& loss_fn, double x, double h) {
    if (!(h > 0.0)) {
        throw ArgumentError("finite-difference step must be positive");
    }
    const double up = loss_fn(x + h);
    const double down = loss_fn(x - h);
    if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("non-finite loss evaluation in finite difference");
    }
    return (up - down) / (2.0 * h);
}

double global_norm(std::span<const double> values) {
    double sq = 0.0;
    for (double v : values) sq += v * v;
    return std::sqrt(sq);
}

void sgd_step(std::span<double> params, std::span<const double> grads, double eta,
              std::optional<double> clip) {
    if (params.size() != grads.size()) {
        throw ArgumentError("parameter and gradient sizes differ");
    }
    double factor = eta;
    if (clip) {
        const double norm = global_norm(grads);
        if (norm > *clip && norm > 0.0) factor *= *clip / norm;
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= factor * grads[i];
}

}  // namespace fstq
