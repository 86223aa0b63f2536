#pragma once

// Planted-token next-token task.
//
// Every sequence carries exactly one rare "critical" token near its start;
// the token right after it is an answer token determined by the critical id.
// All other positions are filler: a frequent background token, replaced by a
// uniformly drawn filler token with probability `noise`.
//
// Vocabulary layout: [0, C) critical, [C, 2C) answers, 2C background,
// (2C, V) fillers.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fstq/toy_model.h"

namespace fstq {

struct SyntheticTaskSpec {
    std::size_t vocab = 64;
    std::size_t seq_len = 24;
    std::size_t critical_count = 8;
    std::size_t critical_window = 4;  // critical token lands in positions [0, window)
    double noise = 0.3;
    std::size_t size = 2000;

    // Throws ConfigError when the vocabulary cannot host the layout or the
    // critical token would exceed 5% of positions.
    void validate() const;

    TokenId answer_token(std::uint32_t label) const {
        return static_cast<TokenId>(critical_count + label);
    }
    TokenId background_token() const { return static_cast<TokenId>(2 * critical_count); }
};

struct Sample {
    TokenSequence sequence;
    std::uint32_t label = 0;  // critical token id, also the class for partitioning
    std::size_t critical_position = 0;
};

std::vector<Sample> generate_synthetic_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed);

// Fraction of samples whose answer token is the model's top prediction at
// the critical position.
double answer_accuracy(const ToyModel& model, std::span<const Sample> samples);

}  // namespace fstq
