#include "fstq/synthetic.h"

#include <random>

#include "fstq/errors.h"
#include "fstq/rng.h"

namespace fstq {

void SyntheticTaskSpec::validate() const {
    if (critical_count < 1) throw ConfigError("task needs at least one critical token");
    if (vocab < 2 * critical_count + 2) {
        throw ConfigError("vocabulary too small for critical, answer, background and filler tokens");
    }
    if (seq_len < 2) throw ConfigError("sequences need at least two tokens");
    // One critical token per sequence must stay under 5% of positions.
    if (20 * 1 >= seq_len) throw ConfigError("sequence length must exceed 20 so critical tokens stay under 5%");
    if (critical_window < 1 || critical_window > seq_len - 1) {
        throw ConfigError("critical window must lie in [1, seq_len - 1]");
    }
    if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("filler noise rate must lie in [0, 1]");
}

std::vector<Sample> generate_synthetic_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    auto gen = rng::stream(seed, rng::Purpose::kDataset);
    const auto first_filler = static_cast<TokenId>(2 * spec.critical_count + 1);
    const auto filler_count = static_cast<std::uint64_t>(spec.vocab - first_filler);

    std::vector<Sample> data;
    data.reserve(spec.size);
    for (std::size_t n = 0; n < spec.size; ++n) {
        Sample s;
        s.label = static_cast<std::uint32_t>(gen() % spec.critical_count);
        s.critical_position = static_cast<std::size_t>(gen() % spec.critical_window);
        s.sequence.tokens.resize(spec.seq_len);
        for (std::size_t i = 0; i < spec.seq_len; ++i) {
            TokenId t;
            if (i == s.critical_position) {
                t = static_cast<TokenId>(s.label);
            } else if (i == s.critical_position + 1) {
                t = spec.answer_token(s.label);
            } else if (rng::uniform01(gen) < spec.noise) {
                t = first_filler + static_cast<TokenId>(gen() % filler_count);
            } else {
                t = spec.background_token();
            }
            s.sequence.tokens[i] = t;
        }
        data.push_back(std::move(s));
    }
    return data;
}

double answer_accuracy(const ToyModel& model, std::span<const Sample> samples) {
    if (samples.empty()) return 0.0;
    std::size_t hits = 0;
    for (const Sample& s : samples) {
        const TokenId expected = s.sequence.tokens[s.critical_position + 1];
        hits += predict(model, s.sequence, s.critical_position) == expected;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace fstq
