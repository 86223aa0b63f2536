#pragma once

// Run-level metrics from per-round logs, Token Recall, and the JSON-lines
// round log format.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fstq/fed_protocol.h"
#include "fstq/synthetic.h"

namespace fstq {

// A token occurrence in an evaluation corpus: (sample index, target position).
using TokenRef = std::pair<std::size_t, std::size_t>;

// |reference ∩ retained| / |reference|; 1.0 for an empty reference.
double token_recall(const std::set<TokenRef>& reference, const std::set<TokenRef>& retained);

// Per sample, the ceil(fraction * targets) target positions with the largest
// full-loss token sensitivity under `model` (ties to the lower position).
std::set<TokenRef> top_sensitive_tokens(const ToyModel& model, std::span<const Sample> corpus,
                                        double fraction);

struct MetricsReport {
    std::size_t rounds = 0;
    std::optional<double> time_to_target;  // seconds; unset = not reached
    std::optional<std::uint64_t> bytes_to_target;
    std::uint64_t cumulative_uplink_bytes = 0;
    double final_accuracy = 0.0;
    std::optional<double> token_recall;
    double total_seconds = 0.0;
};

MetricsReport compute_metrics(std::span<const RoundLog> logs, double target_accuracy);

void to_json(nlohmann::json& j, const ClientRecord& r);
void from_json(const nlohmann::json& j, ClientRecord& r);
void to_json(nlohmann::json& j, const RoundLog& r);
void from_json(const nlohmann::json& j, RoundLog& r);

std::string to_jsonl(std::span<const RoundLog> logs);
// Throws ConfigError naming the offending line.
std::vector<RoundLog> parse_jsonl(const std::string& text);

}  // namespace fstq
