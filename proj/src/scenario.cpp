#include "fstq/scenario.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "fstq/errors.h"
#include "fstq/rng.h"

namespace fstq {

using nlohmann::json;

ScenarioConfig::ScenarioConfig() {
    task.vocab = model.vocab;
    task.noise = 1.0;
    federation.rounds = 60;
    federation.learning_rate = 1.0;
    federation.grad_clip = 1.0;
}

void ScenarioConfig::validate() const {
    std::vector<std::string> errors;
    auto check = [&](auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            errors.emplace_back(e.what());
        }
    };
    check([&] { task.validate(); });
    check([&] { federation.validate(); });
    check([&] { channel_a.validate(); });
    check([&] { channel_b.validate(); });
    check([&] { energy.validate(); });
    if (task.vocab != model.vocab) errors.emplace_back("task.vocab must equal model.vocab");
    if (model.embed_dim < 1 || model.rank < 1) errors.emplace_back("model dimensions must be positive");
    if (held_out_size < 1) errors.emplace_back("task.held_out_size must be positive");
    if (profile != 'a' && profile != 'b') errors.emplace_back("network.profile must be \"a\" or \"b\"");
    if (!(lambda > 0.0)) errors.emplace_back("compression.lambda must be positive");
    if (qsgd_levels < 1) errors.emplace_back("compression.qsgd_levels must be positive");
    if (!(packet_loss >= 0.0 && packet_loss < 1.0)) errors.emplace_back("network.packet_loss must lie in [0, 1)");
    if (chunk_bytes == 0) errors.emplace_back("network.chunk_bytes must be positive");
    if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0)) {
        errors.emplace_back("metrics.target_accuracy must lie in [0, 1]");
    }
    if (!(recall_top_fraction > 0.0 && recall_top_fraction <= 1.0)) {
        errors.emplace_back("metrics.recall_top_fraction must lie in (0, 1]");
    }
    for (const std::string& m : methods) {
        if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
            errors.emplace_back("unknown method \"" + m + "\"");
        } else if (!compute_multipliers.count(m) || !(compute_multipliers.at(m) > 0.0)) {
            errors.emplace_back("network.compute_multipliers needs a positive entry for \"" + m + "\"");
        }
    }
    if (!errors.empty()) {
        std::string msg = "invalid scenario config:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
}

// ---------------------------------------------------------------------------
// JSON schema

namespace {

constexpr double kMbps = 1e6;

class Section {
public:
    Section(const json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) {
            errors_.push_back(path_ + ": expected an object");
            valid_ = false;
        }
    }

    ~Section() {
        if (!valid_) return;
        for (const auto& [key, _] : j_.items()) {
            if (!seen_.count(key)) errors_.push_back(qualified(key) + ": unknown key");
        }
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!valid_ || !j_.contains(key)) return;
        const json& v = j_.at(key);
        if (!type_ok<T>(v)) {
            errors_.push_back(qualified(key) + ": expected " + type_name<T>());
            return;
        }
        out = v.get<T>();
    }

    template <typename T>
    void get_optional(const std::string& key, std::optional<T>& out) {
        seen_.insert(key);
        if (!valid_ || !j_.contains(key)) return;
        const json& v = j_.at(key);
        if (v.is_null()) {
            out.reset();
            return;
        }
        if (!type_ok<T>(v)) {
            errors_.push_back(qualified(key) + ": expected " + type_name<T>() + " or null");
            return;
        }
        out = v.get<T>();
    }

    // Scaled double, e.g. a rate given in Mbps stored in bit/s.
    void get_scaled(const std::string& key, double& out, double scale) {
        double v = out / scale;
        get(key, v);
        out = v * scale;
    }

    Section child(const std::string& key) {
        seen_.insert(key);
        static const json empty = json::object();
        if (!valid_ || !j_.contains(key)) return Section(empty, qualified(key), errors_);
        return Section(j_.at(key), qualified(key), errors_);
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        static const json null;
        return valid_ && j_.contains(key) ? j_.at(key) : null;
    }

    std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    void error(const std::string& key, const std::string& what) { errors_.push_back(qualified(key) + ": " + what); }

private:
    template <typename T>
    static bool type_ok(const json& v) {
        if constexpr (std::is_same_v<T, bool>) {
            return v.is_boolean();
        } else if constexpr (std::is_integral_v<T>) {
            return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
        } else if constexpr (std::is_floating_point_v<T>) {
            return v.is_number();
        } else if constexpr (std::is_same_v<T, std::string>) {
            return v.is_string();
        } else {
            return false;
        }
    }

    template <typename T>
    static std::string type_name() {
        if constexpr (std::is_same_v<T, bool>) return "boolean";
        else if constexpr (std::is_integral_v<T>) return "nonnegative integer";
        else if constexpr (std::is_floating_point_v<T>) return "number";
        else return "string";
    }

    const json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
    bool valid_ = true;
};

json channel_json(const ChannelProfile& p) {
    return {{"fixed_rate_mbps", p.fixed_rate_bps / kMbps},
            {"base_rate_lo_mbps", p.base_rate_lo_bps / kMbps},
            {"base_rate_hi_mbps", p.base_rate_hi_bps / kMbps},
            {"straggler_fraction", p.straggler_fraction},
            {"straggler_rate_lo_mbps", p.straggler_rate_lo_bps / kMbps},
            {"straggler_rate_hi_mbps", p.straggler_rate_hi_bps / kMbps},
            {"jitter", p.jitter}};
}

void read_channel(Section s, ChannelProfile& p) {
    s.get_scaled("fixed_rate_mbps", p.fixed_rate_bps, kMbps);
    s.get_scaled("base_rate_lo_mbps", p.base_rate_lo_bps, kMbps);
    s.get_scaled("base_rate_hi_mbps", p.base_rate_hi_bps, kMbps);
    s.get("straggler_fraction", p.straggler_fraction);
    s.get_scaled("straggler_rate_lo_mbps", p.straggler_rate_lo_bps, kMbps);
    s.get_scaled("straggler_rate_hi_mbps", p.straggler_rate_hi_bps, kMbps);
    s.get("jitter", p.jitter);
}

}  // namespace

json scenario_to_json(const ScenarioConfig& c) {
    const FederatedConfig& f = c.federation;
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["seed"] = c.seed;
    j["task"] = {{"vocab", c.task.vocab},
                 {"seq_len", c.task.seq_len},
                 {"critical_count", c.task.critical_count},
                 {"critical_window", c.task.critical_window},
                 {"noise", c.task.noise},
                 {"train_size", c.task.size},
                 {"held_out_size", c.held_out_size}};
    j["model"] = {{"embed_dim", c.model.embed_dim},
                  {"rank", c.model.rank},
                  {"alpha", c.model.alpha},
                  {"base_scale", c.model.base_scale},
                  {"adapter_scale", c.model.adapter_scale}};
    j["federation"] = {{"num_clients", f.num_clients},
                       {"clients_per_round", f.clients_per_round},
                       {"local_steps", f.local_steps},
                       {"batch_size", f.batch_size},
                       {"learning_rate", f.learning_rate},
                       {"grad_clip", f.grad_clip ? json(*f.grad_clip) : json(nullptr)},
                       {"server_lr", f.server_lr},
                       {"refresh_interval", f.refresh_interval},
                       {"token_rho", f.token_rho},
                       {"fisher_rho", f.fisher_rho},
                       {"token_ratio", f.token_ratio},
                       {"drop_prob", f.drop_prob},
                       {"dirichlet_alpha", f.dirichlet_alpha},
                       {"rounds", f.rounds}};
    j["compression"] = {{"lambda", c.lambda},
                        {"budget_bits", c.budget_bits ? json(*c.budget_bits) : json(nullptr)},
                        {"percentiles", {c.percentiles.high, c.percentiles.mid, c.percentiles.low}},
                        {"qsgd_levels", c.qsgd_levels},
                        {"topk_count", c.topk_count}};
    j["network"] = {{"profile", std::string(1, c.profile)},
                    {"profile_a", channel_json(c.channel_a)},
                    {"profile_b", channel_json(c.channel_b)},
                    {"tx_power_watts", c.energy.tx_power_watts},
                    {"compute_power_watts", c.energy.compute_power_watts},
                    {"compute_base_seconds", c.compute.base_seconds},
                    {"compute_jitter", c.compute.jitter},
                    {"compute_multipliers", c.compute_multipliers},
                    {"server_seconds", c.server_seconds},
                    {"packet_loss", c.packet_loss},
                    {"chunk_bytes", c.chunk_bytes}};
    j["metrics"] = {{"target_accuracy", c.target_accuracy},
                    {"recall_top_fraction", c.recall_top_fraction},
                    {"recall_corpus_size", c.recall_corpus_size},
                    {"methods", c.methods}};
    return j;
}

ScenarioConfig scenario_from_json(const json& j) {
    ScenarioConfig c;
    std::vector<std::string> errors;
    {
        Section root(j, "", errors);
        const json& version = root.raw("schema_version");
        if (version.is_null()) {
            root.error("schema_version", "missing");
        } else if (!version.is_number_integer() || version.get<std::int64_t>() != kConfigSchemaVersion) {
            root.error("schema_version", "unsupported, expected " + std::to_string(kConfigSchemaVersion));
        }
        root.get("seed", c.seed);
        {
            Section s = root.child("task");
            s.get("vocab", c.task.vocab);
            s.get("seq_len", c.task.seq_len);
            s.get("critical_count", c.task.critical_count);
            s.get("critical_window", c.task.critical_window);
            s.get("noise", c.task.noise);
            s.get("train_size", c.task.size);
            s.get("held_out_size", c.held_out_size);
            c.model.vocab = c.task.vocab;
        }
        {
            Section s = root.child("model");
            s.get("embed_dim", c.model.embed_dim);
            s.get("rank", c.model.rank);
            s.get("alpha", c.model.alpha);
            s.get("base_scale", c.model.base_scale);
            s.get("adapter_scale", c.model.adapter_scale);
        }
        {
            FederatedConfig& f = c.federation;
            Section s = root.child("federation");
            s.get("num_clients", f.num_clients);
            s.get("clients_per_round", f.clients_per_round);
            s.get("local_steps", f.local_steps);
            s.get("batch_size", f.batch_size);
            s.get("learning_rate", f.learning_rate);
            s.get_optional("grad_clip", f.grad_clip);
            s.get("server_lr", f.server_lr);
            s.get("refresh_interval", f.refresh_interval);
            s.get("token_rho", f.token_rho);
            s.get("fisher_rho", f.fisher_rho);
            s.get("token_ratio", f.token_ratio);
            s.get("drop_prob", f.drop_prob);
            s.get("dirichlet_alpha", f.dirichlet_alpha);
            s.get("rounds", f.rounds);
        }
        {
            Section s = root.child("compression");
            s.get("lambda", c.lambda);
            s.get_optional("budget_bits", c.budget_bits);
            const json& pct = s.raw("percentiles");
            if (!pct.is_null()) {
                if (pct.is_array() && pct.size() == 3 &&
                    std::all_of(pct.begin(), pct.end(), [](const json& v) { return v.is_number(); })) {
                    c.percentiles = {pct[0].get<double>(), pct[1].get<double>(), pct[2].get<double>()};
                } else {
                    s.error("percentiles", "expected three numbers");
                }
            }
            s.get("qsgd_levels", c.qsgd_levels);
            s.get("topk_count", c.topk_count);
        }
        {
            Section s = root.child("network");
            std::string profile(1, c.profile);
            s.get("profile", profile);
            c.profile = profile.size() == 1 ? profile[0] : '?';
            read_channel(s.child("profile_a"), c.channel_a);
            read_channel(s.child("profile_b"), c.channel_b);
            s.get("tx_power_watts", c.energy.tx_power_watts);
            s.get("compute_power_watts", c.energy.compute_power_watts);
            s.get("compute_base_seconds", c.compute.base_seconds);
            s.get("compute_jitter", c.compute.jitter);
            const json& mult = s.raw("compute_multipliers");
            if (!mult.is_null()) {
                if (!mult.is_object()) {
                    s.error("compute_multipliers", "expected an object");
                } else {
                    for (const auto& [name, v] : mult.items()) {
                        if (v.is_number()) c.compute_multipliers[name] = v.get<double>();
                        else s.error("compute_multipliers." + name, "expected number");
                    }
                }
            }
            s.get("server_seconds", c.server_seconds);
            s.get("packet_loss", c.packet_loss);
            s.get("chunk_bytes", c.chunk_bytes);
        }
        {
            Section s = root.child("metrics");
            s.get("target_accuracy", c.target_accuracy);
            s.get("recall_top_fraction", c.recall_top_fraction);
            s.get("recall_corpus_size", c.recall_corpus_size);
            const json& methods = s.raw("methods");
            if (!methods.is_null()) {
                if (methods.is_array() &&
                    std::all_of(methods.begin(), methods.end(), [](const json& v) { return v.is_string(); })) {
                    c.methods = methods.get<std::vector<std::string>>();
                } else {
                    s.error("methods", "expected a list of strings");
                }
            }
        }
        c.federation.policy = method_config(c, "fed-fstq").policy;
    }
    if (!errors.empty()) {
        std::string msg = "invalid scenario config:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Methods

FederatedConfig method_config(const ScenarioConfig& config, const std::string& method) {
    FederatedConfig f = config.federation;
    f.seed = config.seed;
    CompressionPolicyConfig& p = f.policy;
    p.lambda = config.lambda;
    p.percentiles = config.percentiles;
    p.budget_bits = config.budget_bits;
    p.qsgd_levels = config.qsgd_levels;
    p.topk_count = config.topk_count;
    if (method == "fed-fstq") {
        p.mode = CompressionMode::kBudgetGreedy;
        f.token_filtering = true;
    } else {
        // Baselines train on the full loss, equivalent to H = 1 with r_tok = 1.
        f.token_filtering = false;
        f.refresh_interval = 1;
        f.token_ratio = 1.0;
        if (method == "fedavg-lossless") p.mode = CompressionMode::kLossless;
        else if (method == "qsgd") p.mode = CompressionMode::kQsgd;
        else if (method == "topk") p.mode = CompressionMode::kTopK;
        else throw ConfigError("unknown method \"" + method + "\"");
    }
    return f;
}

NetworkScenario method_network(const ScenarioConfig& config, const std::string& method) {
    NetworkScenario n;
    n.profile = config.profile == 'a' ? config.channel_a : config.channel_b;
    n.energy = config.energy;
    n.compute = config.compute;
    const auto it = config.compute_multipliers.find(method);
    n.compute_multiplier = it == config.compute_multipliers.end() ? 1.0 : it->second;
    n.server_seconds = config.server_seconds;
    n.packet_loss = config.packet_loss;
    n.chunk_bytes = config.chunk_bytes;
    return n;
}

namespace {

struct Corpus {
    std::vector<Sample> train;
    std::vector<Sample> held_out;
};

Corpus make_corpus(const ScenarioConfig& config) {
    Corpus c;
    c.train = generate_synthetic_dataset(config.task, config.seed);
    SyntheticTaskSpec held = config.task;
    held.size = config.held_out_size;
    c.held_out = generate_synthetic_dataset(held, rng::derive(config.seed, rng::Purpose::kHeldOut));
    return c;
}

}  // namespace

FederationSetup build_setup(const ScenarioConfig& config, const std::string& method) {
    FederationSetup s;
    s.config = method_config(config, method);
    s.scenario = method_network(config, method);
    s.model = make_toy_model(config.model, rng::derive(config.seed, rng::Purpose::kModelInit));

    Corpus corpus = make_corpus(config);
    std::vector<std::uint32_t> labels;
    labels.reserve(corpus.train.size());
    for (const Sample& x : corpus.train) labels.push_back(x.label);
    const auto parts = partition_dirichlet(labels, s.config.num_clients, s.config.dirichlet_alpha, config.seed);
    s.clients.resize(s.config.num_clients);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        s.clients[k].id = static_cast<std::uint32_t>(k);
        for (std::size_t idx : parts[k]) s.clients[k].shard.push_back(corpus.train[idx]);
    }
    s.held_out = std::move(corpus.held_out);
    return s;
}

MethodRun run_method(const ScenarioConfig& config, const std::string& method, RunHooks hooks) {
    config.validate();
    MethodRun run;
    run.method = method;
    run.logs = std::move(hooks.prior_logs);

    const FederatedConfig fcfg = method_config(config, method);
    if (!hooks.reference_adapter && fcfg.rounds > 0) {
        if (method == "fedavg-lossless") {
            // This run is its own reference; resolved after the last round.
        } else {
            spdlog::info("running lossless reference for token recall");
            hooks.reference_adapter = run_method(config, "fedavg-lossless").final_state.adapter;
        }
    }

    Federation fed(build_setup(config, method));
    if (hooks.resume_from) fed.restore(*hooks.resume_from);
    while (!fed.done()) {
        RoundLog log = fed.step();
        if (fed.done()) {
            ToyModel reference = fed.global_model();
            if (hooks.reference_adapter) reference.adapter.assign(*hooks.reference_adapter);
            const auto& held = fed.setup().held_out;
            const std::span<const Sample> corpus(held.data(), std::min(held.size(), config.recall_corpus_size));
            const double keep = fcfg.token_filtering ? fcfg.token_ratio : 1.0;
            log.token_recall = token_recall(top_sensitive_tokens(reference, corpus, config.recall_top_fraction),
                                            top_sensitive_tokens(fed.global_model(), corpus, keep));
        }
        if (hooks.on_round) hooks.on_round(log, fed.server());
        run.logs.push_back(std::move(log));
    }
    run.final_state = fed.server();
    run.report = compute_metrics(run.logs, config.target_accuracy);
    return run;
}

std::vector<MethodRun> run_comparison(const ScenarioConfig& config) {
    config.validate();
    std::vector<MethodRun> runs;
    std::optional<std::vector<double>> reference;
    auto lossless = std::find(config.methods.begin(), config.methods.end(), "fedavg-lossless");
    if (lossless != config.methods.end()) {
        runs.push_back(run_method(config, "fedavg-lossless"));
        reference = runs.back().final_state.adapter;
    }
    for (const std::string& m : config.methods) {
        if (m == "fedavg-lossless") continue;
        RunHooks hooks;
        hooks.reference_adapter = reference;
        runs.push_back(run_method(config, m, std::move(hooks)));
    }
    // Report in the configured order.
    std::vector<MethodRun> ordered;
    for (const std::string& m : config.methods) {
        for (auto& r : runs) {
            if (r.method == m) ordered.push_back(std::move(r));
        }
    }
    return ordered;
}

namespace {

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

}  // namespace

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
    std::string out = "method,payload_bytes,bytes_to_target,time_to_target_s,total_time_s,final_accuracy,token_recall\n";
    for (const ComparisonRow& r : rows) {
        const MetricsReport& m = r.report;
        out += r.method + ",";
        out += std::to_string(m.cumulative_uplink_bytes) + ",";
        out += (m.bytes_to_target ? std::to_string(*m.bytes_to_target) : "not_reached") + ",";
        out += (m.time_to_target ? fixed(*m.time_to_target, 6) : "not_reached") + ",";
        out += fixed(m.total_seconds, 6) + ",";
        out += fixed(m.final_accuracy, 4) + ",";
        out += (m.token_recall ? fixed(*m.token_recall, 4) : "") + "\n";
    }
    return out;
}

std::string summary_text(const std::string& method, const MetricsReport& m, double target_accuracy) {
    std::string out;
    out += "method: " + method + "\n";
    out += "rounds: " + std::to_string(m.rounds) + "\n";
    if (m.rounds == 0) out += "note: zero rounds executed\n";
    out += "target_accuracy: " + fixed(target_accuracy, 4) + "\n";
    out += "time_to_target_s: " + (m.time_to_target ? fixed(*m.time_to_target, 6) : std::string("not reached")) + "\n";
    out += "bytes_to_target: " + (m.bytes_to_target ? std::to_string(*m.bytes_to_target) : std::string("not reached")) + "\n";
    out += "cumulative_uplink_bytes: " + std::to_string(m.cumulative_uplink_bytes) + "\n";
    out += "total_time_s: " + fixed(m.total_seconds, 6) + "\n";
    out += "final_accuracy: " + fixed(m.final_accuracy, 4) + "\n";
    out += "token_recall: " + (m.token_recall ? fixed(*m.token_recall, 4) : std::string("n/a")) + "\n";
    return out;
}

}  // namespace fstq
