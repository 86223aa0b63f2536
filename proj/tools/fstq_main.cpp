// fstq: run, compare and report federated compression experiments.
//
//   fstq run     --config cfg.json --out runs/a [--methods fed-fstq] [--resume]
//   fstq compare --config cfg.json --out runs/cmp [--methods fed-fstq,fedavg-lossless]
//   fstq report  --out runs/cmp [--target-acc 0.6]
//   fstq config  > cfg.json      (prints the default config)
//
// FSTQ_LOG_LEVEL selects verbosity (trace, debug, info, warn, error, off).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "fstq/codec.h"
#include "fstq/errors.h"
#include "fstq/metrics.h"
#include "fstq/scenario.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOptions {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string methods;
    std::optional<std::size_t> rounds;
    std::optional<double> target_acc;
    std::string profile;
    bool resume = false;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_resume) {
    cmd->add_option("--config", o.config_path, "scenario config (JSON)");
    cmd->add_option("--out", o.out_dir, "output directory")->required();
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_option("--methods", o.methods, "comma-separated methods");
    cmd->add_option("--rounds", o.rounds, "number of federated rounds");
    cmd->add_option("--target-acc", o.target_acc, "held-out accuracy target");
    cmd->add_option("--profile", o.profile, "uplink profile")->check(CLI::IsMember({"a", "b"}));
    if (with_resume) cmd->add_flag("--resume", o.resume, "continue a partial run in --out");
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw fstq::ConfigError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Write-then-rename so readers never see a half-written file.
void write_atomic(const fs::path& p, const std::string& content) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << content;
    }
    fs::rename(tmp, p);
}

std::vector<std::string> split_methods(const std::string& list) {
    std::vector<std::string> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

fstq::ScenarioConfig load_config(const CommonOptions& o) {
    fstq::ScenarioConfig cfg;
    if (!o.config_path.empty()) {
        json j;
        try {
            j = json::parse(read_file(o.config_path));
        } catch (const json::parse_error& e) {
            throw fstq::ConfigError(o.config_path + ": " + e.what());
        }
        cfg = fstq::scenario_from_json(j);
    }
    if (o.seed) cfg.seed = *o.seed;
    if (!o.methods.empty()) cfg.methods = split_methods(o.methods);
    if (o.rounds) cfg.federation.rounds = *o.rounds;
    if (o.target_acc) cfg.target_accuracy = *o.target_acc;
    if (!o.profile.empty()) cfg.profile = o.profile[0];
    cfg.validate();
    return cfg;
}

std::string hex_string(std::span<const std::uint8_t> bytes) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (std::uint8_t b : bytes) {
        out += digits[b >> 4];
        out += digits[b & 0xF];
    }
    return out + "\n";
}

// d = 1000, one group; coordinates 7, 123, 999 at 16, 4 and 2 bits.
std::vector<std::uint8_t> canonical_vector() {
    std::vector<double> delta(1000, 0.0);
    delta[7] = 0.5;
    delta[123] = -0.25;
    delta[999] = -0.4;
    fstq::BitAllocation alloc{std::vector<fstq::BitWidth>(1000, fstq::BitWidth::kPruned)};
    alloc.widths[7] = fstq::BitWidth::kSixteen;
    alloc.widths[123] = fstq::BitWidth::kFour;
    alloc.widths[999] = fstq::BitWidth::kTwo;
    const auto layout = fstq::single_group_layout(1000);
    return fstq::pack(fstq::quantize(delta, alloc, layout));
}

void write_common_outputs(const fs::path& dir, const fstq::ScenarioConfig& cfg) {
    fs::create_directories(dir);
    write_atomic(dir / "config.json", fstq::scenario_to_json(cfg).dump(2) + "\n");
    write_atomic(dir / "message_392bit.hex", hex_string(canonical_vector()));
}

// rounds.jsonl is appended and flushed per round; checkpoint.json records the
// server state after the last logged round.
class RunWriter {
public:
    RunWriter(const fs::path& dir, bool append) : dir_(dir) {
        log_.open(dir / "rounds.jsonl", append ? std::ios::app : std::ios::trunc);
        if (!log_) throw std::runtime_error("cannot write " + (dir / "rounds.jsonl").string());
    }

    void on_round(const fstq::RoundLog& log, const fstq::ServerState& state) {
        log_ << json(log).dump() << '\n';
        log_.flush();
        write_atomic(dir_ / "checkpoint.json", json{{"round", state.round}, {"adapter", state.adapter}}.dump() + "\n");
    }

private:
    fs::path dir_;
    std::ofstream log_;
};

void write_method_outputs(const fs::path& dir, const fstq::MethodRun& run, double target) {
    write_atomic(dir / "summary.txt", fstq::summary_text(run.method, run.report, target));
    write_atomic(dir / "method.txt", run.method + "\n");
}

int cmd_run(const CommonOptions& o) {
    const fs::path dir = o.out_dir;
    fstq::ScenarioConfig cfg;
    std::string method;
    fstq::RunHooks hooks;

    if (o.resume) {
        if (!fs::exists(dir / "config.json") || !fs::exists(dir / "method.txt")) {
            throw fstq::ConfigError("nothing to resume in " + dir.string());
        }
        cfg = fstq::scenario_from_json(json::parse(read_file(dir / "config.json")));
        method = read_file(dir / "method.txt");
        while (!method.empty() && std::isspace(static_cast<unsigned char>(method.back()))) method.pop_back();
        if (fs::exists(dir / "checkpoint.json")) {
            const json ck = json::parse(read_file(dir / "checkpoint.json"));
            fstq::ServerState state{ck.at("round").get<std::uint64_t>(), ck.at("adapter").get<std::vector<double>>()};
            auto logs = fstq::parse_jsonl(fs::exists(dir / "rounds.jsonl") ? read_file(dir / "rounds.jsonl") : "");
            if (logs.size() < state.round) throw fstq::ConfigError("round log is shorter than the checkpoint");
            logs.resize(state.round);
            write_atomic(dir / "rounds.jsonl", fstq::to_jsonl(logs));
            spdlog::info("resuming {} after round {}", method, state.round);
            hooks.resume_from = std::move(state);
            hooks.prior_logs = std::move(logs);
        } else {
            write_atomic(dir / "rounds.jsonl", "");
        }
    } else {
        cfg = load_config(o);
        method = cfg.methods.empty() ? "fed-fstq" : cfg.methods.front();
        cfg.methods = {method};
        write_common_outputs(dir, cfg);
        write_atomic(dir / "method.txt", method + "\n");
        fs::remove(dir / "checkpoint.json");
    }

    RunWriter writer(dir, o.resume);
    hooks.on_round = [&](const fstq::RoundLog& l, const fstq::ServerState& s) { writer.on_round(l, s); };
    const fstq::MethodRun run = fstq::run_method(cfg, method, std::move(hooks));
    write_method_outputs(dir, run, cfg.target_accuracy);
    std::cout << fstq::summary_text(run.method, run.report, cfg.target_accuracy);
    return 0;
}

int cmd_compare(const CommonOptions& o) {
    const fs::path dir = o.out_dir;
    const fstq::ScenarioConfig cfg = load_config(o);
    write_common_outputs(dir, cfg);
    const auto runs = fstq::run_comparison(cfg);
    std::vector<fstq::ComparisonRow> rows;
    for (const auto& run : runs) {
        const fs::path sub = dir / run.method;
        fs::create_directories(sub);
        write_atomic(sub / "rounds.jsonl", fstq::to_jsonl(run.logs));
        write_method_outputs(sub, run, cfg.target_accuracy);
        rows.push_back({run.method, run.report});
    }
    const std::string csv = fstq::comparison_csv(rows);
    write_atomic(dir / "compare.csv", csv);
    std::cout << csv;
    return 0;
}

int cmd_report(const CommonOptions& o) {
    const fs::path dir = o.out_dir;
    double target = fstq::ScenarioConfig{}.target_accuracy;
    if (fs::exists(dir / "config.json")) {
        target = fstq::scenario_from_json(json::parse(read_file(dir / "config.json"))).target_accuracy;
    }
    if (o.target_acc) target = *o.target_acc;

    // A run directory holds rounds.jsonl itself; a compare directory holds one
    // subdirectory per method.
    std::vector<fs::path> run_dirs;
    if (fs::exists(dir / "rounds.jsonl")) {
        run_dirs.push_back(dir);
    } else {
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_directory() && fs::exists(entry.path() / "rounds.jsonl")) run_dirs.push_back(entry.path());
        }
        std::sort(run_dirs.begin(), run_dirs.end());
    }
    if (run_dirs.empty()) throw fstq::ConfigError("no rounds.jsonl under " + dir.string());

    std::vector<fstq::ComparisonRow> rows;
    for (const fs::path& d : run_dirs) {
        std::string method = d.filename().string();
        if (fs::exists(d / "method.txt")) {
            method = read_file(d / "method.txt");
            while (!method.empty() && std::isspace(static_cast<unsigned char>(method.back()))) method.pop_back();
        }
        const auto logs = fstq::parse_jsonl(read_file(d / "rounds.jsonl"));
        const auto report = fstq::compute_metrics(logs, target);
        write_atomic(d / "summary.txt", fstq::summary_text(method, report, target));
        rows.push_back({method, report});
    }
    const std::string csv = fstq::comparison_csv(rows);
    if (run_dirs.size() > 1 || run_dirs.front() != dir) write_atomic(dir / "compare.csv", csv);
    std::cout << csv;
    return 0;
}

void configure_logging() {
    auto logger = spdlog::stderr_color_mt("fstq");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::info);
    if (const char* env = std::getenv("FSTQ_LOG_LEVEL")) {
        const auto level = spdlog::level::from_str(env);
        if (level == spdlog::level::off && std::string(env) != "off") {
            spdlog::warn("unknown FSTQ_LOG_LEVEL \"{}\", keeping info", env);
        } else {
            spdlog::set_level(level);
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    configure_logging();
    CLI::App app{"Federated LoRA update compression experiments"};
    app.require_subcommand(1);

    CommonOptions run_opts, compare_opts, report_opts;
    auto* run = app.add_subcommand("run", "run one method and write per-round logs");
    add_common(run, run_opts, true);
    auto* compare = app.add_subcommand("compare", "run several methods under one scenario");
    add_common(compare, compare_opts, false);
    auto* report = app.add_subcommand("report", "recompute metrics from existing logs");
    report->add_option("--out", report_opts.out_dir, "run or compare directory")->required();
    report->add_option("--target-acc", report_opts.target_acc, "held-out accuracy target");
    app.add_subcommand("config", "print the default scenario config");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return cmd_run(run_opts);
        if (*compare) return cmd_compare(compare_opts);
        if (*report) return cmd_report(report_opts);
        std::cout << fstq::scenario_to_json(fstq::ScenarioConfig{}).dump(2) << "\n";
        return 0;
    } catch (const fstq::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
