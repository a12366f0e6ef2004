// lolafl_cli: run, sweep, analytic and report verbs.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lolafl/config.hpp"
#include "lolafl/metrics.hpp"
#include "lolafl/orchestrator.hpp"

namespace {

using namespace lolafl;

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Experiment flags are collected as strings and applied after the config file
// so that flags win.
struct ExperimentFlags {
    std::string config_path;
    std::map<std::string, std::string> values;
    std::vector<std::string> overrides; // key=value

    void add(CLI::App* app) {
        app->add_option("--config", config_path, "key = value config file");
        app->add_option("--set", overrides, "Extra key=value setting (repeatable)");
        for (const auto& [flag, key, help] : kFlags) {
            app->add_option_function<std::string>(
                flag, [this, key = std::string(key)](const std::string& v) { values[key] = v; }, help);
        }
    }

    ExperimentConfig build() const {
        std::vector<Setting> settings;
        if (!config_path.empty()) settings = read_settings_file(config_path);
        for (const auto& [k, v] : values) settings.push_back({k, v});
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
            settings.push_back({o.substr(0, eq), o.substr(eq + 1)});
        }
        ExperimentConfig cfg;
        apply_settings(cfg, settings);
        cfg.validate();
        return cfg;
    }

    struct Flag {
        const char* flag;
        const char* key;
        const char* help;
    };
    static constexpr Flag kFlags[] = {
        {"--scheme", "scheme", "hm | cm | fedavg | central"},
        {"--layers", "layers", "Number of layers (= rounds)"},
        {"--eta", "eta", "Learning rate"},
        {"--eps", "eps", "Coding precision"},
        {"--lambda", "lambda", "Softmax scale for membership estimation"},
        {"--beta0", "beta0", "SVD energy retention for cm"},
        {"--devices", "devices", "Number of devices K (also sets M unless given)"},
        {"--per-device", "per_device", "Training samples per device"},
        {"--partition", "partition", "iid | noniid_a | noniid_b"},
        {"--bandwidth", "bandwidth", "Total bandwidth B in Hz"},
        {"--subchannels", "subchannels", "Number of subchannels M"},
        {"--power-budget", "power_budget", "Average transmit power P0 in W"},
        {"--noise-power", "noise_power", "Noise power in W"},
        {"--tau", "tau", "Power-control cutoff on |h|^2"},
        {"--quant-bits", "quant_bits", "Bits per transmitted value"},
        {"--seed", "seed", "Master seed"},
        {"--dataset", "dataset", "mnist | synthetic"},
        {"--idx-dir", "idx_dir", "Directory with IDX train/t10k files"},
        {"--test-limit", "test_limit", "Use only the first N test samples"},
        {"--classes", "classes", "Comma-separated class subset"},
        {"--comp-timing", "comp_timing", "analytic | wallclock"},
        {"--device-flops", "device_flops", "Device FLOP rate for analytic timing"},
        {"--server-flops", "server_flops", "Server FLOP rate for analytic timing"},
    };
};

void print_summary(const ExperimentReport& rep) {
    std::cout << "scheme=" << to_string(rep.config.scheme) << " seed=" << rep.config.seed
              << " rounds=" << rep.rounds.size() << " t_total_s=" << fmt17(rep.t_total_s)
              << " accuracy=" << (rep.final_accuracy ? fmt17(*rep.final_accuracy) : "n/a") << '\n';
}

int cmd_run(const ExperimentFlags& flags, const std::string& out_dir) {
    const auto cfg = flags.build();
    const auto rep = run_experiment(cfg);
    emit_report(rep, out_dir);
    print_summary(rep);
    return 0;
}

// Cartesian product of the --vary lists, repeated for each trial seed.
int cmd_sweep(const ExperimentFlags& flags, const std::vector<std::string>& vary, int trials,
              const std::string& out_dir) {
    const auto base = flags.build();
    if (trials < 1) throw ConfigError("--trials must be at least 1");
    std::vector<std::pair<std::string, std::vector<std::string>>> axes;
    for (const auto& v : vary) {
        const auto eq = v.find('=');
        if (eq == std::string::npos) throw ConfigError("--vary expects key=v1,v2,..., got '" + v + "'");
        std::vector<std::string> vals;
        std::stringstream ss(v.substr(eq + 1));
        std::string item;
        while (std::getline(ss, item, ',')) vals.push_back(item);
        if (vals.empty()) throw ConfigError("--vary " + v.substr(0, eq) + " has no values");
        axes.emplace_back(v.substr(0, eq), std::move(vals));
    }

    std::filesystem::create_directories(out_dir);
    std::ofstream csv(std::filesystem::path(out_dir) / "sweep.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write sweep.csv in " + out_dir);
    csv << "run";
    for (const auto& a : axes) csv << ',' << a.first;
    csv << ",trial,seed,accuracy,t_total_s,mean_delta\n";

    std::vector<std::size_t> idx(axes.size(), 0);
    int run = 0;
    for (;;) {
        ExperimentConfig cfg = base;
        std::vector<Setting> settings;
        for (std::size_t a = 0; a < axes.size(); ++a) settings.push_back({axes[a].first, axes[a].second[idx[a]]});
        apply_settings(cfg, settings);
        cfg.validate();
        for (int t = 0; t < trials; ++t) {
            ExperimentConfig trial = cfg;
            trial.seed = cfg.seed + static_cast<std::uint64_t>(t);
            const auto rep = run_experiment(trial);
            char name[32];
            std::snprintf(name, sizeof name, "run_%04d", run);
            emit_report(rep, std::filesystem::path(out_dir) / name);
            const auto j = report_to_json(rep);
            const auto& md = j["totals"]["mean_delta"];
            csv << run;
            for (const auto& s : settings) csv << ',' << s.value;
            csv << ',' << t << ',' << trial.seed << ',' << fmt17(rep.final_accuracy) << ','
                << fmt17(rep.t_total_s) << ',' << (md.is_null() ? std::string() : fmt17(md.get<double>()))
                << '\n';
            csv.flush();
            print_summary(rep);
            ++run;
        }
        std::size_t a = 0;
        for (; a < axes.size(); ++a) {
            if (++idx[a] < axes[a].second.size()) break;
            idx[a] = 0;
        }
        if (a == axes.size()) break;
    }
    return 0;
}

int cmd_analytic(const AnalyticInputs& in, int baseline_rounds) {
    in.validate();
    const auto params = analytic_param_counts(in);
    const auto ops = analytic_complexity(in);
    const auto lat = analytic_latency(in, baseline_rounds);
    auto counts = [](const SchemeCounts& c) {
        return nlohmann::json{{"hm", c.hm}, {"cm", c.cm}, {"traditional", c.traditional}};
    };
    auto latency = [](const AnalyticLatency& l) {
        return nlohmann::json{{"comm_s", l.comm_s}, {"comp_s", l.comp_s}, {"total_s", l.total()}};
    };
    nlohmann::json j;
    j["param_counts"] = counts(params);
    j["complexity_per_round"] = counts(ops);
    j["transmission_rate_bps"] = transmission_rate(in.channel);
    j["latency"] = {{"hm", latency(lat.hm)}, {"cm", latency(lat.cm)}, {"traditional", latency(lat.traditional)}};
    j["reduction_vs_traditional"] = {{"hm", latency_reduction(lat.hm.total(), lat.traditional.total())},
                                     {"cm", latency_reduction(lat.cm.total(), lat.traditional.total())}};
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_report(const std::string& summary, const std::string& out_dir) {
    const auto rep = read_summary(summary);
    emit_report(rep, out_dir);
    print_summary(rep);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layer-wise federated learning simulator"};
    app.require_subcommand(1);

    ExperimentFlags run_flags;
    std::string run_out = "out";
    auto* run = app.add_subcommand("run", "Run one experiment and write rounds.csv, summary.json, payloads.csv");
    run_flags.add(run);
    run->add_option("--out", run_out, "Output directory");

    ExperimentFlags sweep_flags;
    std::string sweep_out = "sweep";
    std::vector<std::string> vary;
    int trials = 1;
    auto* sweep = app.add_subcommand("sweep", "Run a grid of experiments over several seeds");
    sweep_flags.add(sweep);
    sweep->add_option("--vary", vary, "key=v1,v2,... (repeatable)");
    sweep->add_option("--trials", trials, "Seeds per grid point (seed, seed+1, ...)");
    sweep->add_option("--out", sweep_out, "Output directory");

    AnalyticInputs ain;
    int baseline_rounds = 10;
    auto* analytic = app.add_subcommand("analytic", "Closed-form parameter counts, complexity and latency");
    analytic->add_option("--layers", ain.layers, "L");
    analytic->add_option("--classes", ain.classes, "J");
    analytic->add_option("--dim", ain.dim, "d");
    analytic->add_option("--delta", ain.delta, "Compression rate");
    analytic->add_option("--baseline-params", ain.baseline_params, "W");
    analytic->add_option("--baseline-depth", ain.baseline_depth, "N");
    analytic->add_option("--baseline-width", ain.baseline_width, "n");
    analytic->add_option("--baseline-rounds", baseline_rounds, "Rounds for traditional FL");
    analytic->add_option("--samples", ain.samples, "Total training samples m");
    analytic->add_option("--devices", ain.devices, "K");
    analytic->add_option("--bandwidth", ain.channel.bandwidth, "B in Hz");
    analytic->add_option("--subchannels", ain.channel.subchannels, "M");
    analytic->add_option("--power-budget", ain.channel.power_budget, "P0 in W");
    analytic->add_option("--noise-power", ain.channel.noise_power, "Noise power in W");
    analytic->add_option("--tau", ain.channel.tau, "Cutoff");
    analytic->add_option("--quant-bits", ain.channel.quant_bits, "Q");
    analytic->add_option("--device-flops", ain.device_flops, "Device FLOP rate");
    analytic->add_option("--server-flops", ain.server_flops, "Server FLOP rate");

    std::string summary_path;
    std::string report_out = "out";
    auto* report = app.add_subcommand("report", "Re-emit report files from a saved summary.json");
    report->add_option("--summary", summary_path, "Path to summary.json")->required();
    report->add_option("--out", report_out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*run) return cmd_run(run_flags, run_out);
        if (*sweep) return cmd_sweep(sweep_flags, vary, trials, sweep_out);
        if (*analytic) {
            ain.channel.devices = ain.devices;
            if (analytic->count("--subchannels") == 0) ain.channel.subchannels = ain.devices;
            return cmd_analytic(ain, baseline_rounds);
        }
        if (*report) return cmd_report(summary_path, report_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}
