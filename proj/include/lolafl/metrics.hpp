#pragma once

// Closed-form latency/complexity calculators and report files.
//
// Report layout (all numbers printed with 17 significant digits):
//   rounds.csv   round,skipped,participants,max_params,total_bytes,max_comm_s,
//                max_comp_s,server_comp_s,latency_s,accuracy,server_accuracy,
//                delta,broadcast_delta
//   payloads.csv round,device,outage,params,bytes,comm_s,comp_s
//   summary.json {schema_version, config, totals, rounds[]}
// Missing optional values are empty CSV fields and JSON null.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "lolafl/channel.hpp"
#include "lolafl/config.hpp"
#include "lolafl/errors.hpp"
#include "lolafl/orchestrator.hpp"

namespace lolafl {

struct AnalyticInputs {
    int layers = 1;               // L
    int classes = 10;             // J
    double dim = 784;             // d
    double delta = 0.2;           // δ
    double baseline_params = 1.1e7; // W
    int devices = 10;             // K
    double samples = 12000;       // m (total)
    int baseline_depth = 18;      // N
    double baseline_width = 800;  // n
    ChannelConfig channel;
    double device_flops = 10e9;
    double server_flops = 100e9;

    void validate() const {
        channel.validate();
        if (layers < 1 || classes < 1 || devices < 1 || baseline_depth < 1) {
            throw ConfigError("analytic inputs: counts must be positive");
        }
        if (!(dim > 0 && baseline_params > 0 && samples > 0 && baseline_width > 0)) {
            throw ConfigError("analytic inputs: sizes must be positive");
        }
        if (!(delta >= 0.0 && delta <= 1.0)) throw ConfigError("analytic inputs: delta must lie in [0, 1]");
        if (!(device_flops > 0 && server_flops > 0)) throw ConfigError("analytic inputs: FLOP rates must be positive");
    }

    double samples_per_device() const { return samples / devices; }
};

struct SchemeCounts {
    double hm = 0.0;
    double cm = 0.0;
    double traditional = 0.0;
};

/// Parameters uploaded per device over the whole training run.
inline SchemeCounts analytic_param_counts(const AnalyticInputs& in) {
    const double L = in.layers;
    const double J1 = in.classes + 1.0;
    const double d = in.dim;
    return {L * J1 * d * d, L * J1 * (2.0 * in.delta * d * d + in.delta * d), L * in.baseline_params};
}

/// Operation counts for one round of the whole system.
inline SchemeCounts analytic_complexity(const AnalyticInputs& in) {
    const double J = in.classes;
    const double d = in.dim;
    const double K = in.devices;
    const double m = in.samples;
    const double d2 = d * d;
    const double d3 = d2 * d;
    const double N = in.baseline_depth;
    const double n = in.baseline_width;
    return {(J + 1) * (2 * K + 1) * d3 + (J + 3) * m * d2,
            (J + 1) * (2 * K + 1) * d3 + (4 * in.delta * K + (J + 3) * m) * d2,
            2 * m * ((N - 1) * n * n + (J + d) * n)};
}

/// Operation counts for one device in one round, matching the simulator's
/// analytic timing model.
inline SchemeCounts analytic_device_ops(const AnalyticInputs& in) {
    const double mk = in.samples_per_device();
    const double J = in.classes;
    const double N = in.baseline_depth;
    const double n = in.baseline_width;
    return {detail::device_ops(Scheme::hm, in.dim, J, mk, 0.0),
            detail::device_ops(Scheme::cm, in.dim, J, mk, in.delta),
            2 * mk * ((N - 1) * n * n + (J + in.dim) * n)};
}

struct AnalyticLatency {
    double comm_s = 0.0;
    double comp_s = 0.0;
    double total() const { return comm_s + comp_s; }
};

struct LatencyBreakdown {
    AnalyticLatency hm;
    AnalyticLatency cm;
    AnalyticLatency traditional;
};

/// Per-device latency over the run: LoLaFL needs L rounds (one per layer),
/// traditional FL needs `baseline_rounds` rounds of W-parameter uploads.
inline LatencyBreakdown analytic_latency(const AnalyticInputs& in, int baseline_rounds) {
    in.validate();
    if (baseline_rounds < 1) throw ConfigError("baseline rounds must be positive");
    const auto params = analytic_param_counts(in);
    const auto ops = analytic_device_ops(in);
    LatencyBreakdown out;
    out.hm = {upload_latency(params.hm, in.channel), in.layers * ops.hm / in.device_flops};
    out.cm = {upload_latency(params.cm, in.channel), in.layers * ops.cm / in.device_flops};
    out.traditional = {baseline_rounds * upload_latency(in.baseline_params, in.channel),
                       baseline_rounds * ops.traditional / in.device_flops};
    return out;
}

/// 1 − T_ours / T_reference.
inline double latency_reduction(double t_ours, double t_reference) {
    if (!(t_reference > 0.0)) throw DomainError("reference latency must be positive");
    return 1.0 - t_ours / t_reference;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline constexpr int kSchemaVersion = 1;

inline std::string fmt17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline std::string fmt17(const std::optional<double>& x) { return x ? fmt17(*x) : std::string(); }

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& x) {
    return x ? nlohmann::json(*x) : nlohmann::json(nullptr);
}

inline std::optional<double> json_opt(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

} // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["scheme"] = to_string(c.scheme);
    j["layers"] = c.layers;
    j["eta"] = c.eta;
    j["eps"] = c.eps;
    j["lambda"] = c.lambda;
    j["beta0"] = c.beta0;
    j["devices"] = c.channel.devices;
    j["per_device"] = c.per_device;
    j["partition"] = to_string(c.partition);
    j["bandwidth"] = c.channel.bandwidth;
    j["subchannels"] = c.channel.subchannels;
    j["power_budget"] = c.channel.power_budget;
    j["noise_power"] = c.channel.noise_power;
    j["tau"] = c.channel.tau;
    j["quant_bits"] = c.channel.quant_bits;
    j["noiseless"] = c.noiseless;
    j["server_eval"] = c.server_eval;
    j["seed"] = c.seed;
    j["dataset"] = c.data.kind;
    j["idx_dir"] = c.data.idx_dir;
    j["classes"] = c.data.classes;
    j["test_limit"] = c.data.test_limit;
    j["synth_dim"] = c.data.synth_dim;
    j["synth_classes"] = c.data.synth_classes;
    j["synth_rank"] = c.data.synth_rank;
    j["synth_noise"] = c.data.synth_noise;
    j["synth_train"] = c.data.synth_train;
    j["synth_test"] = c.data.synth_test;
    j["comp_timing"] = to_string(c.compute.timing);
    j["device_flops"] = c.compute.device_flops;
    j["server_flops"] = c.compute.server_flops;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
        c.scheme = parse_scheme(j.at("scheme").get<std::string>());
        c.layers = j.at("layers").get<int>();
        c.eta = j.at("eta").get<double>();
        c.eps = j.at("eps").get<double>();
        c.lambda = j.at("lambda").get<double>();
        c.beta0 = j.at("beta0").get<double>();
        c.channel.devices = j.at("devices").get<int>();
        c.per_device = j.at("per_device").get<std::size_t>();
        c.partition = parse_partition(j.at("partition").get<std::string>());
        c.channel.bandwidth = j.at("bandwidth").get<double>();
        c.channel.subchannels = j.at("subchannels").get<int>();
        c.channel.power_budget = j.at("power_budget").get<double>();
        c.channel.noise_power = j.at("noise_power").get<double>();
        c.channel.tau = j.at("tau").get<double>();
        c.channel.quant_bits = j.at("quant_bits").get<int>();
        c.noiseless = j.at("noiseless").get<bool>();
        c.server_eval = j.at("server_eval").get<bool>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.data.kind = j.at("dataset").get<std::string>();
        c.data.idx_dir = j.at("idx_dir").get<std::string>();
        c.data.classes = j.at("classes").get<std::vector<int>>();
        c.data.test_limit = j.at("test_limit").get<std::size_t>();
        c.data.synth_dim = j.at("synth_dim").get<Index>();
        c.data.synth_classes = j.at("synth_classes").get<int>();
        c.data.synth_rank = j.at("synth_rank").get<Index>();
        c.data.synth_noise = j.at("synth_noise").get<double>();
        c.data.synth_train = j.at("synth_train").get<std::size_t>();
        c.data.synth_test = j.at("synth_test").get<std::size_t>();
        c.compute.timing = parse_timing(j.at("comp_timing").get<std::string>());
        c.compute.device_flops = j.at("device_flops").get<double>();
        c.compute.server_flops = j.at("server_flops").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed summary config: ") + e.what());
    }
    return c;
}

inline nlohmann::json report_to_json(const ExperimentReport& rep) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["config"] = config_to_json(rep.config);
    std::size_t bytes = 0;
    std::size_t params = 0;
    double delta_sum = 0.0;
    int delta_n = 0;
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& r : rep.rounds) {
        bytes += r.total_bytes();
        params += r.max_params();
        if (r.delta) {
            delta_sum += *r.delta;
            ++delta_n;
        }
        nlohmann::json jr;
        jr["round"] = r.round;
        jr["skipped"] = r.skipped;
        jr["server_comp_s"] = r.server_comp_s;
        jr["latency_s"] = r.latency_s;
        jr["accuracy"] = detail::opt_json(r.accuracy);
        jr["server_accuracy"] = detail::opt_json(r.server_accuracy);
        jr["delta"] = detail::opt_json(r.delta);
        jr["broadcast_delta"] = detail::opt_json(r.broadcast_delta);
        nlohmann::json devs = nlohmann::json::array();
        for (const auto& d : r.devices) {
            devs.push_back({{"outage", d.outage},
                            {"params", d.params},
                            {"bytes", d.bytes},
                            {"comm_s", d.comm_s},
                            {"comp_s", d.comp_s}});
        }
        jr["devices"] = std::move(devs);
        rounds.push_back(std::move(jr));
    }
    nlohmann::json totals;
    totals["rounds"] = rep.rounds.size();
    totals["t_total_s"] = rep.t_total_s;
    totals["final_accuracy"] = detail::opt_json(rep.final_accuracy);
    totals["total_bytes"] = bytes;
    totals["max_params_per_device"] = params;
    totals["mean_delta"] = delta_n > 0 ? nlohmann::json(delta_sum / delta_n) : nlohmann::json(nullptr);
    totals["transmission_rate_bps"] = rep.transmission_rate_bps;
    j["totals"] = std::move(totals);
    j["rounds"] = std::move(rounds);
    return j;
}

inline ExperimentReport report_from_json(const nlohmann::json& j) {
    try {
        const int version = j.at("schema_version").get<int>();
        if (version != kSchemaVersion) {
            throw ConfigError("unsupported summary schema version " + std::to_string(version));
        }
        ExperimentReport rep;
        rep.config = config_from_json(j.at("config"));
        const auto& t = j.at("totals");
        rep.t_total_s = t.at("t_total_s").get<double>();
        rep.final_accuracy = detail::json_opt(t.at("final_accuracy"));
        rep.transmission_rate_bps = t.at("transmission_rate_bps").get<double>();
        for (const auto& jr : j.at("rounds")) {
            RoundResult r;
            r.round = jr.at("round").get<int>();
            r.skipped = jr.at("skipped").get<bool>();
            r.server_comp_s = jr.at("server_comp_s").get<double>();
            r.latency_s = jr.at("latency_s").get<double>();
            r.accuracy = detail::json_opt(jr.at("accuracy"));
            r.server_accuracy = detail::json_opt(jr.at("server_accuracy"));
            r.delta = detail::json_opt(jr.at("delta"));
            r.broadcast_delta = detail::json_opt(jr.at("broadcast_delta"));
            for (const auto& jd : jr.at("devices")) {
                DeviceRound d;
                d.outage = jd.at("outage").get<bool>();
                d.params = jd.at("params").get<std::size_t>();
                d.bytes = jd.at("bytes").get<std::size_t>();
                d.comm_s = jd.at("comm_s").get<double>();
                d.comp_s = jd.at("comp_s").get<double>();
                r.devices.push_back(d);
            }
            rep.rounds.push_back(std::move(r));
        }
        return rep;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed summary: ") + e.what());
    }
}

inline std::string rounds_csv(const ExperimentReport& rep) {
    std::ostringstream out;
    out << "round,skipped,participants,max_params,total_bytes,max_comm_s,max_comp_s,server_comp_s,"
           "latency_s,accuracy,server_accuracy,delta,broadcast_delta\n";
    for (const auto& r : rep.rounds) {
        out << r.round << ',' << (r.skipped ? 1 : 0) << ',' << r.participants() << ',' << r.max_params()
            << ',' << r.total_bytes() << ',' << fmt17(r.max_comm_s()) << ',' << fmt17(r.max_comp_s()) << ','
            << fmt17(r.server_comp_s) << ',' << fmt17(r.latency_s) << ',' << fmt17(r.accuracy) << ','
            << fmt17(r.server_accuracy) << ',' << fmt17(r.delta) << ',' << fmt17(r.broadcast_delta) << '\n';
    }
    return out.str();
}

inline std::string payloads_csv(const ExperimentReport& rep) {
    std::ostringstream out;
    out << "round,device,outage,params,bytes,comm_s,comp_s\n";
    for (const auto& r : rep.rounds) {
        for (std::size_t k = 0; k < r.devices.size(); ++k) {
            const auto& d = r.devices[k];
            out << r.round << ',' << k << ',' << (d.outage ? 1 : 0) << ',' << d.params << ',' << d.bytes << ','
                << fmt17(d.comm_s) << ',' << fmt17(d.comp_s) << '\n';
        }
    }
    return out.str();
}

struct ReportFiles {
    std::filesystem::path rounds_csv;
    std::filesystem::path summary_json;
    std::filesystem::path payloads_csv;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + p.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + p.string());
}

} // namespace detail

inline ReportFiles emit_report(const ExperimentReport& rep, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    ReportFiles f{out_dir / "rounds.csv", out_dir / "summary.json", out_dir / "payloads.csv"};
    detail::write_text(f.rounds_csv, rounds_csv(rep));
    detail::write_text(f.summary_json, report_to_json(rep).dump(2) + "\n");
    detail::write_text(f.payloads_csv, payloads_csv(rep));
    return f;
}

inline ExperimentReport read_summary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
    return report_from_json(j);
}

} // namespace lolafl
