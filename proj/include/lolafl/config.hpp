#pragma once

// Flat `key = value` configuration. `[section]` lines and `#` comments are
// accepted and ignored, so files may group keys for readability. Later
// settings override earlier ones; the CLI applies its flags last.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lolafl/errors.hpp"
#include "lolafl/orchestrator.hpp"

namespace lolafl {

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError("bad value '" + v + "' for key '" + key + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("bad boolean '" + v + "' for key '" + key + "'");
}

} // namespace detail

inline Scheme parse_scheme(const std::string& v) {
    if (v == "hm") return Scheme::hm;
    if (v == "cm") return Scheme::cm;
    if (v == "fedavg") return Scheme::fedavg;
    if (v == "central") return Scheme::central;
    throw ConfigError("unknown scheme '" + v + "' (hm, cm, fedavg, central)");
}

inline PartitionMode parse_partition(const std::string& v) {
    if (v == "iid") return PartitionMode::iid;
    if (v == "noniid_a" || v == "noniid-a") return PartitionMode::noniid_a;
    if (v == "noniid_b" || v == "noniid-b") return PartitionMode::noniid_b;
    throw ConfigError("unknown partition '" + v + "' (iid, noniid_a, noniid_b)");
}

inline ComputeTiming parse_timing(const std::string& v) {
    if (v == "analytic") return ComputeTiming::analytic;
    if (v == "wallclock") return ComputeTiming::wallclock;
    throw ConfigError("unknown computation timing '" + v + "' (analytic, wallclock)");
}

/// Sets one field. Device count also sets the subchannel count when
/// `keep_subchannels` is false, so M = K unless M is given explicitly.
inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_number;
    const std::string& v = value;
    if (key == "scheme") cfg.scheme = parse_scheme(v);
    else if (key == "layers") cfg.layers = parse_number<int>(key, v);
    else if (key == "eta") cfg.eta = parse_number<double>(key, v);
    else if (key == "eps") cfg.eps = parse_number<double>(key, v);
    else if (key == "lambda") cfg.lambda = parse_number<double>(key, v);
    else if (key == "beta0") cfg.beta0 = parse_number<double>(key, v);
    else if (key == "devices") cfg.channel.devices = parse_number<int>(key, v);
    else if (key == "per_device") cfg.per_device = parse_number<std::size_t>(key, v);
    else if (key == "partition") cfg.partition = parse_partition(v);
    else if (key == "bandwidth") cfg.channel.bandwidth = parse_number<double>(key, v);
    else if (key == "subchannels") cfg.channel.subchannels = parse_number<int>(key, v);
    else if (key == "power_budget") cfg.channel.power_budget = parse_number<double>(key, v);
    else if (key == "noise_power") cfg.channel.noise_power = parse_number<double>(key, v);
    else if (key == "tau") cfg.channel.tau = parse_number<double>(key, v);
    else if (key == "quant_bits") cfg.channel.quant_bits = parse_number<int>(key, v);
    else if (key == "noiseless") cfg.noiseless = parse_bool(key, v);
    else if (key == "server_eval") cfg.server_eval = parse_bool(key, v);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "dataset") cfg.data.kind = v;
    else if (key == "idx_dir") cfg.data.idx_dir = v;
    else if (key == "test_limit") cfg.data.test_limit = parse_number<std::size_t>(key, v);
    else if (key == "classes") {
        cfg.data.classes.clear();
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = detail::trim(item);
            if (!item.empty()) cfg.data.classes.push_back(parse_number<int>(key, item));
        }
    }
    else if (key == "synth_dim") cfg.data.synth_dim = parse_number<Index>(key, v);
    else if (key == "synth_classes") cfg.data.synth_classes = parse_number<int>(key, v);
    else if (key == "synth_rank") cfg.data.synth_rank = parse_number<Index>(key, v);
    else if (key == "synth_noise") cfg.data.synth_noise = parse_number<double>(key, v);
    else if (key == "synth_train") cfg.data.synth_train = parse_number<std::size_t>(key, v);
    else if (key == "synth_test") cfg.data.synth_test = parse_number<std::size_t>(key, v);
    else if (key == "comp_timing") cfg.compute.timing = parse_timing(v);
    else if (key == "device_flops") cfg.compute.device_flops = parse_number<double>(key, v);
    else if (key == "server_flops") cfg.compute.server_flops = parse_number<double>(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
}

struct Setting {
    std::string key;
    std::string value;
};

inline std::vector<Setting> parse_settings(std::istream& in, const std::string& origin = "config") {
    std::vector<Setting> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto t = detail::trim(line);
        if (t.empty() || (t.front() == '[' && t.back() == ']')) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        }
        out.push_back({detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1))});
    }
    return out;
}

inline void apply_settings(ExperimentConfig& cfg, const std::vector<Setting>& settings) {
    bool subchannels_given = false;
    for (const auto& s : settings) {
        apply_setting(cfg, s.key, s.value);
        if (s.key == "subchannels") subchannels_given = true;
    }
    if (!subchannels_given) {
        for (const auto& s : settings) {
            if (s.key == "devices") cfg.channel.subchannels = cfg.channel.devices;
        }
    }
}

inline std::vector<Setting> read_settings_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    return parse_settings(in, path);
}

} // namespace lolafl
