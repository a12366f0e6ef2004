#pragma once

// Round-by-round execution of the layer-wise federated protocol.
//
// Every round builds exactly one layer. Devices compute local quantities from
// their current features, upload them over the fading channel, the server
// aggregates, and the resulting global layer is broadcast back and used by
// every device (including those that were in outage) to transform its
// features for the next round.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lolafl/aggregation.hpp"
#include "lolafl/channel.hpp"
#include "lolafl/data.hpp"
#include "lolafl/errors.hpp"
#include "lolafl/redunet.hpp"
#include "lolafl/rng.hpp"

namespace lolafl {

enum class Scheme { hm, cm, fedavg, central };
enum class ComputeTiming { analytic, wallclock };

inline std::string to_string(Scheme s) {
    switch (s) {
    case Scheme::hm: return "hm";
    case Scheme::cm: return "cm";
    case Scheme::fedavg: return "fedavg";
    case Scheme::central: return "central";
    }
    return "?";
}

inline std::string to_string(PartitionMode p) {
    switch (p) {
    case PartitionMode::iid: return "iid";
    case PartitionMode::noniid_a: return "noniid_a";
    case PartitionMode::noniid_b: return "noniid_b";
    }
    return "?";
}

inline std::string to_string(ComputeTiming t) {
    return t == ComputeTiming::analytic ? "analytic" : "wallclock";
}

/// Where training and test data come from.
struct DatasetSpec {
    std::string kind = "mnist"; // "mnist" (any IDX pair) or "synthetic"
    std::string idx_dir;        // directory holding {train,t10k}-{images,labels} files
    std::vector<int> classes;   // optional subset, relabeled ascending
    std::size_t test_limit = 0; // 0 = whole test set

    Index synth_dim = 20;
    int synth_classes = 3;
    Index synth_rank = 2;
    double synth_noise = 0.05;
    std::size_t synth_train = 300;
    std::size_t synth_test = 300;
};

/// Operation-count timing model. Counts follow the per-round complexity
/// breakdown (matrix products, inversions, SVDs) and are divided by the rates.
struct ComputeModel {
    ComputeTiming timing = ComputeTiming::analytic;
    double device_flops = 10e9;
    double server_flops = 100e9;
};

struct ExperimentConfig {
    Scheme scheme = Scheme::hm;
    int layers = 1;
    double eta = kDefaultLearningRate;
    double eps = kDefaultPrecision;
    double lambda = kDefaultSoftmaxScale;
    double beta0 = 0.98;
    std::size_t per_device = 1200;
    PartitionMode partition = PartitionMode::iid;
    ChannelConfig channel;
    bool noiseless = false;
    bool server_eval = false;
    std::uint64_t seed = 1;
    DatasetSpec data;
    ComputeModel compute;

    std::size_t devices() const noexcept { return static_cast<std::size_t>(channel.devices); }

    void validate() const {
        channel.validate();
        if (layers < 1) throw ConfigError("layer count must be at least 1");
        if (!(eta >= 0.0)) throw ConfigError("learning rate must be non-negative");
        if (!(eps > 0.0)) throw ConfigError("eps must be positive");
        if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
        if (!(beta0 > 0.0 && beta0 <= 1.0)) throw ConfigError("beta0 must lie in (0, 1]");
        if (per_device < 1) throw ConfigError("samples per device must be positive");
        if (data.kind != "mnist" && data.kind != "synthetic") {
            throw ConfigError("unknown dataset kind '" + data.kind + "'");
        }
        if (!(compute.device_flops > 0.0 && compute.server_flops > 0.0)) {
            throw ConfigError("FLOP rates must be positive");
        }
    }
};

struct DeviceRound {
    bool outage = false;
    std::size_t params = 0; // real values uploaded
    std::size_t bytes = 0;  // on-air bytes incl. range and header overhead
    double comm_s = 0.0;
    double comp_s = 0.0;
};

struct RoundResult {
    int round = 0; // 1-based
    bool skipped = false;
    std::vector<DeviceRound> devices;
    double server_comp_s = 0.0;
    double latency_s = 0.0; // max over devices of comm + comp
    std::optional<double> accuracy;
    std::optional<double> server_accuracy;
    std::optional<double> delta;            // cm: mean s/d over uploaded matrices
    std::optional<double> broadcast_delta;  // cm: mean s/d over broadcast matrices
    std::vector<double> matrix_deltas;      // cm: s/d for each uploaded matrix
    LayerParams global;                     // not serialized

    std::size_t participants() const {
        return static_cast<std::size_t>(std::count_if(devices.begin(), devices.end(),
                                                      [](const auto& d) { return !d.outage; }));
    }
    std::size_t max_params() const {
        std::size_t m = 0;
        for (const auto& d : devices) m = std::max(m, d.params);
        return m;
    }
    std::size_t total_bytes() const {
        std::size_t s = 0;
        for (const auto& d : devices) s += d.bytes;
        return s;
    }
    double max_comm_s() const {
        double m = 0.0;
        for (const auto& d : devices) m = std::max(m, d.comm_s);
        return m;
    }
    double max_comp_s() const {
        double m = 0.0;
        for (const auto& d : devices) m = std::max(m, d.comp_s);
        return m;
    }
};

struct ExperimentReport {
    ExperimentConfig config;
    std::vector<RoundResult> rounds;
    double t_total_s = 0.0;
    std::optional<double> final_accuracy;
    double transmission_rate_bps = 0.0;

    /// Σ over rounds of max_k(comm + comp).
    double recompute_total() const {
        double t = 0.0;
        for (const auto& r : rounds) t += r.latency_s;
        return t;
    }
};

/// Fraction of test samples whose predicted class matches the label.
inline double evaluate(std::span<const LayerParams> network, const LabeledDataset& test, double lambda,
                       double eta) {
    if (test.size() == 0) throw DomainError("empty test set");
    if (network.empty()) throw DomainError("network has no layers");
    constexpr Index chunk = 2000;
    std::size_t correct = 0;
    const auto n = static_cast<Index>(test.size());
    for (Index start = 0; start < n; start += chunk) {
        const Index len = std::min(chunk, n - start);
        Matrix z = project_to_sphere(Matrix(test.samples.middleCols(start, len))).matrix();
        Matrix membership;
        for (std::size_t l = 0; l < network.size(); ++l) {
            const bool last = l + 1 == network.size();
            Matrix next;
            membership = infer_layer(z, network[l], lambda, eta, last ? nullptr : &next);
            if (!last) z = std::move(next);
        }
        for (Index i = 0; i < len; ++i) {
            if (argmax_lowest(membership.col(i)) == test.labels[static_cast<std::size_t>(start + i)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

namespace detail {

// Operation counts for one device in one round.
inline double device_ops(Scheme scheme, double d, double classes, double m_k, double delta_bcast) {
    const double d2 = d * d;
    const double d3 = d2 * d;
    switch (scheme) {
    case Scheme::hm:
    case Scheme::fedavg:
        return 2.0 * m_k * d2 + (classes + 1) * d3 + (classes + 1) * m_k * d2;
    case Scheme::cm:
        return 2.0 * m_k * d2 + (classes + 1) * d3 + 2.0 * delta_bcast * d2 * (classes + 1) +
               (classes + 1) * d3 + (classes + 1) * m_k * d2;
    case Scheme::central: return 0.0;
    }
    return 0.0;
}

inline double server_ops(Scheme scheme, double d, double classes, double devices, double m,
                         double delta_up) {
    const double d2 = d * d;
    const double d3 = d2 * d;
    switch (scheme) {
    case Scheme::hm: return (classes + 1) * (devices + 1) * d3;
    case Scheme::fedavg: return (classes + 1) * devices * d2;
    case Scheme::cm: return 2.0 * delta_up * devices * d2 * (classes + 1) + (classes + 1) * d3;
    case Scheme::central: return 2.0 * m * d2 + (classes + 1) * d3 + (classes + 1) * m * d2;
    }
    return 0.0;
}

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

// One uplink message of real values: quantized unless the link is ideal.
struct Uplink {
    std::vector<double> values;
    std::size_t bits = 0;
    std::size_t bytes = 0;
};

inline Uplink send(std::span<const double> values, const ChannelConfig& cfg, bool noiseless) {
    Uplink u;
    if (values.empty()) return u;
    const auto msg = quantize(values, cfg.quant_bits);
    u.bits = msg.payload_bits();
    u.bytes = msg.payload_bytes();
    if (noiseless) {
        u.values.assign(values.begin(), values.end());
    } else {
        u.values = dequantize(msg);
    }
    return u;
}

} // namespace detail

/// Training and test data for one experiment.
struct DataBundle {
    LabeledDataset train;
    LabeledDataset test;
};

inline DataBundle load_data(const DatasetSpec& spec, std::uint64_t seed) {
    DataBundle b;
    if (spec.kind == "synthetic") {
        auto rng = substream(seed, stream::kSynthetic);
        const auto all = synth_subspace_dataset(spec.synth_dim, spec.synth_classes,
                                                spec.synth_train + spec.synth_test, spec.synth_rank,
                                                spec.synth_noise, rng);
        std::vector<std::size_t> tr(spec.synth_train);
        std::vector<std::size_t> te(spec.synth_test);
        std::iota(tr.begin(), tr.end(), std::size_t{0});
        std::iota(te.begin(), te.end(), spec.synth_train);
        b.train = take(all, tr);
        b.test = take(all, te);
    } else {
        if (spec.idx_dir.empty()) throw ConfigError("dataset directory not set");
        b.train = load_idx_dir(spec.idx_dir, "train");
        b.test = load_idx_dir(spec.idx_dir, "t10k");
        // Both splits share the label space of the training set.
        b.test.num_classes = std::max(b.test.num_classes, b.train.num_classes);
        b.train.num_classes = b.test.num_classes;
    }
    if (!spec.classes.empty()) {
        b.train = select_classes(b.train, spec.classes);
        b.test = select_classes(b.test, spec.classes);
    }
    if (spec.test_limit > 0) b.test = head(b.test, spec.test_limit);
    return b;
}

class Simulation {
public:
    struct Device {
        Features z;
        MembershipSet pi;
    };

    /// Partitions `train` according to the config and initializes device
    /// features by sphere projection.
    Simulation(ExperimentConfig cfg, const LabeledDataset& train, LabeledDataset test)
        : cfg_(std::move(cfg)), test_(std::move(test)) {
        cfg_.validate();
        auto rng = substream(cfg_.seed, stream::kPartition);
        const auto part = make_partition(cfg_.partition, train, cfg_.devices(), cfg_.per_device, rng);
        init_devices(train, part);
    }

    /// Uses a caller-provided partition (device count must match the config).
    Simulation(ExperimentConfig cfg, const LabeledDataset& train, const Partition& part,
               LabeledDataset test)
        : cfg_(std::move(cfg)), test_(std::move(test)) {
        cfg_.validate();
        if (part.num_devices() != cfg_.devices()) {
            throw ConfigError("partition has " + std::to_string(part.num_devices()) +
                              " devices, config expects " + std::to_string(cfg_.devices()));
        }
        init_devices(train, part);
    }

    const ExperimentConfig& config() const noexcept { return cfg_; }
    const std::vector<Device>& devices() const noexcept { return devices_; }
    const std::vector<LayerParams>& network() const noexcept { return network_; }
    const std::vector<RoundResult>& rounds() const noexcept { return rounds_; }
    int next_round() const noexcept { return round_ + 1; }

    /// Draws one link per device from its own sub-stream and runs the round.
    const RoundResult& run_round() {
        std::vector<LinkState> links;
        links.reserve(devices_.size());
        for (std::size_t k = 0; k < devices_.size(); ++k) {
            auto rng = substream(cfg_.seed, stream::kChannel, static_cast<std::uint64_t>(round_ + 1), k);
            auto link = draw_link(rng, cfg_.channel);
            if (cfg_.noiseless) {
                link.outage = false;
                link.power = rho0(cfg_.channel) / std::max(link.gain(), cfg_.channel.tau);
            }
            links.push_back(link);
        }
        return run_round(links);
    }

    /// Runs a round with the given link states (one per device).
    const RoundResult& run_round(std::span<const LinkState> links) {
        if (links.size() != devices_.size()) throw ShapeMismatch("need one link state per device");
        ++round_;
        RoundResult r;
        r.round = round_;
        r.devices.resize(devices_.size());
        for (std::size_t k = 0; k < devices_.size(); ++k) {
            r.devices[k].outage = cfg_.scheme != Scheme::central && links[k].outage;
        }

        std::optional<LayerParams> global;
        switch (cfg_.scheme) {
        case Scheme::hm:
        case Scheme::fedavg: global = round_layers(r); break;
        case Scheme::cm: global = round_covariances(r); break;
        case Scheme::central: global = round_central(r); break;
        }

        if (!global) {
            r.skipped = true;
            std::cerr << "warning: round " << round_ << " skipped, every device was in outage\n";
            if (!rounds_.empty()) r.accuracy = rounds_.back().accuracy;
        } else {
            transform_devices(*global, r);
            network_.push_back(*global);
            r.accuracy = evaluate_incremental(*global);
            r.global = std::move(*global);
        }
        for (const auto& d : r.devices) r.latency_s = std::max(r.latency_s, d.comm_s + d.comp_s);
        rounds_.push_back(std::move(r));
        return rounds_.back();
    }

    ExperimentReport run() {
        while (round_ < cfg_.layers) run_round();
        return report();
    }

    ExperimentReport report() const {
        ExperimentReport rep;
        rep.config = cfg_;
        rep.rounds = rounds_;
        rep.t_total_s = rep.recompute_total();
        for (auto it = rounds_.rbegin(); it != rounds_.rend(); ++it) {
            if (it->accuracy) {
                rep.final_accuracy = it->accuracy;
                break;
            }
        }
        rep.transmission_rate_bps = transmission_rate(cfg_.channel);
        return rep;
    }

private:
    void init_devices(const LabeledDataset& train, const Partition& part) {
        classes_ = train.num_classes;
        dim_ = train.dim();
        for (const auto& idx : part.devices) {
            const auto shard = take(train, idx);
            devices_.push_back({project_to_sphere(shard.samples), MembershipSet(shard.labels, classes_)});
        }
        if (test_.size() > 0) {
            test_z_ = project_to_sphere(test_.samples).matrix();
            server_test_z_ = test_z_;
        }
    }

    double device_comp(double analytic_ops, double measured_s) const {
        return cfg_.compute.timing == ComputeTiming::analytic ? analytic_ops / cfg_.compute.device_flops
                                                               : measured_s;
    }

    double server_comp(double analytic_ops, double measured_s) const {
        return cfg_.compute.timing == ComputeTiming::analytic ? analytic_ops / cfg_.compute.server_flops
                                                               : measured_s;
    }

    // Local computation time so far for each device this round (wall-clock mode).
    std::vector<double> measured_;

    std::optional<LayerParams> round_layers(RoundResult& r) {
        const std::size_t K = devices_.size();
        measured_.assign(K, 0.0);
        std::vector<LayerParams> received;
        for (std::size_t k = 0; k < K; ++k) {
            detail::Stopwatch sw;
            const auto local = layer_params(devices_[k].z.matrix(), devices_[k].pi, cfg_.eps);
            measured_[k] = sw.seconds();
            if (r.devices[k].outage) continue;
            LayerParams got;
            got.coeffs = local.coeffs;
            got.E = upload_matrix(local.E, r.devices[k]);
            for (const auto& c : local.C) got.C.push_back(upload_matrix(c, r.devices[k]));
            received.push_back(std::move(got));
        }
        if (received.empty()) return std::nullopt;
        detail::Stopwatch sw;
        const auto w = AggregationWeights::from_layers(received);
        LayerParams g = cfg_.scheme == Scheme::hm ? hm_aggregate(received, w) : fedavg_aggregate(received, w);
        r.server_comp_s = server_comp(detail::server_ops(cfg_.scheme, static_cast<double>(dim_), classes_,
                                                         static_cast<double>(received.size()), 0.0, 0.0),
                                      sw.seconds());
        return g;
    }

    Matrix upload_matrix(const Matrix& m, DeviceRound& dr) {
        const std::span<const double> values(m.data(), static_cast<std::size_t>(m.size()));
        auto up = detail::send(values, cfg_.channel, cfg_.noiseless);
        dr.params += values.size();
        dr.bytes += up.bytes;
        dr.comm_s += upload_latency_bits(static_cast<double>(up.bits), cfg_.channel);
        return Eigen::Map<const Matrix>(up.values.data(), m.rows(), m.cols());
    }

    LowRankFactors upload_factors(const LowRankFactors& f, DeviceRound& dr) {
        const auto s = static_cast<std::size_t>(f.rank());
        const auto d = static_cast<std::size_t>(f.dim);
        const auto params = factor_parameters(f);
        const std::span<const double> all(params);
        std::vector<double> got;
        got.reserve(params.size());
        std::size_t bits = 8 * kFactorHeaderBytes;
        std::size_t bytes = kFactorHeaderBytes;
        // σ, u-vectors and v-vectors go out as three messages with their own ranges.
        for (auto part : {all.subspan(0, s), all.subspan(s, s * d), all.subspan(s + s * d, s * d)}) {
            auto up = detail::send(part, cfg_.channel, cfg_.noiseless);
            got.insert(got.end(), up.values.begin(), up.values.end());
            bits += up.bits;
            bytes += up.bytes;
        }
        dr.params += params.size();
        dr.bytes += bytes;
        dr.comm_s += upload_latency_bits(static_cast<double>(bits), cfg_.channel);
        return factors_from_parameters(f.dim, f.rank(), got);
    }

    std::optional<LayerParams> round_covariances(RoundResult& r) {
        const std::size_t K = devices_.size();
        measured_.assign(K, 0.0);
        std::vector<CovariancePair> received;
        std::vector<LowRankFactors> uploaded;
        for (std::size_t k = 0; k < K; ++k) {
            detail::Stopwatch sw;
            const auto cov = local_covariances(devices_[k].z.matrix(), devices_[k].pi);
            std::vector<LowRankFactors> local;
            local.push_back(truncated_svd(cov.R, cfg_.beta0));
            for (const auto& rj : cov.Rj) local.push_back(truncated_svd(rj, cfg_.beta0));
            measured_[k] = sw.seconds();
            if (r.devices[k].outage) continue;
            CovariancePair got;
            got.samples = cov.samples;
            got.class_counts = cov.class_counts;
            for (std::size_t i = 0; i < local.size(); ++i) {
                const auto f = upload_factors(local[i], r.devices[k]);
                r.matrix_deltas.push_back(static_cast<double>(local[i].rank()) / static_cast<double>(dim_));
                uploaded.push_back(local[i]);
                (i == 0 ? got.R : got.Rj.emplace_back()) = reconstruct(f);
            }
            received.push_back(std::move(got));
        }
        if (received.empty()) return std::nullopt;
        r.delta = compression_rate(uploaded);

        detail::Stopwatch server_sw;
        const auto rbar = sum_covariances(received);
        const auto coeffs = Mcr2Coefficients::make(dim_, rbar.class_counts, cfg_.eps);
        std::vector<LowRankFactors> bcast;
        bcast.push_back(truncated_svd(rbar.R, cfg_.beta0));
        for (const auto& rj : rbar.Rj) bcast.push_back(truncated_svd(rj, cfg_.beta0));
        r.broadcast_delta = compression_rate(bcast);
        const double server_s = server_sw.seconds();
        r.server_comp_s = server_comp(detail::server_ops(Scheme::cm, static_cast<double>(dim_), classes_,
                                                         static_cast<double>(received.size()), 0.0, *r.delta),
                                      server_s);

        if (cfg_.server_eval) {
            const auto server_layer = params_from_covariances(rbar, coeffs);
            server_network_.push_back(server_layer);
            r.server_accuracy = evaluate_stream(server_layer, server_test_z_);
        }

        // Every device reconstructs the same broadcast, so the resulting layer
        // is computed once and shared.
        detail::Stopwatch dev_sw;
        CovariancePair approx;
        approx.samples = rbar.samples;
        approx.class_counts = rbar.class_counts;
        approx.R = reconstruct(bcast[0]);
        for (std::size_t j = 1; j < bcast.size(); ++j) approx.Rj.push_back(reconstruct(bcast[j]));
        auto layer = params_from_covariances(approx, coeffs);
        const double shared_s = dev_sw.seconds();
        for (auto& m : measured_) m += shared_s;
        return layer;
    }

    std::optional<LayerParams> round_central(RoundResult& r) {
        std::size_t total = 0;
        for (const auto& d : devices_) total += d.pi.size();
        Matrix pooled(dim_, static_cast<Index>(total));
        std::vector<int> labels;
        labels.reserve(total);
        Index col = 0;
        for (const auto& d : devices_) {
            pooled.middleCols(col, d.z.size()) = d.z.matrix();
            col += d.z.size();
            labels.insert(labels.end(), d.pi.labels().begin(), d.pi.labels().end());
        }
        measured_.assign(devices_.size(), 0.0);
        detail::Stopwatch sw;
        auto layer = layer_params(pooled, MembershipSet(std::move(labels), classes_), cfg_.eps);
        r.server_comp_s = server_comp(detail::server_ops(Scheme::central, static_cast<double>(dim_), classes_,
                                                         static_cast<double>(devices_.size()),
                                                         static_cast<double>(total), 0.0),
                                      sw.seconds());
        return layer;
    }

    void transform_devices(const LayerParams& global, RoundResult& r) {
        const double bcast_delta = r.broadcast_delta.value_or(0.0);
        for (std::size_t k = 0; k < devices_.size(); ++k) {
            detail::Stopwatch sw;
            devices_[k].z = transform_train(devices_[k].z, global, devices_[k].pi, cfg_.eta);
            const double measured = measured_.empty() ? 0.0 : measured_[k] + sw.seconds();
            const double ops = detail::device_ops(cfg_.scheme, static_cast<double>(dim_), classes_,
                                                  static_cast<double>(devices_[k].pi.size()), bcast_delta);
            r.devices[k].comp_s = cfg_.scheme == Scheme::central ? 0.0 : device_comp(ops, measured);
        }
    }

    double evaluate_stream(const LayerParams& layer, Matrix& z) {
        if (test_.size() == 0) return 0.0;
        const bool more = round_ < cfg_.layers;
        constexpr Index chunk = 2000;
        std::size_t correct = 0;
        for (Index start = 0; start < z.cols(); start += chunk) {
            const Index len = std::min(chunk, z.cols() - start);
            Matrix next;
            const Matrix block = z.middleCols(start, len);
            const Matrix membership = infer_layer(block, layer, cfg_.lambda, cfg_.eta, more ? &next : nullptr);
            for (Index i = 0; i < len; ++i) {
                if (argmax_lowest(membership.col(i)) == test_.labels[static_cast<std::size_t>(start + i)]) ++correct;
            }
            if (more) z.middleCols(start, len) = next;
        }
        return static_cast<double>(correct) / static_cast<double>(test_.size());
    }

    std::optional<double> evaluate_incremental(const LayerParams& layer) {
        if (test_.size() == 0) return std::nullopt;
        return evaluate_stream(layer, test_z_);
    }

    ExperimentConfig cfg_;
    LabeledDataset test_;
    Matrix test_z_;
    Matrix server_test_z_;
    std::vector<Device> devices_;
    std::vector<LayerParams> network_;
    std::vector<LayerParams> server_network_;
    std::vector<RoundResult> rounds_;
    int classes_ = 0;
    Index dim_ = 0;
    int round_ = 0;
};

inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const DataBundle& data) {
    Simulation sim(cfg, data.train, data.test);
    return sim.run();
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    return run_experiment(cfg, load_data(cfg.data, cfg.seed));
}

} // namespace lolafl
