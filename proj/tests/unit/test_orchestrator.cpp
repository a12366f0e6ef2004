#include <gtest/gtest.h>

#include <numeric>
#include <vector>

#include "generators.hpp"
#include "lolafl/metrics.hpp"
#include "lolafl/orchestrator.hpp"

using namespace lolafl;

namespace {

Rng rng_for(std::uint64_t seed) { return substream(seed, 500); }

ExperimentConfig synthetic_config(Scheme scheme, int devices, std::size_t per_device) {
    ExperimentConfig c;
    c.scheme = scheme;
    c.data.kind = "synthetic";
    c.channel.devices = devices;
    c.channel.subchannels = devices;
    c.per_device = per_device;
    return c;
}

DataBundle synthetic_bundle(std::uint64_t seed, Index d = 12, int classes = 3, std::size_t train = 240) {
    DatasetSpec s;
    s.kind = "synthetic";
    s.synth_dim = d;
    s.synth_classes = classes;
    s.synth_rank = 2;
    s.synth_noise = 0.3;
    s.synth_train = train;
    s.synth_test = 90;
    return load_data(s, seed);
}

// Every device heard, nothing quantized.
std::vector<LinkState> ideal_links(std::size_t n) {
    std::vector<LinkState> links(n);
    for (auto& l : links) {
        l.h = {1.0, 0.0};
        l.outage = false;
    }
    return links;
}

// Layer computed directly from the current features of the listed devices.
LayerParams pooled_layer(const Simulation& sim, const std::vector<std::size_t>& which, double eps) {
    Index cols = 0;
    for (auto k : which) cols += sim.devices()[k].z.size();
    Matrix z(sim.devices().front().z.dim(), cols);
    std::vector<int> y;
    Index at = 0;
    for (auto k : which) {
        const auto& dev = sim.devices()[k];
        z.middleCols(at, dev.z.size()) = dev.z.matrix();
        at += dev.z.size();
        y.insert(y.end(), dev.pi.labels().begin(), dev.pi.labels().end());
    }
    return layer_params(z, MembershipSet(y, sim.devices().front().pi.num_classes()), eps);
}

} // namespace

TEST(Simulation, SingleDeviceHmEqualsCentral) {
    const auto data = synthetic_bundle(1);
    auto hm_cfg = synthetic_config(Scheme::hm, 1, 200);
    hm_cfg.noiseless = true;
    auto central_cfg = hm_cfg;
    central_cfg.scheme = Scheme::central;
    Simulation hm(hm_cfg, data.train, data.test);
    Simulation central(central_cfg, data.train, data.test);
    EXPECT_LE(testgen::layer_distance(hm.run_round().global, central.run_round().global), 1e-9);
}

TEST(Simulation, NoiselessHmEqualsCentralAcrossRounds) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto data = synthetic_bundle(seed);
        auto cfg = synthetic_config(Scheme::hm, 4, 50);
        cfg.noiseless = true;
        cfg.layers = 3;
        cfg.seed = seed;
        cfg.partition = seed % 2 == 0 ? PartitionMode::noniid_a : PartitionMode::iid;
        auto central_cfg = cfg;
        central_cfg.scheme = Scheme::central;
        Simulation hm(cfg, data.train, data.test);
        Simulation central(central_cfg, data.train, data.test);
        for (int l = 0; l < cfg.layers; ++l) {
            EXPECT_LE(testgen::layer_distance(hm.run_round().global, central.run_round().global), 1e-8);
        }
    }
}

TEST(Simulation, FullRetentionCmEqualsHm) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto data = synthetic_bundle(seed);
        auto cfg = synthetic_config(Scheme::hm, 3, 60);
        cfg.noiseless = true;
        cfg.seed = seed;
        auto cm_cfg = cfg;
        cm_cfg.scheme = Scheme::cm;
        cm_cfg.beta0 = 1.0;
        Simulation hm(cfg, data.train, data.test);
        Simulation cm(cm_cfg, data.train, data.test);
        const auto& r = cm.run_round();
        EXPECT_LE(testgen::layer_distance(r.global, hm.run_round().global), 1e-6);
        EXPECT_EQ(*r.delta, 1.0);
    }
}

TEST(Simulation, FedavgEqualsHmForIdenticalLocals) {
    const auto data = synthetic_bundle(2);
    Partition same;
    std::vector<std::size_t> idx(60);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    same.devices.assign(3, idx);
    auto cfg = synthetic_config(Scheme::fedavg, 3, 60);
    cfg.noiseless = true;
    auto hm_cfg = cfg;
    hm_cfg.scheme = Scheme::hm;
    Simulation fed(cfg, data.train, same, data.test);
    Simulation hm(hm_cfg, data.train, same, data.test);
    EXPECT_LE(testgen::layer_distance(fed.run_round().global, hm.run_round().global), 1e-9);
}

TEST(Simulation, PartialParticipationEqualsParticipantPool) {
    const auto data = synthetic_bundle(3);
    auto cfg = synthetic_config(Scheme::hm, 5, 40);
    cfg.noiseless = true;
    Simulation sim(cfg, data.train, data.test);
    auto links = ideal_links(5);
    links[1].outage = true;
    links[3].outage = true;
    const auto expected = pooled_layer(sim, {0, 2, 4}, cfg.eps);
    const Matrix before = sim.devices()[1].z.matrix();
    const auto& r = sim.run_round(links);
    EXPECT_LE(testgen::layer_distance(r.global, expected), 1e-8);
    EXPECT_EQ(r.participants(), 3u);
    EXPECT_EQ(r.devices[1].params, 0u);
    EXPECT_EQ(r.devices[1].comm_s, 0.0);
    // Outage devices still apply the broadcast layer.
    EXPECT_GT((sim.devices()[1].z.matrix() - before).norm(), 0.0);
}

TEST(Simulation, AllDevicesInOutageSkipsRound) {
    const auto data = synthetic_bundle(4);
    auto cfg = synthetic_config(Scheme::hm, 2, 50);
    cfg.layers = 2;
    Simulation sim(cfg, data.train, data.test);
    auto links = ideal_links(2);
    for (auto& l : links) l.outage = true;
    const auto& r = sim.run_round(links);
    EXPECT_TRUE(r.skipped);
    EXPECT_EQ(r.total_bytes(), 0u);
    EXPECT_FALSE(r.accuracy.has_value());
    EXPECT_TRUE(sim.network().empty());
    EXPECT_FALSE(sim.run_round(ideal_links(2)).skipped);
    EXPECT_EQ(sim.network().size(), 1u);
}

TEST(Simulation, HmPayloadIsExactlyJPlusOneSquares) {
    const auto data = synthetic_bundle(5);
    auto cfg = synthetic_config(Scheme::hm, 3, 60);
    Simulation sim(cfg, data.train, data.test);
    const auto& r = sim.run_round(ideal_links(3));
    const std::size_t d = 12;
    const std::size_t J = 3;
    for (const auto& dev : r.devices) {
        EXPECT_EQ(dev.params, (J + 1) * d * d);
        EXPECT_EQ(dev.bytes, (J + 1) * (kRangeOverheadBytes + d * d * 4));
        EXPECT_NEAR(dev.comm_s, static_cast<double>((J + 1) * (128 + d * d * 32)) / transmission_rate(cfg.channel), 1e-15);
    }
    AnalyticInputs in;
    in.classes = 3;
    in.dim = 12;
    EXPECT_EQ(static_cast<std::size_t>(analytic_param_counts(in).hm), r.max_params());
}

TEST(Simulation, CmPayloadMatchesSerializer) {
    const auto data = synthetic_bundle(6);
    auto cfg = synthetic_config(Scheme::cm, 3, 60);
    cfg.beta0 = 0.9;
    Simulation sim(cfg, data.train, data.test);
    std::vector<std::vector<LowRankFactors>> expected;
    for (const auto& dev : sim.devices()) {
        const auto cov = local_covariances(dev.z.matrix(), dev.pi);
        std::vector<LowRankFactors> fs{truncated_svd(cov.R, 0.9)};
        for (const auto& rj : cov.Rj) fs.push_back(truncated_svd(rj, 0.9));
        expected.push_back(std::move(fs));
    }
    const auto& r = sim.run_round(ideal_links(3));
    std::vector<LowRankFactors> all;
    for (std::size_t k = 0; k < 3; ++k) {
        std::size_t params = 0;
        std::size_t bytes = 0;
        for (const auto& f : expected[k]) {
            const auto wire = serialize(f);
            ASSERT_EQ((wire.size() - kFactorHeaderBytes) / 8, f.parameter_count());
            params += f.parameter_count();
            const auto s = static_cast<std::size_t>(f.rank());
            bytes += kFactorHeaderBytes;
            if (s > 0) bytes += 3 * kRangeOverheadBytes + (s * 32 + 7) / 8 + 2 * ((s * 12 * 32 + 7) / 8);
            all.push_back(f);
        }
        EXPECT_EQ(r.devices[k].params, params);
        EXPECT_EQ(r.devices[k].bytes, bytes);
    }
    EXPECT_NEAR(*r.delta, compression_rate(all), 1e-15);
    EXPECT_EQ(r.matrix_deltas.size(), all.size());
}

TEST(Simulation, CmMatchesAnalyticCountWithinOverhead) {
    const auto data = synthetic_bundle(7, 30, 3, 300);
    auto cfg = synthetic_config(Scheme::cm, 3, 100);
    cfg.beta0 = 0.95;
    Simulation sim(cfg, data.train, data.test);
    const auto& r = sim.run_round(ideal_links(3));
    for (const auto& dev : r.devices) {
        // Per device: Σ(2sd + s) equals (J+1)(2δ_k d² + δ_k d)/d·d with δ_k the device's own mean.
        const double delta_k = static_cast<double>(dev.params) / (4.0 * (2.0 * 30 + 1) * 30);
        AnalyticInputs in;
        in.classes = 3;
        in.dim = 30;
        in.delta = delta_k;
        EXPECT_NEAR(analytic_param_counts(in).cm / static_cast<double>(dev.params), 1.0, 1e-12);
    }
}

TEST(Simulation, LatencyIsMaxOfCommPlusCompAndTotalsAdd) {
    const auto data = synthetic_bundle(8);
    auto cfg = synthetic_config(Scheme::hm, 4, 50);
    cfg.layers = 3;
    Simulation sim(cfg, data.train, data.test);
    const auto rep = sim.run();
    double total = 0.0;
    for (const auto& r : rep.rounds) {
        double worst = 0.0;
        for (const auto& d : r.devices) worst = std::max(worst, d.comm_s + d.comp_s);
        EXPECT_EQ(r.latency_s, worst);
        total += r.latency_s;
    }
    EXPECT_NEAR(rep.t_total_s, total, 1e-12);
    EXPECT_EQ(rep.rounds.size(), 3u);
}

TEST(Simulation, AnalyticComputeTimeMatchesOperationCounts) {
    const auto data = synthetic_bundle(9);
    auto cfg = synthetic_config(Scheme::hm, 2, 60);
    Simulation sim(cfg, data.train, data.test);
    const auto& r = sim.run_round(ideal_links(2));
    const double d = 12;
    const double ops = 2 * 60 * d * d + 4 * d * d * d + 4 * 60 * d * d;
    EXPECT_NEAR(r.devices[0].comp_s, ops / cfg.compute.device_flops, 1e-18);
}

TEST(Simulation, NoiselessDrawsNeverOutage) {
    const auto data = synthetic_bundle(10);
    auto cfg = synthetic_config(Scheme::hm, 4, 50);
    cfg.noiseless = true;
    cfg.channel.tau = 5.0; // nearly every draw would be in outage
    cfg.layers = 3;
    Simulation sim(cfg, data.train, data.test);
    for (const auto& r : sim.run().rounds) EXPECT_EQ(r.participants(), 4u);
}

TEST(Simulation, QuantizedHmStaysCloseToCentral) {
    const auto data = synthetic_bundle(11);
    auto cfg = synthetic_config(Scheme::hm, 3, 60);
    auto central_cfg = cfg;
    central_cfg.scheme = Scheme::central;
    Simulation hm(cfg, data.train, data.test);
    Simulation central(central_cfg, data.train, data.test);
    EXPECT_LE(testgen::layer_distance(hm.run_round(ideal_links(3)).global, central.run_round().global), 1e-6);
}

TEST(Simulation, PartitionDeviceCountMustMatch) {
    const auto data = synthetic_bundle(12);
    Partition p;
    p.devices = {{0, 1}, {2, 3}};
    EXPECT_THROW(Simulation(synthetic_config(Scheme::hm, 3, 2), data.train, p, data.test), ConfigError);
}

TEST(RunExperiment, SyntheticSubspacesTrainWell) {
    auto cfg = synthetic_config(Scheme::hm, 3, 100);
    const auto data = load_data(cfg.data, cfg.seed); // d=20, J=3, r=2, σ=0.05, m=300
    Simulation sim(cfg, data.train, data.test);
    const auto rep = sim.run();
    EXPECT_GE(evaluate(sim.network(), data.train, cfg.lambda, cfg.eta), 0.95);
    EXPECT_GE(*rep.final_accuracy, 0.95);
}

TEST(RunExperiment, SameSeedSameReport) {
    auto cfg = synthetic_config(Scheme::cm, 3, 80);
    cfg.layers = 2;
    cfg.seed = 42;
    const auto a = report_to_json(run_experiment(cfg)).dump();
    const auto b = report_to_json(run_experiment(cfg)).dump();
    EXPECT_EQ(a, b);
    cfg.seed = 43;
    EXPECT_NE(a, report_to_json(run_experiment(cfg)).dump());
}

TEST(RunExperiment, RejectsInvalidConfig) {
    auto cfg = synthetic_config(Scheme::hm, 3, 80);
    cfg.layers = 0;
    EXPECT_THROW(run_experiment(cfg), ConfigError);
}

TEST(Evaluate, OneClassDataIsPerfect) {
    auto rng = rng_for(1);
    LabeledDataset ds;
    ds.num_classes = 1;
    ds.samples = testgen::unit_columns(rng, 5, 20);
    ds.labels.assign(20, 0);
    const std::vector<LayerParams> net{layer_params(ds.samples, ds.membership(), 1.0)};
    EXPECT_EQ(evaluate(net, ds, 500.0, 0.1), 1.0);
}

TEST(Evaluate, UninformativeNetworkNearChance) {
    auto rng = rng_for(2);
    LabeledDataset ds;
    ds.num_classes = 4;
    ds.samples = testgen::unit_columns(rng, 6, 2000);
    ds.labels = testgen::labels(rng, 2000, 4);
    LayerParams p;
    p.E = Matrix::Identity(6, 6);
    p.C.assign(4, Matrix::Identity(6, 6));
    p.coeffs = Mcr2Coefficients::make(6, std::vector<std::size_t>{1, 1, 1, 1}, 1.0);
    const std::vector<LayerParams> net{p};
    EXPECT_NEAR(evaluate(net, ds, 500.0, 0.1), 0.25, 0.05);
}

TEST(Evaluate, MatchesPerSampleClassify) {
    const auto data = synthetic_bundle(13);
    auto cfg = synthetic_config(Scheme::hm, 3, 60);
    cfg.layers = 2;
    Simulation sim(cfg, data.train, data.test);
    const auto rep = sim.run();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.test.size(); ++i) {
        if (classify(data.test.samples.col(static_cast<Index>(i)), sim.network(), cfg.lambda, cfg.eta) ==
            data.test.labels[i])
            ++correct;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(data.test.size());
    EXPECT_NEAR(*rep.final_accuracy, acc, 1e-12);
    EXPECT_NEAR(evaluate(sim.network(), data.test, cfg.lambda, cfg.eta), acc, 1e-12);
}

TEST(Evaluate, EmptyInputsRejected) {
    LabeledDataset empty;
    empty.num_classes = 1;
    empty.samples.resize(3, 0);
    EXPECT_THROW(evaluate(std::vector<LayerParams>{}, empty, 500.0, 0.1), DomainError);
}
