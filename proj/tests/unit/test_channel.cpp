#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "generators.hpp"
#include "lolafl/channel.hpp"

using namespace lolafl;

namespace {

Rng rng_for(std::uint64_t seed) { return substream(seed, 300); }

// E₁(x) = −Ei(−x).
double e1_oracle(double x) { return -std::expint(-x); }

} // namespace

TEST(ChannelConfig, Validation) {
    EXPECT_NO_THROW(ChannelConfig{}.validate());
    ChannelConfig c;
    c.subchannels = 15;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.quant_bits = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.tau = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.subchannels = 20;
    EXPECT_NO_THROW(c.validate());
}

TEST(DrawChannel, GainMeanAndOutageFraction) {
    auto rng = rng_for(1);
    constexpr int n = 100000;
    double gain = 0.0;
    int below = 0;
    for (int i = 0; i < n; ++i) {
        const double g = std::norm(draw_channel(rng));
        gain += g;
        if (g < 0.105) ++below;
    }
    EXPECT_NEAR(gain / n, 1.0, 0.02);
    EXPECT_NEAR(static_cast<double>(below) / n, 0.0997, 0.01);
}

TEST(DrawChannel, DeterministicForSeed) {
    auto a = rng_for(2);
    auto b = rng_for(2);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(draw_channel(a), draw_channel(b));
}

TEST(ExpIntegral, ReferenceValues) {
    EXPECT_NEAR(exp_integral_e1(1.0), 0.21938393439552029, 1e-15);
    EXPECT_NEAR(exp_integral_e1(0.105), 1.7788860812358323, 1e-13);
    EXPECT_LT(exp_integral_e1(2.0), exp_integral_e1(1.0));
}

TEST(ExpIntegral, MatchesLibraryAcrossRange) {
    for (double x : {1e-6, 1e-3, 0.05, 0.105, 0.5, 0.999, 1.0, 1.001, 2.0, 5.0, 10.0, 30.0}) {
        const double ref = e1_oracle(x);
        EXPECT_NEAR(exp_integral_e1(x) / ref, 1.0, 1e-10) << "x=" << x;
    }
}

TEST(ExpIntegral, FarTail) {
    // libstdc++ expint loses accuracy this far out; tabulated value instead.
    EXPECT_NEAR(exp_integral_e1(100.0) / 3.683597761682032e-46, 1.0, 1e-12);
}

TEST(ExpIntegral, RejectsNonPositive) {
    EXPECT_THROW(exp_integral_e1(0.0), DomainError);
    EXPECT_THROW(exp_integral_e1(-1.0), DomainError);
}

TEST(Rho0, UnitCancellation) {
    // τ chosen so that E₁(τ) = 1, found by bisection on the library oracle.
    double lo = 0.1;
    double hi = 1.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (e1_oracle(mid) > 1.0 ? lo : hi) = mid;
    }
    ChannelConfig c;
    c.power_budget = 1.0;
    c.tau = 0.5 * (lo + hi);
    EXPECT_NEAR(rho0(c), 1.0, 1e-12);
}

TEST(Rho0, DefaultConfiguration) {
    ChannelConfig c;
    EXPECT_NEAR(rho0(c), 0.1 / e1_oracle(0.105), 1e-15);
    EXPECT_NEAR(rho0(c), 0.0562, 1e-4);
}

TEST(PowerControl, MonteCarloMatchesBudgetAndOutage) {
    auto rng = rng_for(3);
    ChannelConfig c;
    const auto s = simulate_power_control(c, 100000, rng);
    EXPECT_NEAR(s.outage_rate, outage_probability(c), 0.01);
    EXPECT_NEAR(s.mean_power / (c.devices * c.power_budget / c.subchannels), 1.0, 0.02);
    EXPECT_LE(s.snr_spread, 1e-12 * receive_snr(c));
}

TEST(PowerControl, ReceiveSnrIndependentOfGain) {
    ChannelConfig c;
    for (double g : {0.1051, 0.2, 1.0, 3.0, 40.0}) {
        const auto link = make_link({std::sqrt(g), 0.0}, c);
        ASSERT_FALSE(link.outage);
        EXPECT_NEAR(link.gain() * link.power / c.noise_power, receive_snr(c), 1e-12 * receive_snr(c));
    }
    const auto out = make_link({0.1, 0.1}, c);
    EXPECT_TRUE(out.outage);
    EXPECT_EQ(out.power, 0.0);
}

TEST(TransmissionRate, ClosedForm) {
    ChannelConfig c;
    const double expected =
        c.bandwidth / c.devices * std::log2(1.0 + c.devices * c.power_budget / (c.subchannels * c.noise_power * e1_oracle(c.tau)));
    EXPECT_NEAR(transmission_rate(c) / expected, 1.0, 1e-9);
    ChannelConfig wide = c;
    wide.bandwidth *= 2;
    EXPECT_NEAR(transmission_rate(wide), 2.0 * transmission_rate(c), 1e-6);
}

TEST(TransmissionRate, TenBitsPerHertz) {
    // SNR = 1023 makes log₂(1 + SNR) = 10.
    ChannelConfig c;
    c.noise_power = rho0(c) / 1023.0;
    EXPECT_NEAR(transmission_rate(c), 1e7, 1e-3);
}

TEST(UploadLatency, Arithmetic) {
    ChannelConfig c;
    c.noise_power = rho0(c) / 1023.0; // r = 1e7 bit/s
    EXPECT_EQ(upload_latency(0, c), 0.0);
    EXPECT_NEAR(upload_latency(6761216, c), 21.6358912, 1e-6);
    EXPECT_NEAR(upload_latency(200, c), 2.0 * upload_latency(100, c), 1e-15);
    ChannelConfig half = c;
    half.quant_bits = 16;
    EXPECT_NEAR(upload_latency(100, half), 0.5 * upload_latency(100, c), 1e-15);
}

TEST(Quantizer, ConstantVectorExact) {
    const std::vector<double> x(17, -0.375);
    const auto rt = quantize_roundtrip(x, 32);
    EXPECT_EQ(rt.values, x);
}

TEST(Quantizer, OneBitRecoversEndpoints) {
    const std::vector<double> x{0.0, 1.0, 1.0, 0.0};
    EXPECT_EQ(quantize_roundtrip(x, 1).values, x);
}

TEST(Quantizer, ErrorBoundAndPayloadSize) {
    for (std::uint64_t s = 0; s < 40; ++s) {
        auto rng = rng_for(100 + s);
        const int bits = testgen::uniform_int(rng, 1, 40);
        const auto n = static_cast<std::size_t>(testgen::uniform_int(rng, 1, 300));
        std::uniform_real_distribution<double> u(-3.0, 5.0);
        std::vector<double> x(n);
        for (auto& v : x) v = u(rng);
        const auto msg = quantize(x, bits);
        const auto back = dequantize(msg);
        const double levels = std::ldexp(1.0, bits) - 1.0;
        const double bound = (msg.hi - msg.lo) / (2.0 * levels);
        for (std::size_t i = 0; i < n; ++i) EXPECT_LE(std::abs(back[i] - x[i]), bound * (1 + 1e-9) + 1e-15);
        EXPECT_EQ(msg.payload_bytes(), 16 + (n * static_cast<std::size_t>(bits) + 7) / 8);
    }
}

TEST(Quantizer, ThirtyTwoBitsOnUnitRange) {
    std::vector<double> x(1001);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = -1.0 + 2.0 * static_cast<double>(i) / 1000.0 + 1e-7 * std::sin(i);
    x.front() = -1.0;
    x.back() = 1.0;
    const auto back = quantize_roundtrip(x, 32).values;
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(back[i] - x[i]), 2.33e-10);
}

TEST(Quantizer, RejectsNonFinite) {
    const std::vector<double> x{1.0, std::nan("")};
    EXPECT_THROW(quantize(x, 8), DomainError);
}

TEST(Transmit, OutageCarriesNothing) {
    ChannelConfig c;
    const auto link = make_link({0.01, 0.0}, c);
    const std::vector<double> x{1.0, 2.0};
    EXPECT_FALSE(transmit(x, link, c).has_value());
}

TEST(Transmit, ActiveLinkQuantizes) {
    ChannelConfig c;
    const auto link = make_link({1.0, 0.0}, c);
    auto rng = rng_for(5);
    std::vector<double> x(50);
    for (auto& v : x) v = std::normal_distribution<double>()(rng);
    const auto t = transmit(x, link, c);
    ASSERT_TRUE(t.has_value());
    const double range = *std::max_element(x.begin(), x.end()) - *std::min_element(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(t->received[i] - x[i]), 2.33e-10 * range / 2 + 1e-15);
    EXPECT_EQ(t->bits, 128u + 50u * 32u);
    EXPECT_NEAR(t->latency_s, static_cast<double>(t->bits) / transmission_rate(c), 1e-15);
    const auto again = transmit(x, link, c);
    EXPECT_EQ(again->received, t->received);
}
