#pragma once

// OFDMA uplink with Rayleigh fading and truncated channel inversion.
//
// Each of K devices owns M/K subchannels. A device whose gain |h|² falls below
// the cutoff τ stays silent for the round; every other device inverts its
// channel with power ρ₀/|h|², so all active links see the same receive SNR
// ρ₀/ν² and therefore the same rate. Payloads are uniformly quantized to Q
// bits per value; decoding at that rate is treated as error-free.

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lolafl/errors.hpp"
#include "lolafl/rng.hpp"

namespace lolafl {

struct ChannelConfig {
    double bandwidth = 10e6;   // B, Hz
    int subchannels = 10;      // M
    int devices = 10;          // K
    double power_budget = 0.1; // P0, W
    double noise_power = 1e-3; // ν², W
    double tau = 0.105;        // cutoff on |h|²
    int quant_bits = 32;       // Q

    void validate() const {
        if (!(bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
        if (subchannels < 1 || devices < 1) throw ConfigError("subchannel and device counts must be positive");
        if (subchannels % devices != 0) {
            throw ConfigError("subchannel count " + std::to_string(subchannels) +
                              " is not divisible by device count " + std::to_string(devices));
        }
        if (!(power_budget > 0.0)) throw ConfigError("power budget must be positive");
        if (!(noise_power > 0.0)) throw ConfigError("noise power must be positive");
        if (!(tau > 0.0)) throw ConfigError("cutoff threshold tau must be positive");
        if (quant_bits < 1 || quant_bits > 52) throw ConfigError("quantization bits must be in [1, 52]");
    }
};

struct LinkState {
    std::complex<double> h;
    double power = 0.0;
    bool outage = true;

    double gain() const { return std::norm(h); }
};

/// h ~ CN(0, 1): real and imaginary parts i.i.d. N(0, 1/2).
inline std::complex<double> draw_channel(Rng& rng) {
    std::normal_distribution<double> n(0.0, std::sqrt(0.5));
    const double re = n(rng);
    const double im = n(rng);
    return {re, im};
}

/// E₁(x) = ∫ₓ^∞ e^{-s}/s ds for x > 0. Power series below 1, Lentz continued
/// fraction above.
inline double exp_integral_e1(double x) {
    if (!(x > 0.0)) throw DomainError("E1 is defined for x > 0 only");
    constexpr double eps = 1e-16;
    constexpr int max_iter = 1000;
    if (x < 1.0) {
        double sum = 0.0;
        double term = 1.0; // (-1)^{n+1} xⁿ / n!
        for (int n = 1; n < max_iter; ++n) {
            term *= (n == 1 ? x : -x / n);
            const double add = term / n;
            sum += add;
            if (std::abs(add) < eps * std::abs(sum)) break;
        }
        return -std::numbers::egamma - std::log(x) + sum;
    }
    constexpr double tiny = std::numeric_limits<double>::min() / eps;
    double b = x + 1.0;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < max_iter; ++i) {
        const double a = -static_cast<double>(i) * i;
        b += 2.0;
        d = 1.0 / (a * d + b);
        c = b + a / c;
        const double del = c * d;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h * std::exp(-x);
}

/// ρ₀ = K·P0 / (M·E₁(τ)), the scaling that makes E[p] = K·P0/M.
inline double rho0(const ChannelConfig& cfg) {
    return cfg.devices * cfg.power_budget / (cfg.subchannels * exp_integral_e1(cfg.tau));
}

/// ρ₀/ν², identical for every device that is not in outage.
inline double receive_snr(const ChannelConfig& cfg) { return rho0(cfg) / cfg.noise_power; }

inline double outage_probability(const ChannelConfig& cfg) { return 1.0 - std::exp(-cfg.tau); }

/// r = (B/K)·log₂(1 + K·P0/(M·ν²·E₁(τ))) bits/s.
inline double transmission_rate(const ChannelConfig& cfg) {
    return cfg.bandwidth / cfg.devices * std::log2(1.0 + receive_snr(cfg));
}

inline double upload_latency_bits(double bits, const ChannelConfig& cfg) {
    if (bits <= 0.0) return 0.0;
    return bits / transmission_rate(cfg);
}

/// Seconds to upload q parameters of Q bits each.
inline double upload_latency(double params, const ChannelConfig& cfg) {
    return upload_latency_bits(params * cfg.quant_bits, cfg);
}

/// Truncated channel inversion for a given coefficient.
inline LinkState make_link(std::complex<double> h, const ChannelConfig& cfg) {
    LinkState s;
    s.h = h;
    const double g = std::norm(h);
    s.outage = g < cfg.tau;
    s.power = s.outage ? 0.0 : rho0(cfg) / g;
    return s;
}

inline LinkState draw_link(Rng& rng, const ChannelConfig& cfg) {
    return make_link(draw_channel(rng), cfg);
}

// ---------------------------------------------------------------------------
// Uniform quantization. A message carries its range [lo, hi] as two f64
// values followed by the Q-bit level indices packed LSB-first.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kRangeOverheadBytes = 16;

struct QuantizedMessage {
    double lo = 0.0;
    double hi = 0.0;
    int bits = 0;
    std::size_t count = 0;
    std::vector<std::uint8_t> packed;

    std::size_t payload_bytes() const noexcept { return kRangeOverheadBytes + packed.size(); }
    std::size_t payload_bits() const noexcept {
        return 8 * kRangeOverheadBytes + count * static_cast<std::size_t>(bits);
    }
};

inline QuantizedMessage quantize(std::span<const double> x, int bits) {
    if (bits < 1 || bits > 52) throw DomainError("quantization bits must be in [1, 52]");
    QuantizedMessage msg;
    msg.bits = bits;
    msg.count = x.size();
    if (x.empty()) return msg;
    double lo = x[0];
    double hi = x[0];
    for (double v : x) {
        if (!std::isfinite(v)) throw DomainError("cannot quantize non-finite value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    msg.lo = lo;
    msg.hi = hi;
    const std::uint64_t levels = (std::uint64_t{1} << bits) - 1;
    const double step = (hi - lo) / static_cast<double>(levels);
    msg.packed.assign((x.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
    std::size_t bitpos = 0;
    for (double v : x) {
        std::uint64_t idx = 0;
        if (step > 0.0) {
            const double q = std::round((v - lo) / step);
            idx = q <= 0.0 ? 0 : (q >= static_cast<double>(levels) ? levels : static_cast<std::uint64_t>(q));
        }
        for (int b = 0; b < bits; ++b, ++bitpos) {
            if ((idx >> b) & 1u) msg.packed[bitpos / 8] |= static_cast<std::uint8_t>(1u << (bitpos % 8));
        }
    }
    return msg;
}

inline std::vector<double> dequantize(const QuantizedMessage& msg) {
    std::vector<double> out(msg.count, msg.lo);
    if (msg.count == 0 || msg.hi == msg.lo) return out;
    if (msg.packed.size() * 8 < msg.count * static_cast<std::size_t>(msg.bits)) {
        throw TruncatedFile("quantized payload shorter than its declared length");
    }
    const std::uint64_t levels = (std::uint64_t{1} << msg.bits) - 1;
    const double step = (msg.hi - msg.lo) / static_cast<double>(levels);
    std::size_t bitpos = 0;
    for (std::size_t i = 0; i < msg.count; ++i) {
        std::uint64_t idx = 0;
        for (int b = 0; b < msg.bits; ++b, ++bitpos) {
            if ((msg.packed[bitpos / 8] >> (bitpos % 8)) & 1u) idx |= std::uint64_t{1} << b;
        }
        out[i] = idx == levels ? msg.hi : msg.lo + static_cast<double>(idx) * step;
    }
    return out;
}

struct QuantizedRoundTrip {
    std::vector<double> values;
    std::size_t payload_bytes = 0;
};

inline QuantizedRoundTrip quantize_roundtrip(std::span<const double> x, int bits) {
    const auto msg = quantize(x, bits);
    return {dequantize(msg), msg.payload_bytes()};
}

/// What the server recovers from one uplink message.
struct Transmission {
    std::vector<double> received;
    std::size_t bits = 0;
    double latency_s = 0.0;
};

/// Sends one message over a drawn link. Returns nullopt when the device is in
/// outage; otherwise the dequantized values and the on-air cost.
inline std::optional<Transmission> transmit(std::span<const double> payload, const LinkState& link,
                                            const ChannelConfig& cfg) {
    if (link.outage) return std::nullopt;
    const auto msg = quantize(payload, cfg.quant_bits);
    Transmission t;
    t.received = dequantize(msg);
    t.bits = msg.payload_bits();
    t.latency_s = upload_latency_bits(static_cast<double>(t.bits), cfg);
    return t;
}

/// Monte-Carlo statistics of the power-control policy.
struct PowerControlStats {
    double outage_rate = 0.0;
    double mean_power = 0.0;
    double mean_gain = 0.0;
    double snr_spread = 0.0; // max − min receive SNR over active draws
};

inline PowerControlStats simulate_power_control(const ChannelConfig& cfg, std::size_t draws,
                                                Rng& rng) {
    PowerControlStats s;
    std::size_t outages = 0;
    double power = 0.0;
    double gain = 0.0;
    double snr_lo = std::numeric_limits<double>::infinity();
    double snr_hi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < draws; ++i) {
        const auto link = draw_link(rng, cfg);
        gain += link.gain();
        power += link.power;
        if (link.outage) {
            ++outages;
            continue;
        }
        const double snr = link.gain() * link.power / cfg.noise_power;
        snr_lo = std::min(snr_lo, snr);
        snr_hi = std::max(snr_hi, snr);
    }
    const auto n = static_cast<double>(draws);
    s.outage_rate = static_cast<double>(outages) / n;
    s.mean_power = power / n;
    s.mean_gain = gain / n;
    s.snr_spread = outages < draws ? snr_hi - snr_lo : 0.0;
    return s;
}

} // namespace lolafl
