#pragma once

#include <cstdint>
#include <random>

namespace lolafl {

using Rng = std::mt19937_64;

/// Independent generator for (master seed, stream tag, a, b). Every consumer of
/// randomness derives its own sub-stream so results do not depend on call
/// order across devices.
inline Rng substream(std::uint64_t master, std::uint32_t tag, std::uint64_t a = 0,
                     std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                      tag,
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return Rng(seq);
}

namespace stream {
inline constexpr std::uint32_t kPartition = 1;
inline constexpr std::uint32_t kChannel = 2;
inline constexpr std::uint32_t kSynthetic = 3;
inline constexpr std::uint32_t kTrial = 4;
} // namespace stream

} // namespace lolafl
