#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (key, counter), so a sample's realization never depends on which worker
// produced it or in which order samples were evaluated.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace mlsgd::seeds {

/// SplitMix64 finalizer (Steele, Lea & Flood 2014).
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Per-sample key for (root seed, optimization step k, level, sample index m).
constexpr std::uint64_t mix(std::uint64_t root, std::uint64_t k, std::uint64_t level, std::uint64_t m) {
    std::uint64_t h = splitmix64(root);
    h = splitmix64(h ^ k);
    h = splitmix64(h ^ (level * 0xD1B54A32D192ED03ULL));
    h = splitmix64(h ^ m);
    return h;
}

/// Level tag used when every level of a sample shares one realization.
inline constexpr std::uint64_t kSharedLevelTag = 0xFFFF'FFFF'FFFF'FFFFULL;

/// Uniform double in (0, 1) at position `counter` of the stream `key`.
constexpr double uniform_open(std::uint64_t key, std::uint64_t counter) {
    const std::uint64_t bits = splitmix64(key ^ splitmix64(counter));
    // 53 random bits, shifted by half an ulp so 0 is never produced
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Pair of independent standard normals at position `pair_index` (Box-Muller).
inline std::pair<double, double> normal_pair(std::uint64_t key, std::uint64_t pair_index) {
    const double u1 = uniform_open(key, 2 * pair_index);
    const double u2 = uniform_open(key, 2 * pair_index + 1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(phi), r * std::sin(phi)};
}

}  // namespace mlsgd::seeds
