#pragma once

// Counter-based random numbers. A draw is a pure function of
// (key, counter), so per-voxel noise does not depend on traversal order or
// thread count. Keys for pipeline stages are derived from the top-level
// seed and a stage name: stage_seed(seed, "noise/train/0").

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace occnl::rng {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline constexpr std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) noexcept {
  return splitmix64(splitmix64(seed) ^ fnv1a64(stage));
}

/// 64 random bits for (key, index, lane). Distinct lanes give independent
/// draws for the same index.
inline constexpr std::uint64_t bits(std::uint64_t key, std::uint64_t index, std::uint64_t lane = 0) noexcept {
  return splitmix64(splitmix64(key ^ splitmix64(index)) + lane * 0xD1342543DE82EF95ULL);
}

/// Uniform in [0, 1) with 53 random bits.
inline constexpr double uniform01(std::uint64_t key, std::uint64_t index, std::uint64_t lane = 0) noexcept {
  return static_cast<double>(bits(key, index, lane) >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n). Uses the 128-bit multiply-shift map; the bias
/// is below n / 2^64.
inline std::uint64_t below(std::uint64_t key, std::uint64_t index, std::uint64_t lane, std::uint64_t n) noexcept {
  const unsigned __int128 m = static_cast<unsigned __int128>(bits(key, index, lane)) * n;
  return static_cast<std::uint64_t>(m >> 64);
}

inline double normal(std::uint64_t key, std::uint64_t index, std::uint64_t lane = 0) noexcept {
  // Box-Muller on two lanes derived from the requested one.
  const double u1 = 1.0 - uniform01(key, index, 2 * lane);
  const double u2 = uniform01(key, index, 2 * lane + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sequential stream over a counter-based key. Deterministic for a given key.
class Stream {
 public:
  explicit Stream(std::uint64_t key) : key_(key) {}

  std::uint64_t next_bits() noexcept { return bits(key_, counter_++); }
  double uniform() noexcept { return uniform01(key_, counter_++); }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n) noexcept { return rng::below(key_, counter_++, 0, n); }
  std::int64_t between(std::int64_t lo, std::int64_t hi) noexcept {  // inclusive
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }
  double normal() noexcept { return rng::normal(key_, counter_++); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace occnl::rng
