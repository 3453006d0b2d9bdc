#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace txnet {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// 64-bit FNV-1a, used to derive stream keys from tensor names.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based SplitMix64 stream. Streams with different keys under the
/// same seed are independent, so draws do not depend on construction order.
class RandomStream {
 public:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  RandomStream(std::uint64_t seed, std::uint64_t key) : state_(mix64(seed) ^ mix64(key + kGolden)) {}
  RandomStream(std::uint64_t seed, std::string_view key) : RandomStream(seed, fnv1a(key)) {}

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix64(state_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (cosine branch only).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, stddev) redrawn until it falls within +-bound*stddev.
  double truncated_normal(double stddev, double bound = 2.0) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= bound) return z * stddev;
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace txnet
