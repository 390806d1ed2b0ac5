// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace gara {

/// Counter-based generator: the n-th draw is splitmix64(key + n * golden).
///
/// The stream is a pure function of (key, counter), so results do not depend on
/// platform or on how many other streams were consumed.  `split(id)` derives an
/// independent key; the trainer uses it to give every (step, sample, slot) its own
/// stream, which keeps Gumbel noise reproducible regardless of iteration order.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : key_(mix(seed)), seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix(key_ + counter_ * kGolden);
  }

  SeededRng split(std::uint64_t stream) const noexcept {
    SeededRng child;
    child.key_ = mix(key_ ^ mix(stream ^ 0xD1B54A32D192ED03ULL));
    child.seed_ = seed_;
    return child;
  }

  // Uniform index in [0, n); modulo bias is below 2^-50 for the sizes used here.
  std::size_t index(std::size_t n) noexcept { return static_cast<std::size_t>(next_u64() % n); }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  std::uint64_t seed_ = 0;
};

inline constexpr double kUniformClamp = 1e-12;

/// Uniform draw in the open interval, clamped to [1e-12, 1 - 1e-12].
inline double sample_uniform(SeededRng& rng) {
  const double u = (static_cast<double>(rng.next_u64() >> 11) + 0.5) * 0x1.0p-53;
  return std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
}

inline double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

inline double sample_gumbel(SeededRng& rng) { return gumbel_from_uniform(sample_uniform(rng)); }

// Box-Muller on our own uniforms, so the normal stream is reproducible too.
inline double sample_normal(SeededRng& rng, double mean = 0.0, double stddev = 1.0) {
  const double u1 = sample_uniform(rng);
  const double u2 = sample_uniform(rng);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double sample_range(SeededRng& rng, double lo, double hi) {
  return lo + (hi - lo) * sample_uniform(rng);
}

}  // namespace gara
