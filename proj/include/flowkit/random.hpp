// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace flowkit {

/// SplitMix64 finalizer. Used to expand one master seed into independent
/// per-purpose streams.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives a child seed from `seed` along a path of integer labels. The rule is
/// `s <- mix64(s ^ mix64(label))` for each label in order, so
/// derive_seed(m, {a, b}) == derive_seed(derive_seed(m, {a}), {b}).
constexpr std::uint64_t derive_seed(std::uint64_t seed,
                                    std::initializer_list<std::uint64_t> path) noexcept {
  for (std::uint64_t label : path) seed = mix64(seed ^ mix64(label));
  return seed;
}

/// Stream labels for derive_seed. Values are part of the file formats (a
/// stored master seed must reproduce the same run), so never renumber.
enum class SeedPurpose : std::uint64_t {
  target_spec = 1,
  train_data = 2,
  validation_data = 3,
  replica_init = 4,
  replica_shuffle = 5,
  evaluation = 6,
  pseudo_experiment = 7,
  directions = 8,
  flow_sample = 9,
  target_sample = 10,
};

constexpr std::uint64_t derive_seed(std::uint64_t seed, SeedPurpose purpose,
                                    std::uint64_t index = 0) noexcept {
  return derive_seed(seed, {static_cast<std::uint64_t>(purpose), index});
}

/// 64-bit Mersenne twister with distribution code that does not depend on the
/// standard library implementation, so draws are reproducible across
/// toolchains given the same seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1].
  double uniform_open_closed() { return 1.0 - uniform(); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n) by rejection; n > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via the Box-Muller transform; the second variate of each
  /// pair is cached.
  double normal();

  /// Fisher-Yates shuffle of a random-access range.
  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace flowkit
