#pragma once

#include <cstddef>
#include <cstdint>

namespace dqnlab {

/// splitmix64 finalizer; used to expand seeds and to derive child streams.
std::uint64_t splitmix64(std::uint64_t& state);

/// Combines a seed with an ordered list of stream indices into a new seed.
/// Equal inputs give equal outputs on every platform.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

/// xoshiro256** (Blackman & Vigna), state expanded from the seed with
/// splitmix64. Every distribution below is implemented here rather than via
/// <random> so the streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n); n must be positive. Unbiased (rejection).
  std::size_t uniform_index(std::size_t n);
  bool bernoulli(double p);
  /// Standard normal via Box-Muller (both variates used).
  double normal();
  /// Exponential(1) via inversion.
  double exponential();

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace dqnlab
