#pragma once

#include <cstdint>

namespace chag {

/// Counter-based generator: the n-th draw is splitmix64(seed, n), so the
/// stream depends only on the seed and the number of prior draws.
class RngState {
 public:
  explicit RngState(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one draw per call, no caching).
  double normal();
  /// Normal with the given std, resampled until |z| <= 2 std.
  double trunc_normal(double stddev);

  /// Independent stream keyed by (seed, key); does not advance this one.
  RngState fork(std::uint64_t key) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace chag
