#include "chag/tensor/rng.hpp"

#include <cmath>
#include <numbers>

namespace chag {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t RngState::next_u64() {
  const std::uint64_t n = counter_++;
  return splitmix64(splitmix64(seed_) ^ (n * 0xD1B54A32D192ED03ULL));
}

double RngState::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngState::below(std::uint64_t n) {
  // Rejection keeps the draw unbiased for every n.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  for (;;) {
    const std::uint64_t v = next_u64();
    if (v < limit) return v % n;
  }
}

double RngState::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double RngState::trunc_normal(double stddev) {
  for (;;) {
    const double z = normal();
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

RngState RngState::fork(std::uint64_t key) const {
  return RngState(splitmix64(seed_ ^ splitmix64(key + 0x632BE59BD9B4E019ULL)));
}

}  // namespace chag
