#include "fbformer/rng.hpp"

#include <cmath>
#include <numbers>

namespace fbf {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t Rng::mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng Rng::derive(std::uint64_t tag) const {
  return Rng(mix(seed_ ^ mix(tag + 0x632BE59BD9B4E019ULL)));
}

Rng Rng::derive(std::uint64_t tag_a, std::uint64_t tag_b) const {
  return derive(tag_a).derive(tag_b);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t x = seed_ * 0x9E3779B97F4A7C15ULL + counter_ * 0xD1B54A32D192ED03ULL + 1;
  ++counter_;
  return mix(x);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double std) {
  for (;;) {
    const double x = normal();
    if (std::abs(x) <= 2.0) return x * std;
  }
}

}  // namespace fbf
