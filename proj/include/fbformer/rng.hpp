#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fbf {

/// 64-bit FNV-1a; stable across platforms, used for stream keys and digests.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xCBF29CE484222325ULL);

/// Counter-based generator: output i of stream `seed` is
/// splitmix64_finalize(seed * 0x9E3779B97F4A7C15 + counter * 0xD1B54A32D192ED03 + 1).
/// Only 64-bit integer arithmetic is involved, so a (seed, counter) pair
/// produces the same values on every platform. Derived streams are keyed
/// by hashing (seed, tag), never by sharing counters.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  static std::uint64_t mix(std::uint64_t z);

  /// Independent stream for a sub-task, e.g. (epoch, sample index).
  Rng derive(std::uint64_t tag) const;
  Rng derive(std::uint64_t tag_a, std::uint64_t tag_b) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool coin() { return (next_u64() >> 63) != 0; }
  /// Standard normal via Box-Muller (cosine branch only, two draws each).
  double normal();
  /// Normal(0, std) resampled until |x| <= 2 std.
  double truncated_normal(double std);

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace fbf
