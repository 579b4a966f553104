#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace milfuse {

/// Deterministic 64-bit generator: xoshiro256++ with splitmix64 state
/// expansion from the seed. All integer arithmetic, so identical seeds give
/// identical draw sequences on every platform. normal() is Box-Muller on two
/// uniform draws (second value cached), not std::normal_distribution, whose
/// output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);

  /// Standard normal via Box-Muller.
  double normal();

  /// Uniform integer in [0, n). Lemire multiply-shift rejection, exact and
  /// platform-independent. n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Fisher-Yates shuffle using below().
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Child generator with seed = splitmix64(seed ^ fnv1a64(tag)). The
  /// documented way to derive independent subsystem streams from one seed.
  Rng derive(std::string_view tag) const;

  static std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace milfuse
