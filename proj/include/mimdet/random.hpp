#pragma once

#include <cstdint>
#include <random>

#include "mimdet/tensor.hpp"

namespace mimdet {

/// Seeded 64-bit generator. Substream i of seed s is the generator seeded
/// with s + i; determinism holds per implementation, not across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng_); }
  // Uniform integer in [0, n).
  long below(long n) { return std::uniform_int_distribution<long>(0, n - 1)(eng_); }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

/// Truncated normal fill: std `stddev`, resampled beyond +-2 std.
inline void trunc_normal_fill(Tensor& t, Rng& rng, double stddev = 0.02) {
  const long n = t.numel();
  for (long i = 0; i < n; ++i) {
    double x;
    do {
      x = rng.normal();
    } while (x < -2.0 || x > 2.0);
    t[i] = x * stddev;
  }
}

}  // namespace mimdet
