#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>

namespace gpstruct {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seedable random stream with explicit sub-stream derivation. Distributions
/// are generated from raw mt19937_64 output directly (no std::*_distribution),
/// so a given seed yields the same draws on every platform and no hidden state
/// (such as a cached Gaussian spare) leaks between streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  /// Independent stream keyed on (a, b, c). Derivation depends only on this
  /// stream's seed, not on how many draws were made, so callers can hand out
  /// per-task streams in any order (or in parallel) without affecting results.
  Rng stream(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    std::uint64_t s = splitmix64(seed_ ^ 0x6a09e667f3bcc909ULL);
    s = splitmix64(s ^ splitmix64(a));
    s = splitmix64(s ^ splitmix64(b ^ 0xbb67ae8584caa73bULL));
    s = splitmix64(s ^ splitmix64(c ^ 0x3c6ef372fe94f82bULL));
    return Rng(s);
  }

  std::uint64_t raw() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (both values recomputed, none cached).
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));  // u1 in [0,1) => 1-u1 in (0,1]
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Index drawn proportionally to `probs` (need not be normalized).
  int categorical(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) total += p;
    double u = uniform() * total;
    double c = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      c += probs[i];
      if (u < c) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  /// Uniform integer in [0, n).
  int uniform_index(int n) {
    int i = static_cast<int>(uniform() * n);
    return i >= n ? n - 1 : i;
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace gpstruct
