#pragma once

#include <cstdint>
#include <limits>
#include <random>

namespace banditd {

// SplitMix64 finalizer applied to (seed, stream).  Used to derive independent
// per-replication and per-request seeds from one base seed; the constants are
// part of the reproducibility contract of simulation reports.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

// Seeded generator with the handful of variates the policies need.  Every
// variate is built from raw 64-bit draws so that sequences are identical
// across standard library implementations.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform01();
  // Uniform on {0, ..., n-1}; n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  double normal(double mean = 0.0, double sd = 1.0);
  // Marsaglia-Tsang squeeze method; shapes below one use the
  // Gamma(shape + 1) * U^(1/shape) boost.
  double gamma(double shape);
  // Ratio of two Gamma variates.
  double beta(double a, double b);
  bool bernoulli(double p) { return uniform01() < p; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace banditd
