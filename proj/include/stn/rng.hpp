#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "stn/tensor.hpp"

namespace stn {

// Deterministic RNG. mt19937_64 raw output is fully specified by the
// standard; the distribution transforms below are our own so results are
// reproducible across standard-library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return (eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is irrelevant at our scales.
  long uniform_int(long n) { return (long)(eng_() % (uint64_t)n); }

  // Box-Muller; one variate per call, no cached state.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // Normal truncated to +-2 sigma by rejection.
  double trunc_normal(double std) {
    for (;;) {
      double z = normal();
      if (std::abs(z) <= 2.0) return z * std;
    }
  }

  template <class S>
  void fill_uniform(Tensor<S>& t, double lo, double hi) {
    for (long i = 0; i < t.numel(); ++i) t[i] = (S)uniform(lo, hi);
  }

  template <class S>
  void fill_normal(Tensor<S>& t, double mean, double std) {
    for (long i = 0; i < t.numel(); ++i) t[i] = (S)normal(mean, std);
  }

  template <class S>
  void fill_trunc_normal(Tensor<S>& t, double std) {
    for (long i = 0; i < t.numel(); ++i) t[i] = (S)trunc_normal(std);
  }

  template <class It>
  void shuffle(It first, It last) {
    long n = last - first;
    for (long i = n - 1; i > 0; --i) {
      long j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace stn
