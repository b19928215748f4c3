#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace commvq {

// Deterministic random source. std::mt19937_64 has a fixed, portable output
// sequence; the distributions below are implemented by hand because the
// standard library distribution objects are implementation-defined and would
// break byte-identical reruns across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so log(u1) is finite.
    double u1 = (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Gumbel(0,1) deviate: -log(-log(u)) with u strictly inside (0, 1).
  double gumbel() {
    double u = (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
    return -std::log(-std::log(u));
  }

  // Uniform index in [0, n). Lemire multiply-shift; bias is < n / 2^64.
  size_t index(size_t n) {
    return static_cast<size_t>(
        (static_cast<unsigned __int128>(gen_()) * n) >> 64);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace commvq
