#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "fomemo/errors.hpp"

namespace fomemo {

// SplitMix64 finalizer (public-domain constants). Used for seed derivation
// so that every consumer of randomness gets an independent, reproducible
// stream from one master seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Derives a child seed from (master, tag). The algorithm is pinned: it is
// part of the reproducibility contract and must not change between releases.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
  std::uint64_t h = splitmix64(master);
  for (unsigned char c : tag) h = splitmix64(h ^ c);
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index) {
  return splitmix64(derive_seed(master, tag) ^
                    (index * 0x9E3779B97F4A7C15ULL));
}

// Deterministic random stream. The engine is std::mt19937_64 (bit-exact by
// the C++ standard); all distributions are implemented here by hand because
// the standard library's distribution algorithms are not portable across
// standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive, via rejection (unbiased).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw DomainError("uniform_int: lo > hi");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(gen_());  // full range
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return lo + static_cast<std::int64_t>(v % span);
  }

  // Standard normal via Box-Muller; the second deviate is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Exponential with the given rate.
  double exponential(double rate = 1.0) {
    if (!(rate > 0.0)) throw DomainError("exponential: rate must be > 0");
    return -std::log(1.0 - uniform()) / rate;
  }

  // Gamma(shape, rate) via Marsaglia-Tsang squeeze; shape < 1 handled by the
  // usual boost trick Gamma(shape) = Gamma(shape+1) * U^{1/shape}.
  double gamma(double shape, double rate) {
    if (!(shape > 0.0) || !(rate > 0.0))
      throw DomainError("gamma: shape and rate must be > 0");
    if (shape < 1.0) {
      const double u = 1.0 - uniform();  // (0, 1]
      return gamma(shape + 1.0, rate) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = 1.0 - uniform();  // (0, 1]
      const double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2) return d * v / rate;
      if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v)))
        return d * v / rate;
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace fomemo
