#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "golf/errors.hpp"

namespace golf {

// One mixing round of splitmix64; used to derive independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for the substream identified by (a, b, c) under a master seed.
// Streams for distinct ids are independent for all practical purposes, so
// parallel and serial execution of per-factor work draw identical variates.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = splitmix64(master ^ 0x6a09e667f3bcc908ULL);
  s = splitmix64(s ^ splitmix64(a));
  s = splitmix64(s ^ splitmix64(b + 0x5851f42d4c957f2dULL));
  s = splitmix64(s ^ splitmix64(c + 0x14057b7ef767814fULL));
  return s;
}

// Deterministic random stream. All transformations from raw bits are spelled
// out here so draws do not depend on the standard library's distribution
// implementations.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform on (0, 1); never returns 0 or 1.
  double uniform() {
    const double u = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    return u == 0.0 ? 0x1.0p-54 : u;
  }

  // Standard normal via Box-Muller (no cached spare: keeps the stream state
  // position-independent of the draw history mix).
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Gamma(shape, rate 1) via Marsaglia-Tsang squeeze; shape < 1 boosted.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw invalid_parameter("gamma: shape must be > 0");
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
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
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Inverse gamma with the shape/rate convention: density ~ x^{-shape-1} e^{-rate/x}.
  double inv_gamma(double shape, double rate) {
    if (!(rate > 0.0)) throw invalid_parameter("inv_gamma: rate must be > 0");
    return rate / gamma(shape);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace golf
