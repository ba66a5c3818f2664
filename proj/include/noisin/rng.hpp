#pragma once

// PCG-XSL-RR 128/64 generator with explicit stream selection and splitting.
//
// Output streams are a pure function of (seed, stream, call sequence), so any
// run is reproducible from its seed alone. `split()` derives an independent
// child generator by drawing a fresh seed and stream id from the parent.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace noisin {

class Rng {
 public:
  static constexpr std::uint64_t kDefaultStream = 0xda3e39cb94b95bdbULL;

  explicit Rng(std::uint64_t seed = 1111, std::uint64_t stream = kDefaultStream)
      : seed_(seed) {
    inc_ = (static_cast<u128>(stream) << 1) | 1u;
    state_ = 0;
    step();
    state_ += static_cast<u128>(seed);
    step();
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    step();
    const auto hi = static_cast<std::uint64_t>(state_ >> 64);
    const auto lo = static_cast<std::uint64_t>(state_);
    const unsigned rot = static_cast<unsigned>(state_ >> 122);
    const std::uint64_t x = hi ^ lo;
    return (x >> rot) | (x << ((64u - rot) & 63u));
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on the open interval (0, 1); safe for log and inverse CDFs.
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on two open uniforms (cosine branch only,
  /// so every draw consumes exactly two 64-bit outputs).
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform_open();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Gamma(shape, 1) by Marsaglia-Tsang squeeze; shapes below one use the
  /// U^(1/shape) boost.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double u = uniform_open();
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
      const double u = uniform_open();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  Rng split() {
    const std::uint64_t s = next_u64();
    const std::uint64_t st = next_u64();
    return Rng(s, st);
  }

 private:
  using u128 = unsigned __int128;

  void step() {
    static constexpr u128 kMultiplier =
        (static_cast<u128>(2549297995355413924ULL) << 64) + 4865540595714422341ULL;
    state_ = state_ * kMultiplier + inc_;
  }

  std::uint64_t seed_;
  u128 state_;
  u128 inc_;
};

}  // namespace noisin
