#pragma once

// The eight noise families used for hidden-state injection, their rescaled
// forms, closed-form moments and the adaptation to additive (mean zero) or
// multiplicative (mean one) injection.
//
// Sampling methods, one standard draw per element in row-major order:
//   Gaussian   gamma * N(0,1), Box-Muller (Rng::normal)
//   Bernoulli  1 if U[0,1) < gamma else 0
//   Gamma      gamma * Gamma(alpha, 1), Marsaglia-Tsang (Rng::gamma)
//   Gumbel     -gamma * log(-log U), U on (0,1)
//   Laplace    -gamma * sign(u) * log(1 - 2|u|), u = U - 1/2, U on (0,1)
//   Logistic   gamma * log(U / (1 - U)), U on (0,1)
//   Beta       X / (X + Y), X ~ Gamma(alpha, 1), Y ~ Gamma(gamma, 1)
//   ChiSquare  2 * Gamma(gamma / 2, 1)

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "noisin/rng.hpp"
#include "noisin/tensor.hpp"

namespace noisin {

enum class NoiseFamily { Gaussian, Bernoulli, Gamma, Gumbel, Laplace, Logistic, Beta, ChiSquare };

enum class InjectionMode { Additive, Multiplicative, Off };

inline constexpr NoiseFamily kAllNoiseFamilies[] = {
    NoiseFamily::Gaussian, NoiseFamily::Bernoulli, NoiseFamily::Gamma,
    NoiseFamily::Gumbel,   NoiseFamily::Laplace,   NoiseFamily::Logistic,
    NoiseFamily::Beta,     NoiseFamily::ChiSquare};

inline std::string to_string(NoiseFamily f) {
  switch (f) {
    case NoiseFamily::Gaussian: return "gaussian";
    case NoiseFamily::Bernoulli: return "bernoulli";
    case NoiseFamily::Gamma: return "gamma";
    case NoiseFamily::Gumbel: return "gumbel";
    case NoiseFamily::Laplace: return "laplace";
    case NoiseFamily::Logistic: return "logistic";
    case NoiseFamily::Beta: return "beta";
    case NoiseFamily::ChiSquare: return "chisquare";
  }
  return "?";
}

inline std::string to_string(InjectionMode m) {
  switch (m) {
    case InjectionMode::Additive: return "additive";
    case InjectionMode::Multiplicative: return "multiplicative";
    case InjectionMode::Off: return "off";
  }
  return "?";
}

inline NoiseFamily parse_noise_family(std::string_view s) {
  for (NoiseFamily f : kAllNoiseFamilies)
    if (s == to_string(f)) return f;
  if (s == "chi" || s == "chi-square") return NoiseFamily::ChiSquare;
  throw std::invalid_argument("unknown noise family '" + std::string(s) + "'");
}

inline InjectionMode parse_injection_mode(std::string_view s) {
  if (s == "additive") return InjectionMode::Additive;
  if (s == "multiplicative") return InjectionMode::Multiplicative;
  if (s == "off" || s == "none") return InjectionMode::Off;
  throw std::invalid_argument("unknown injection mode '" + std::string(s) + "'");
}

struct NoiseSpec {
  NoiseFamily family = NoiseFamily::Gaussian;
  double gamma = 0.5;
  /// Shape parameter for Gamma (default 2) and Beta (default 1).
  std::optional<double> alpha;
  InjectionMode mode = InjectionMode::Multiplicative;

  double shape_alpha() const {
    if (alpha) return *alpha;
    return family == NoiseFamily::Beta ? 1.0 : 2.0;
  }

  static NoiseSpec off() { return NoiseSpec{NoiseFamily::Gaussian, 0.0, {}, InjectionMode::Off}; }
};

inline std::string describe(const NoiseSpec& s) {
  return to_string(s.family) + "(gamma=" + std::to_string(s.gamma) + ", " +
         to_string(s.mode) + ")";
}

struct ScaledMoments {
  double mean = 0;
  double variance = 0;
};

inline void validate(const NoiseSpec& spec) {
  if (spec.mode == InjectionMode::Off) return;
  if (!(spec.gamma > 0) || !std::isfinite(spec.gamma)) {
    throw DomainError("noise spread gamma must be positive, got " + std::to_string(spec.gamma));
  }
  if (spec.family == NoiseFamily::Bernoulli && spec.gamma > 1.0) {
    throw DomainError("Bernoulli noise requires 0 < gamma <= 1");
  }
  if ((spec.family == NoiseFamily::Gamma || spec.family == NoiseFamily::Beta) &&
      !(spec.shape_alpha() > 0)) {
    throw DomainError("shape alpha must be positive");
  }
}

/// Mean and variance of the unscaled draw eta.
inline ScaledMoments standard_moments(const NoiseSpec& spec) {
  const double g = spec.gamma;
  const double a = spec.shape_alpha();
  constexpr double pi2 = std::numbers::pi * std::numbers::pi;
  switch (spec.family) {
    case NoiseFamily::Gaussian: return {0.0, g * g};
    case NoiseFamily::Bernoulli: return {g, g * (1 - g)};
    case NoiseFamily::Gamma: return {a * g, a * g * g};
    case NoiseFamily::Gumbel: return {std::numbers::egamma * g, pi2 * g * g / 6};
    case NoiseFamily::Laplace: return {0.0, 2 * g * g};
    case NoiseFamily::Logistic: return {0.0, pi2 * g * g / 3};
    case NoiseFamily::Beta:
      return {a / (a + g), a * g / ((a + g) * (a + g) * (a + g + 1))};
    case NoiseFamily::ChiSquare: return {g, 2 * g};
  }
  return {};
}

/// Closed-form moments of the scaled noise epsilon (before injection shift).
inline ScaledMoments analytic_moments(const NoiseSpec& spec) {
  const double g = spec.gamma;
  switch (spec.family) {
    case NoiseFamily::Bernoulli: return {1.0, (1 - g) / g};
    case NoiseFamily::Beta:
    case NoiseFamily::ChiSquare: return {0.0, g};
    default: return {0.0, g * g};
  }
}

/// Moments of the tensor returned by `as_injection`.
inline ScaledMoments injection_moments(const NoiseSpec& spec) {
  if (spec.mode == InjectionMode::Off) return {1.0, 0.0};
  const ScaledMoments m = analytic_moments(spec);
  return {spec.mode == InjectionMode::Additive ? 0.0 : 1.0, m.variance};
}

inline double sample_standard_scalar(const NoiseSpec& spec, Rng& rng) {
  const double g = spec.gamma;
  switch (spec.family) {
    case NoiseFamily::Gaussian: return g * rng.normal();
    case NoiseFamily::Bernoulli: return rng.uniform() < g ? 1.0 : 0.0;
    case NoiseFamily::Gamma: return g * rng.gamma(spec.shape_alpha());
    case NoiseFamily::Gumbel: return -g * std::log(-std::log(rng.uniform_open()));
    case NoiseFamily::Laplace: {
      const double u = rng.uniform_open() - 0.5;
      const double mag = -g * std::log(1.0 - 2.0 * std::abs(u));
      return u < 0 ? -mag : mag;
    }
    case NoiseFamily::Logistic: {
      const double u = rng.uniform_open();
      return g * std::log(u / (1.0 - u));
    }
    case NoiseFamily::Beta: {
      const double x = rng.gamma(spec.shape_alpha());
      const double y = rng.gamma(g);
      return x / (x + y);
    }
    case NoiseFamily::ChiSquare: return 2.0 * rng.gamma(0.5 * g);
  }
  return 0.0;
}

inline double scale_scalar(const NoiseSpec& spec, double eta) {
  const double g = spec.gamma;
  const double a = spec.shape_alpha();
  switch (spec.family) {
    case NoiseFamily::Gaussian: return eta;
    case NoiseFamily::Bernoulli: return eta / g;
    case NoiseFamily::Gamma: return (eta - a * g) / std::sqrt(a);
    case NoiseFamily::Gumbel:
      return std::sqrt(6.0) * (eta - std::numbers::egamma * g) / std::numbers::pi;
    case NoiseFamily::Laplace: return eta / std::sqrt(2.0);
    case NoiseFamily::Logistic: return std::sqrt(3.0) * eta / std::numbers::pi;
    case NoiseFamily::Beta:
      return (a + g) * std::sqrt((a + g + 1) / a) * (eta - a / (a + g));
    case NoiseFamily::ChiSquare: return (eta - g) / std::sqrt(2.0);
  }
  return eta;
}

template <class T>
Tensor<T> sample_standard(const NoiseSpec& spec, const Shape& shape, Rng& rng) {
  validate(spec);
  if (spec.mode == InjectionMode::Off) {
    throw DomainError("sample_standard: noise is switched off");
  }
  Tensor<T> out(shape);
  for (auto& v : out.values()) v = static_cast<T>(sample_standard_scalar(spec, rng));
  return out;
}

template <class T>
Tensor<T> scale(const NoiseSpec& spec, const Tensor<T>& eta) {
  Tensor<T> out(eta.shape());
  for (std::size_t i = 0; i < eta.size(); ++i)
    out[i] = static_cast<T>(scale_scalar(spec, static_cast<double>(eta[i])));
  return out;
}

/// Neutral element of an injection: 0 for additive, 1 otherwise.
template <class T>
Tensor<T> neutral_injection(InjectionMode mode, const Shape& shape) {
  return Tensor<T>(shape, mode == InjectionMode::Additive ? T(0) : T(1));
}

/// Shifts scaled noise to the mean required by the injection mode: zero for
/// additive (Bernoulli moves down by one), one for multiplicative (the
/// zero-mean families move up by one). Off yields the all-ones tensor.
template <class T>
Tensor<T> as_injection(const NoiseSpec& spec, const Tensor<T>& eps_scaled) {
  switch (spec.mode) {
    case InjectionMode::Off: return neutral_injection<T>(InjectionMode::Off, eps_scaled.shape());
    case InjectionMode::Additive:
      return spec.family == NoiseFamily::Bernoulli ? add_scalar(eps_scaled, T(-1)) : eps_scaled;
    case InjectionMode::Multiplicative:
      return spec.family == NoiseFamily::Bernoulli ? eps_scaled : add_scalar(eps_scaled, T(1));
  }
  return eps_scaled;
}

/// Draw, rescale and shift in one call. Consumes no randomness when off.
template <class T>
Tensor<T> sample_injection(const NoiseSpec& spec, const Shape& shape, Rng& rng) {
  if (spec.mode == InjectionMode::Off) return neutral_injection<T>(spec.mode, shape);
  return as_injection(spec, scale(spec, sample_standard<T>(spec, shape, rng)));
}

}  // namespace noisin
