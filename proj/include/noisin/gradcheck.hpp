#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "noisin/tensor.hpp"

namespace noisin {

/// Scalar objective of a parameter tensor. When `grad` is non-null the
/// function must also write its analytic gradient there (same shape as theta).
template <class T>
using DifferentiableFn = std::function<T(const Tensor<T>& theta, Tensor<T>* grad)>;

template <class T>
struct GradCheckReport {
  T max_rel_error = 0;
  std::size_t worst_index = 0;
  T analytic = 0;
  T numeric = 0;
};

/// Compares the analytic gradient of `f` at `theta` against central
/// differences, coordinate by coordinate. The error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
///
/// `f` must be deterministic: any randomness has to be frozen inside it.
/// Two evaluations at the same point that disagree bitwise raise
/// ContractViolation.
template <class T>
GradCheckReport<T> grad_check_report(const DifferentiableFn<T>& f, const Tensor<T>& theta,
                                     T step) {
  Tensor<T> analytic(theta.shape());
  const T base = f(theta, &analytic);
  const T again = f(theta, nullptr);
  if (!(base == again)) {
    throw ContractViolation("grad_check: objective is not reproducible at a fixed point");
  }
  if (analytic.shape() != theta.shape()) {
    throw DimensionError("grad_check: gradient shape does not match parameters");
  }
  GradCheckReport<T> report;
  Tensor<T> probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + step;
    const T up = f(probe, nullptr);
    probe[i] = orig - step;
    const T down = f(probe, nullptr);
    probe[i] = orig;
    const T numeric = (up - down) / (T(2) * step);
    const T denom = std::max({T(1), std::abs(analytic[i]), std::abs(numeric)});
    const T err = std::abs(analytic[i] - numeric) / denom;
    if (err > report.max_rel_error || i == 0) {
      report.max_rel_error = std::max(report.max_rel_error, err);
      if (err >= report.max_rel_error) {
        report.worst_index = i;
        report.analytic = analytic[i];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

template <class T>
T grad_check(const DifferentiableFn<T>& f, const Tensor<T>& theta, T step) {
  return grad_check_report(f, theta, step).max_rel_error;
}

}  // namespace noisin
