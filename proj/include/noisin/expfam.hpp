#pragma once

// Exponential-family likelihood heads p(x | h) = nu(x) exp(s^T t(x) - A(s)),
// with natural parameter s = V^T h + b.
//
// Optimized losses drop the base measure nu(x); `exact_nll` keeps it. The
// Gaussian head uses the sufficient statistic t(x) = x / sigma2 so that its
// log-normalizer is s^T s / (2 sigma2); for the other heads t(x) = x.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "noisin/tape.hpp"
#include "noisin/tensor.hpp"

namespace noisin {

enum class LikelihoodFamily { Bernoulli, Gaussian, Poisson, Categorical };

inline std::string to_string(LikelihoodFamily f) {
  switch (f) {
    case LikelihoodFamily::Bernoulli: return "bernoulli";
    case LikelihoodFamily::Gaussian: return "gaussian";
    case LikelihoodFamily::Poisson: return "poisson";
    case LikelihoodFamily::Categorical: return "categorical";
  }
  return "?";
}

inline LikelihoodFamily parse_likelihood_family(std::string_view s) {
  for (auto f : {LikelihoodFamily::Bernoulli, LikelihoodFamily::Gaussian,
                 LikelihoodFamily::Poisson, LikelihoodFamily::Categorical})
    if (s == to_string(f)) return f;
  throw std::invalid_argument("unknown likelihood family '" + std::string(s) + "'");
}

template <class T>
struct LikelihoodHead {
  LikelihoodFamily family = LikelihoodFamily::Categorical;
  Tensor<T> V;     // [hidden x output]
  Tensor<T> bias;  // [output]
  T sigma2 = 1;    // Gaussian observation variance

  std::size_t hidden() const { return V.rows(); }
  std::size_t output() const { return V.cols(); }

  static LikelihoodHead make(LikelihoodFamily family, Tensor<T> V, T sigma2 = 1) {
    const std::size_t out = V.cols();
    return LikelihoodHead{family, std::move(V), Tensor<T>(Shape{out}), sigma2};
  }
};

/// A batch of observations for one time step: class ids for categorical
/// heads, or a dense [batch x output] tensor for the others.
template <class T>
struct Observations {
  std::vector<std::size_t> ids;
  Tensor<T> values;

  bool indexed() const { return !ids.empty(); }
  std::size_t batch() const { return indexed() ? ids.size() : values.rows(); }
};

template <class T>
T log_normalizer(LikelihoodFamily family, std::span<const T> s, T sigma2 = 1) {
  T acc = 0;
  switch (family) {
    case LikelihoodFamily::Bernoulli:
      for (T v : s) acc += softplus(v);  // -log(1 - sigmoid(v))
      return acc;
    case LikelihoodFamily::Gaussian:
      for (T v : s) acc += v * v;
      return acc / (T(2) * sigma2);
    case LikelihoodFamily::Poisson:
      for (T v : s) acc += std::exp(v);
      return acc;
    case LikelihoodFamily::Categorical: return logsumexp(s);
  }
  return acc;
}

/// Gradient of A, i.e. the mean of the sufficient statistic.
template <class T>
std::vector<T> mean_param(LikelihoodFamily family, std::span<const T> s, T sigma2 = 1) {
  std::vector<T> out(s.size());
  switch (family) {
    case LikelihoodFamily::Bernoulli:
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = sigmoid(s[i]);
      break;
    case LikelihoodFamily::Gaussian:
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] / sigma2;
      break;
    case LikelihoodFamily::Poisson:
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = std::exp(s[i]);
      break;
    case LikelihoodFamily::Categorical: {
      const T lse = logsumexp(s);
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = std::exp(s[i] - lse);
      break;
    }
  }
  return out;
}

/// Full Hessian of A at s, [n x n].
template <class T>
Tensor<T> hessian_A(LikelihoodFamily family, std::span<const T> s, T sigma2 = 1) {
  const std::size_t n = s.size();
  Tensor<T> H(Shape{n, n});
  switch (family) {
    case LikelihoodFamily::Bernoulli:
      for (std::size_t i = 0; i < n; ++i) {
        const T p = sigmoid(s[i]);
        H(i, i) = p * (T(1) - p);
      }
      break;
    case LikelihoodFamily::Gaussian:
      for (std::size_t i = 0; i < n; ++i) H(i, i) = T(1) / sigma2;
      break;
    case LikelihoodFamily::Poisson:
      for (std::size_t i = 0; i < n; ++i) H(i, i) = std::exp(s[i]);
      break;
    case LikelihoodFamily::Categorical: {
      // diag(eta)/1'eta - eta eta'/(1'eta)^2 with eta = exp(s), evaluated
      // through the normalized probabilities.
      const auto p = mean_param(family, s, sigma2);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) H(i, j) = -p[i] * p[j];
        H(i, i) += p[i];
      }
      break;
    }
  }
  return H;
}

template <class T>
Tensor<T> hessian_A(const LikelihoodHead<T>& head, const Tensor<T>& s) {
  return hessian_A<T>(head.family, s.values(), head.sigma2);
}

template <class T>
T log_normalizer(const LikelihoodHead<T>& head, const Tensor<T>& s) {
  return log_normalizer<T>(head.family, s.values(), head.sigma2);
}

/// s = V^T h + b for h of shape [hidden] or [batch x hidden].
template <class T>
Tensor<T> natural_param(const LikelihoodHead<T>& head, const Tensor<T>& h) {
  if (h.rank() == 1) {
    if (h.size() != head.hidden()) {
      throw DimensionError("natural_param: hidden size " + std::to_string(h.size()) +
                           " does not match V " + shape_str(head.V.shape()));
    }
    Tensor<T> s = add_row(matmul(as_row(h), head.V), head.bias);
    return s.reshaped(Shape{head.output()});
  }
  return add_row(matmul(h, head.V), head.bias);
}

inline bool is_count(double v) { return v >= 0 && std::floor(v) == v; }

/// Throws DomainError if x lies outside the family's support.
template <class T>
void require_support(LikelihoodFamily family, std::span<const T> x) {
  switch (family) {
    case LikelihoodFamily::Bernoulli:
      for (T v : x)
        if (v != T(0) && v != T(1)) throw DomainError("Bernoulli observation must be 0 or 1");
      return;
    case LikelihoodFamily::Poisson:
      for (T v : x)
        if (!is_count(static_cast<double>(v)))
          throw DomainError("Poisson observation must be a nonnegative integer");
      return;
    case LikelihoodFamily::Gaussian:
      for (T v : x)
        if (!std::isfinite(v)) throw DomainError("Gaussian observation must be finite");
      return;
    case LikelihoodFamily::Categorical: {
      std::size_t ones = 0;
      for (T v : x) {
        if (v == T(1)) ++ones;
        else if (v != T(0)) throw DomainError("categorical observation must be one-hot");
      }
      if (ones != 1) throw DomainError("categorical observation must be one-hot");
      return;
    }
  }
}

/// A(s) - s^T t(x), the per-observation loss without the base measure.
template <class T>
T nll_natural(LikelihoodFamily family, std::span<const T> s, std::span<const T> x, T sigma2 = 1) {
  if (s.size() != x.size()) throw DimensionError("nll: observation length mismatch");
  require_support(family, x);
  T lin = dot(s, x);
  if (family == LikelihoodFamily::Gaussian) lin /= sigma2;
  return log_normalizer(family, s, sigma2) - lin;
}

/// Categorical loss for a class index: logsumexp(s) - s[k].
template <class T>
T nll_index(std::span<const T> s, std::size_t k) {
  if (k >= s.size()) throw DomainError("categorical observation id out of range");
  return logsumexp(s) - s[k];
}

template <class T>
T nll(const LikelihoodHead<T>& head, const Tensor<T>& h, const Tensor<T>& x) {
  const Tensor<T> s = natural_param(head, h);
  return nll_natural<T>(head.family, s.values(), x.values(), head.sigma2);
}

/// -log nu(x), the base-measure term dropped by `nll`.
template <class T>
T neg_log_base_measure(LikelihoodFamily family, std::span<const T> x, T sigma2 = 1) {
  T acc = 0;
  switch (family) {
    case LikelihoodFamily::Poisson:
      for (T v : x) acc += std::lgamma(v + T(1));
      return acc;
    case LikelihoodFamily::Gaussian:
      for (T v : x) acc += v * v / (T(2) * sigma2);
      return acc + T(0.5) * static_cast<T>(x.size()) *
                       std::log(T(2) * std::numbers::pi_v<T> * sigma2);
    default: return 0;
  }
}

/// Full negative log-likelihood including the base measure.
template <class T>
T exact_nll(const LikelihoodHead<T>& head, const Tensor<T>& h, const Tensor<T>& x) {
  return nll(head, h, x) + neg_log_base_measure<T>(head.family, x.values(), head.sigma2);
}

/// Sum over rows of the per-observation loss for natural parameters
/// s [batch x output]. When `grad` is non-null it receives dLoss/ds.
template <class T>
T head_loss_rows(LikelihoodFamily family, T sigma2, const Tensor<T>& s,
                 const Observations<T>& obs, Tensor<T>* grad) {
  detail::require_matrix(s, "head loss");
  const std::size_t B = s.rows();
  if (obs.batch() != B) throw DimensionError("head loss: batch size mismatch");
  if (grad) *grad = Tensor<T>(s.shape());
  T total = 0;
  for (std::size_t r = 0; r < B; ++r) {
    auto sr = s.row(r);
    if (obs.indexed()) {
      if (family != LikelihoodFamily::Categorical) {
        throw DomainError("class-id observations require a categorical head");
      }
      total += nll_index<T>(sr, obs.ids[r]);
      if (grad) {
        auto p = mean_param<T>(family, sr, sigma2);
        auto g = grad->row(r);
        for (std::size_t j = 0; j < p.size(); ++j) g[j] = p[j];
        g[obs.ids[r]] -= T(1);
      }
    } else {
      if (obs.values.cols() != s.cols()) throw DimensionError("head loss: output size mismatch");
      auto xr = obs.values.row(r);
      total += nll_natural<T>(family, sr, xr, sigma2);
      if (grad) {
        auto p = mean_param<T>(family, sr, sigma2);
        auto g = grad->row(r);
        const T tscale = family == LikelihoodFamily::Gaussian ? T(1) / sigma2 : T(1);
        for (std::size_t j = 0; j < p.size(); ++j) g[j] = p[j] - xr[j] * tscale;
      }
    }
  }
  return total;
}

template <class T>
Tensor<T> head_nll(EagerOps<T>&, const Tensor<T>& s, LikelihoodFamily family, T sigma2,
                   const Observations<T>& obs) {
  return Tensor<T>::scalar(head_loss_rows<T>(family, sigma2, s, obs, nullptr));
}

template <class T>
Var head_nll(Tape<T>& tape, Var s, LikelihoodFamily family, T sigma2, const Observations<T>& obs) {
  const bool need_grad = tape.requires_grad(s);
  auto grad = std::make_shared<Tensor<T>>();
  const T total = head_loss_rows(family, sigma2, tape.value(s), obs, need_grad ? grad.get() : nullptr);
  return tape.record(Tensor<T>::scalar(total), {s}, [grad](Tape<T>& t, std::size_t self) {
    t.accumulate(t.parent(self, 0), scale(*grad, t.grad_at(self).item()));
  });
}

}  // namespace noisin
