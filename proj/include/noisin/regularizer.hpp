#pragma once

// Risk decomposition diagnostics: the noisy risk, its excess over the
// deterministic risk, and the second-order penalty
//   Reg = 1/2 sum_t tr E[Cov(B^T z_t | z_{t-1})],  B = V sqrt(Hess A(V^T h_t)).
//
// Risks are per sequence: summed over the steps of the window and averaged
// over batch rows.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "noisin/noisin.hpp"

namespace noisin {

/// Symmetric PSD square root by eigendecomposition. Eigenvalues in
/// [-tol * scale, 0) are clamped to zero; anything more negative means the
/// input was not PSD and raises DomainError.
template <class T>
Tensor<T> psd_sqrt(const Tensor<T>& M, double tol = 1e-12) {
  detail::require_matrix(M, "psd_sqrt");
  const std::size_t n = M.rows();
  if (M.cols() != n) throw DimensionError("psd_sqrt: matrix must be square");
  Eigen::MatrixXd A(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      A(i, j) = 0.5 * (static_cast<double>(M(i, j)) + static_cast<double>(M(j, i)));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A);
  if (eig.info() != Eigen::Success) throw NumericalError("psd_sqrt: eigendecomposition failed");
  Eigen::VectorXd ev = eig.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -tol * scale) {
      throw DomainError("psd_sqrt: matrix has eigenvalue " + std::to_string(ev(i)));
    }
    ev(i) = std::sqrt(std::max(0.0, ev(i)));
  }
  const Eigen::MatrixXd S = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
  Tensor<T> out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<T>(S(i, j));
  return out;
}

struct MeanEstimate {
  double mean = 0;
  double std_error = 0;
};

namespace detail {

/// Mean and standard error of `base + d_k`, computed on the deviations so
/// that all-zero deviations give exactly `base` and zero error.
inline MeanEstimate mean_with_error(const std::vector<double>& devs, double base = 0) {
  MeanEstimate e;
  const double n = static_cast<double>(devs.size());
  if (devs.empty()) return e;
  double s = 0;
  for (double d : devs) s += d;
  const double m = s / n;
  double ss = 0;
  for (double d : devs) ss += (d - m) * (d - m);
  e.mean = base + m;
  e.std_error = devs.size() > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0;
  return e;
}

template <class T>
Tensor<T> natural_params(const LikelihoodHead<T>& head, const Tensor<T>& z) {
  return add_row(matmul(z, head.V), head.bias);
}

/// Rows repeated `copies` times, block-wise: row (i * rows + r) = row r.
template <class T>
Tensor<T> tile_rows(const Tensor<T>& t, std::size_t copies) {
  if (t.size() == 0) return t;
  Tensor<T> out(Shape{t.rows() * copies, t.cols()});
  const std::size_t block = t.size();
  for (std::size_t i = 0; i < copies; ++i) std::copy_n(t.data(), block, out.data() + i * block);
  return out;
}

template <class T>
SequenceBatch<T> single_step(const SequenceBatch<T>& b, std::size_t t, std::size_t copies) {
  SequenceBatch<T> out;
  if (!b.input_ids.empty()) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < copies; ++i)
      ids.insert(ids.end(), b.input_ids[t].begin(), b.input_ids[t].end());
    out.input_ids.push_back(std::move(ids));
  }
  if (!b.inputs.empty()) out.inputs.push_back(tile_rows(b.inputs[t], copies));
  Observations<T> o;
  const auto& src = b.targets[t];
  for (std::size_t i = 0; i < copies; ++i) o.ids.insert(o.ids.end(), src.ids.begin(), src.ids.end());
  if (!src.indexed()) o.values = tile_rows(src.values, copies);
  out.targets.push_back(std::move(o));
  return out;
}

template <class T>
std::vector<RnnState<T>> tile_states(const std::vector<RnnState<T>>& s, std::size_t copies) {
  std::vector<RnnState<T>> out;
  for (const auto& st : s) out.push_back({tile_rows(st.h, copies), tile_rows(st.c, copies)});
  return out;
}

}  // namespace detail

struct EmpiricalRisk {
  double r_det = 0;
  MeanEstimate r_noisy;
  /// Literal excess risk, mean over rollouts of loss - r_det.
  MeanEstimate reg_empirical;
  /// Same expectation with the zero-mean first-order term removed:
  /// loss - r_det - sum_t (V^T(z_t - f_t))^T (grad A(s_f) - t(x_t)), f_t the
  /// top-layer cell output before injection.
  MeanEstimate reg_control;
  std::vector<double> per_step;  // mean excess loss per step
  std::size_t samples = 0;
};

inline constexpr std::size_t kMinRiskSamples = 1000;

/// Monte Carlo risk over `n_samples` independent noise rollouts (rollout k
/// uses the k-th split of `rng`). Dropout is not applied.
template <class T>
EmpiricalRisk empirical_risk(const NoisinModel<T>& model, const SequenceBatch<T>& batch,
                             const std::vector<RnnState<T>>& init, std::size_t n_samples,
                             Rng& rng) {
  if (n_samples < kMinRiskSamples) {
    throw std::invalid_argument("empirical_risk: need at least " +
                                std::to_string(kMinRiskSamples) + " samples");
  }
  const double rows = static_cast<double>(batch.batch());
  const auto det = deterministic_forward(model, batch, init);
  EmpiricalRisk out;
  out.samples = n_samples;
  out.r_det = static_cast<double>(det.objective.total) / rows;
  out.per_step.assign(batch.steps(), 0.0);

  std::vector<double> excess, control;
  excess.reserve(n_samples);
  control.reserve(n_samples);
  const bool noisy = model.noise.mode != InjectionMode::Off;
  for (std::size_t k = 0; k < n_samples; ++k) {
    Rng stream = rng.split();
    if (!noisy) {
      excess.push_back(0.0);
      control.push_back(0.0);
      continue;
    }
    const auto draws = draw_noise(model, batch.steps(), batch.batch(), stream, {true, false});
    const auto r = rollout(model, batch, init, &draws);
    double first_order = 0;
    for (std::size_t t = 0; t < batch.steps(); ++t) {
      const Tensor<T> s_pre = detail::natural_params(model.head, r.top_clean[t]);
      const Tensor<T> s_z = detail::natural_params(model.head, r.top[t]);
      Tensor<T> g;
      head_loss_rows<T>(model.head.family, model.head.sigma2, s_pre, batch.targets[t], &g);
      for (std::size_t i = 0; i < g.size(); ++i)
        first_order += static_cast<double>((s_z[i] - s_pre[i]) * g[i]);
      out.per_step[t] +=
          static_cast<double>(r.objective.step_losses[t] - det.objective.step_losses[t]);
    }
    const double d = static_cast<double>(r.objective.total - det.objective.total) / rows;
    excess.push_back(d);
    control.push_back(d - first_order / rows);
  }
  for (auto& v : out.per_step) v /= static_cast<double>(n_samples);
  out.r_noisy = detail::mean_with_error(excess, out.r_det);
  out.reg_empirical = detail::mean_with_error(excess);
  out.reg_control = detail::mean_with_error(control);
  return out;
}

struct TaylorReg {
  MeanEstimate value;
  std::vector<double> per_step;
  /// Largest Frobenius norm of sqrt(M)^2 - M over the evaluated Hessians.
  double sqrt_residual = 0;
};

inline constexpr std::size_t kMinInnerSamples = 64;

/// Two-level estimate of the second-order penalty. Each of `n_outer`
/// trajectories samples z_{1:T}; at every step `n_inner` fresh draws of eps_t
/// given that trajectory's z_{t-1} give the conditional covariance of B^T z_t.
/// The Hessian is taken at the deterministic network's state.
template <class T>
TaylorReg taylor_reg(const NoisinModel<T>& model, const SequenceBatch<T>& batch,
                     const std::vector<RnnState<T>>& init, std::size_t n_outer, Rng& rng,
                     std::size_t n_inner = kMinInnerSamples) {
  if (n_outer < 1) throw std::invalid_argument("taylor_reg: need at least one trajectory");
  if (n_inner < kMinInnerSamples) {
    throw std::invalid_argument("taylor_reg: inner sample size must be at least " +
                                std::to_string(kMinInnerSamples));
  }
  const std::size_t steps = batch.steps(), B = batch.batch(), out_dim = model.head.output();
  TaylorReg res;
  res.per_step.assign(steps, 0.0);
  if (model.noise.mode == InjectionMode::Off) {
    return res;
  }

  // B = V sqrt(Hess A) per step and batch row, at the deterministic state.
  const auto det = deterministic_forward(model, batch, init);
  std::vector<Tensor<T>> roots(steps * B);
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor<T> s = detail::natural_params(model.head, det.top[t]);
    for (std::size_t r = 0; r < B; ++r) {
      const Tensor<T> M = hessian_A<T>(model.head.family, s.row(r), model.head.sigma2);
      Tensor<T> S = psd_sqrt(M);
      res.sqrt_residual = std::max(res.sqrt_residual,
                                   static_cast<double>(frobenius_norm(sub(matmul(S, S), M))));
      roots[t * B + r] = std::move(S);
    }
  }

  EagerOps<T> ops;
  std::vector<double> per_traj;
  per_traj.reserve(n_outer);
  std::vector<double> y(n_inner * out_dim), mean(out_dim);
  for (std::size_t o = 0; o < n_outer; ++o) {
    Rng stream = rng.split();
    std::vector<RnnState<T>> states = init;
    double traj = 0;
    for (std::size_t t = 0; t < steps; ++t) {
      // Inner: n_inner fresh draws of eps_t from the same z_{t-1}.
      const auto step_batch = detail::single_step(batch, t, n_inner);
      const auto inner_draws = draw_noise(model, 1, B * n_inner, stream, {true, false});
      const auto inner = forward_window<T>(ops, model, view(model), step_batch,
                                           state_refs(detail::tile_states(states, n_inner)),
                                           &inner_draws);
      const Tensor<T> w = matmul(inner.top[0], model.head.V);  // rows: V^T z
      double step_trace = 0;
      for (std::size_t r = 0; r < B; ++r) {
        const Tensor<T>& S = roots[t * B + r];
        std::fill(mean.begin(), mean.end(), 0.0);
        for (std::size_t i = 0; i < n_inner; ++i) {
          const auto wr = w.row(i * B + r);
          for (std::size_t a = 0; a < out_dim; ++a) {
            double acc = 0;
            for (std::size_t c = 0; c < out_dim; ++c) acc += static_cast<double>(S(a, c) * wr[c]);
            y[i * out_dim + a] = acc;
            mean[a] += acc;
          }
        }
        for (auto& m : mean) m /= static_cast<double>(n_inner);
        double ss = 0;
        for (std::size_t i = 0; i < n_inner; ++i)
          for (std::size_t a = 0; a < out_dim; ++a) {
            const double d = y[i * out_dim + a] - mean[a];
            ss += d * d;
          }
        step_trace += ss / static_cast<double>(n_inner - 1);
      }
      const double contrib = 0.5 * step_trace / static_cast<double>(B);
      res.per_step[t] += contrib;
      traj += contrib;

      // Outer: advance this trajectory with its own draw of eps_t.
      const auto own = draw_noise(model, 1, B, stream, {true, false});
      auto next = forward_window<T>(ops, model, view(model), detail::single_step(batch, t, 1),
                                    state_refs(states), &own);
      states = to_states(next.final_states);
    }
    per_traj.push_back(traj);
  }
  for (auto& v : res.per_step) v /= static_cast<double>(n_outer);
  res.value = detail::mean_with_error(per_traj);
  return res;
}

struct RiskReport {
  double gamma = 0;
  NoiseFamily family = NoiseFamily::Gaussian;
  InjectionMode mode = InjectionMode::Off;
  InjectionSite site = InjectionSite::FinalOutput;
  double r_det = 0;
  MeanEstimate r_noisy;
  MeanEstimate reg_empirical;
  MeanEstimate reg_control;
  MeanEstimate reg_taylor;
  double sqrt_residual = 0;
  /// |reg_control - reg_taylor| / reg_taylor.
  double relative_gap = 0;
  /// reg_taylor is within the Monte Carlo noise of the comparison.
  bool inconclusive = false;
  /// Noise enters the recurrence, so the decomposition's conditions do not
  /// hold exactly.
  bool weak_caveat = false;
  std::vector<double> per_step_empirical;
  std::vector<double> per_step_taylor;
};

struct DecompositionOptions {
  std::size_t risk_samples = 20000;
  std::size_t outer_samples = 200;
  std::size_t inner_samples = kMinInnerSamples;
  /// Every gamma reuses this seed, so the runs share random numbers.
  std::uint64_t seed = 1111;
};

template <class T>
RiskReport risk_report(const NoisinModel<T>& model, const SequenceBatch<T>& batch,
                       const std::vector<RnnState<T>>& init, const DecompositionOptions& opt) {
  RiskReport rep;
  rep.gamma = model.noise.mode == InjectionMode::Off ? 0.0 : model.noise.gamma;
  rep.family = model.noise.family;
  rep.mode = model.noise.mode;
  rep.site = model.site;
  rep.weak_caveat = model.site == InjectionSite::EveryLayer && model.noise.mode != InjectionMode::Off;
  Rng risk_rng(opt.seed, 1), taylor_rng(opt.seed, 2);
  const auto emp = empirical_risk(model, batch, init, opt.risk_samples, risk_rng);
  const auto tay = taylor_reg(model, batch, init, opt.outer_samples, taylor_rng, opt.inner_samples);
  rep.r_det = emp.r_det;
  rep.r_noisy = emp.r_noisy;
  rep.reg_empirical = emp.reg_empirical;
  rep.reg_control = emp.reg_control;
  rep.reg_taylor = tay.value;
  rep.sqrt_residual = tay.sqrt_residual;
  rep.per_step_empirical = emp.per_step;
  rep.per_step_taylor = tay.per_step;
  const double noise_floor =
      3 * std::hypot(emp.reg_control.std_error, tay.value.std_error);
  if (rep.reg_taylor.mean > 0) {
    rep.relative_gap = std::abs(rep.reg_control.mean - rep.reg_taylor.mean) / rep.reg_taylor.mean;
  }
  rep.inconclusive = rep.reg_taylor.mean <= noise_floor;
  return rep;
}

/// One report per spread. A spread of zero switches the noise off.
template <class T>
std::vector<RiskReport> decomposition_check(const NoisinModel<T>& model,
                                            const SequenceBatch<T>& batch,
                                            const std::vector<RnnState<T>>& init,
                                            const std::vector<double>& gammas,
                                            const DecompositionOptions& opt = {}) {
  std::vector<RiskReport> out;
  for (double g : gammas) {
    NoisinModel<T> m = model;
    if (g == 0.0) {
      m.noise.mode = InjectionMode::Off;
    } else {
      m.noise.gamma = g;
      validate(m.noise);
    }
    out.push_back(risk_report(m, batch, init, opt));
  }
  return out;
}

inline constexpr const char* kRiskCsvHeader =
    "gamma,family,mode,r_det,r_noisy,stderr,reg_empirical,reg_taylor,"
    "reg_empirical_stderr,reg_control,reg_control_stderr,reg_taylor_stderr,"
    "relative_gap,site,inconclusive,weak_caveat";

inline void write_risk_csv(std::ostream& os, const std::vector<RiskReport>& rows,
                           bool header = true) {
  if (header) os << kRiskCsvHeader << '\n';
  const auto old = os.precision(17);
  for (const auto& r : rows) {
    os << r.gamma << ',' << to_string(r.family) << ',' << to_string(r.mode) << ',' << r.r_det
       << ',' << r.r_noisy.mean << ',' << r.r_noisy.std_error << ',' << r.reg_empirical.mean << ','
       << r.reg_taylor.mean << ',' << r.reg_empirical.std_error << ',' << r.reg_control.mean << ','
       << r.reg_control.std_error << ',' << r.reg_taylor.std_error << ',' << r.relative_gap << ','
       << to_string(r.site) << ',' << (r.inconclusive ? 1 : 0) << ','
       << (r.weak_caveat ? 1 : 0) << '\n';
  }
  os.precision(old);
}

}  // namespace noisin
