#pragma once

// Noise-injected recurrent language models: the model container, per-window
// noise draws, the noisy forward pass and its Monte Carlo objective, the
// truncated-BPTT training step, the unbiasedness check and the Jensen gap.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "noisin/expfam.hpp"
#include "noisin/noise.hpp"
#include "noisin/rng.hpp"
#include "noisin/rnn.hpp"
#include "noisin/tape.hpp"
#include "noisin/tensor.hpp"

namespace noisin {

/// Where noise enters the stack.
///  EveryLayer:  z_t = g(f(x, z_{t-1}), eps_t) at every layer; the noisy state
///               is carried forward and fed upward (weak unbiasedness).
///  FinalOutput: the recurrence stays clean and only the state handed to the
///               likelihood is perturbed (strong unbiasedness).
enum class InjectionSite { EveryLayer, FinalOutput };

inline std::string to_string(InjectionSite s) {
  return s == InjectionSite::EveryLayer ? "every-layer" : "final-output";
}

inline InjectionSite parse_injection_site(std::string_view s) {
  if (s == "every-layer") return InjectionSite::EveryLayer;
  if (s == "final-output" || s == "final") return InjectionSite::FinalOutput;
  throw std::invalid_argument("unknown injection site '" + std::string(s) + "'");
}

/// Drop probabilities for the gate-level dropout LSTM. `input` drives the
/// four input-side masks, `recurrent` the four hidden-side masks, `output`
/// a mask on the top layer's state before the likelihood.
struct DropoutRates {
  double input = 0;
  double recurrent = 0;
  double output = 0;
  /// Resample masks once per window instead of every step.
  bool per_sequence = false;
  /// Draw dropout masks from the noise stream instead of a separate one.
  bool shared_stream = false;

  bool gates_active() const { return input > 0 || recurrent > 0; }
  bool any() const { return gates_active() || output > 0; }
};

template <class T>
struct NoisinModel {
  Tensor<T> embedding;  // [vocab x dim]; empty when inputs are dense vectors
  std::vector<CellParams<T>> layers;
  LikelihoodHead<T> head;
  NoiseSpec noise = NoiseSpec::off();
  std::size_t mc_samples = 1;
  InjectionSite site = InjectionSite::EveryLayer;
  DropoutRates dropout;

  bool token_inputs() const { return embedding.size() > 0; }
  std::size_t hidden() const { return layers.back().hidden_size; }
  CellKind kind() const { return layers.front().kind; }

  /// Every trainable tensor, in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    if (token_inputs()) out.emplace_back("embedding", &embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (std::size_t g = 0; g < layers[l].gates.size(); ++g) {
        const std::string p = "layer" + std::to_string(l) + "." + kGateNames[g] + ".";
        out.emplace_back(p + "wx", &layers[l].gates[g].wx);
        out.emplace_back(p + "wh", &layers[l].gates[g].wh);
        out.emplace_back(p + "b", &layers[l].gates[g].b);
      }
    }
    out.emplace_back("head.V", &head.V);
    out.emplace_back("head.b", &head.bias);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> named_parameters() const {
    auto mut = const_cast<NoisinModel*>(this)->named_parameters();
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [n, p] : mut) out.emplace_back(n, p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : named_parameters()) n += p->size();
    return n;
  }

  void validate() const {
    if (layers.empty()) throw DimensionError("model needs at least one layer");
    if (mc_samples < 1) throw std::invalid_argument("mc_samples must be >= 1");
    validate_noise();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].validate();
      if (l > 0 && layers[l].input_size != layers[l - 1].hidden_size) {
        throw DimensionError("layer " + std::to_string(l) + " input does not match layer below");
      }
    }
    if (token_inputs() && embedding.cols() != layers.front().input_size) {
      throw DimensionError("embedding width does not match the first layer");
    }
    if (head.V.rank() != 2 || head.hidden() != hidden() || head.bias.size() != head.output()) {
      throw DimensionError("likelihood head does not match the top layer");
    }
  }

  void validate_noise() const { noisin::validate(noise); }

  std::vector<RnnState<T>> zero_states(std::size_t batch) const {
    std::vector<RnnState<T>> s;
    for (const auto& l : layers) s.push_back(RnnState<T>::zeros(l.kind, batch, l.hidden_size));
    return s;
  }

  /// Stack of `num_layers` cells with embedding dim = hidden, weights drawn
  /// as in the reference training recipe: embedding U[-0.1, 0.1], all other
  /// weights U[-1/sqrt(H), 1/sqrt(H)], biases zero.
  static NoisinModel language_model(CellKind kind, std::size_t vocab, std::size_t hidden,
                                    std::size_t num_layers, Rng& rng) {
    NoisinModel m;
    m.embedding = Tensor<T>(Shape{vocab, hidden});
    for (auto& v : m.embedding.values()) v = static_cast<T>(0.1 * (2 * rng.uniform() - 1));
    for (std::size_t l = 0; l < num_layers; ++l)
      m.layers.push_back(CellParams<T>::uniform(kind, hidden, hidden, rng));
    Tensor<T> V(Shape{hidden, vocab});
    const double a = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (auto& v : V.values()) v = static_cast<T>(a * (2 * rng.uniform() - 1));
    m.head = LikelihoodHead<T>::make(LikelihoodFamily::Categorical, std::move(V));
    return m;
  }
};

/// One window of data: T steps of a batch of B sequences.
template <class T>
struct SequenceBatch {
  std::vector<std::vector<std::size_t>> input_ids;  // T x B, token models
  std::vector<Tensor<T>> inputs;                    // T x [B x input], dense models
  std::vector<Observations<T>> targets;             // T

  std::size_t steps() const { return targets.size(); }
  std::size_t batch() const { return targets.empty() ? 0 : targets.front().batch(); }
  std::size_t tokens() const { return steps() * batch(); }
};

/// Every random quantity consumed by one rollout of one window. Empty
/// tensors mean "nothing applied" at that position.
template <class T>
struct NoiseDraws {
  std::size_t layers = 0;
  std::vector<Tensor<T>> injection;           // index t * layers + l
  std::vector<std::vector<Tensor<T>>> masks;  // index t * layers + l; 2 * gates each
  std::vector<Tensor<T>> output_masks;        // index t
};

struct DrawOptions {
  bool noise = true;
  bool dropout = true;
};

/// Draws injection noise (stream A) and dropout masks (stream B, unless the
/// model shares streams) for a window. Order within a stream: time-major,
/// then layer, then row-major elements.
template <class T>
NoiseDraws<T> draw_noise(const NoisinModel<T>& model, std::size_t steps, std::size_t batch,
                         Rng& rng, DrawOptions opt = {}) {
  NoiseDraws<T> d;
  const std::size_t L = model.layers.size();
  d.layers = L;
  d.injection.resize(steps * L);
  d.masks.resize(steps * L);
  d.output_masks.resize(steps);
  Rng noise_rng = rng.split();
  Rng mask_stream = model.dropout.shared_stream ? noise_rng : rng.split();
  Rng& mask_rng = model.dropout.shared_stream ? noise_rng : mask_stream;

  const bool noisy = opt.noise && model.noise.mode != InjectionMode::Off;
  const bool gates = opt.dropout && model.dropout.gates_active();
  const bool outdrop = opt.dropout && model.dropout.output > 0;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t H = model.layers[l].hidden_size;
      const bool here = model.site == InjectionSite::EveryLayer || l + 1 == L;
      if (noisy && here) {
        d.injection[t * L + l] = sample_injection<T>(model.noise, Shape{batch, H}, noise_rng);
      }
      if (gates) {
        if (model.dropout.per_sequence && t > 0) {
          d.masks[t * L + l] = d.masks[l];
        } else {
          const std::size_t G = model.layers[l].gates.size();
          auto& m = d.masks[t * L + l];
          for (std::size_t k = 0; k < 2 * G; ++k) {
            const double rate = k < G ? model.dropout.input : model.dropout.recurrent;
            m.push_back(DropoutMasks<T>::bernoulli_mask(1.0 - rate, Shape{batch, H}, mask_rng, true));
          }
        }
      }
    }
    if (outdrop) {
      if (model.dropout.per_sequence && t > 0) {
        d.output_masks[t] = d.output_masks[0];
      } else {
        d.output_masks[t] = DropoutMasks<T>::bernoulli_mask(
            1.0 - model.dropout.output, Shape{batch, model.hidden()}, mask_rng, true);
      }
    }
  }
  return d;
}

/// g(f_out, eps): f_out + eps, f_out * eps, or f_out unchanged.
template <class Ops, class V>
V inject(Ops& ops, InjectionMode mode, const V& f_out, const V& eps) {
  switch (mode) {
    case InjectionMode::Additive: return ops.add(f_out, eps);
    case InjectionMode::Multiplicative: return ops.mul(f_out, eps);
    case InjectionMode::Off: return f_out;
  }
  return f_out;
}

template <class T>
Tensor<T> inject(const NoiseSpec& spec, const Tensor<T>& f_out, const Tensor<T>& eps_inj) {
  if (spec.mode != InjectionMode::Off && f_out.shape() != eps_inj.shape()) {
    throw DimensionError("inject: noise shape " + shape_str(eps_inj.shape()) +
                         " does not match state " + shape_str(f_out.shape()));
  }
  EagerOps<T> ops;
  return inject(ops, spec.mode, f_out, eps_inj);
}

/// Parameter handles for generic evaluation.
template <class V>
struct ModelRef {
  const V* embedding = nullptr;
  std::vector<CellRef<V>> cells;
  const V* head_v = nullptr;
  const V* head_b = nullptr;
};

template <class T>
ModelRef<Tensor<T>> view(const NoisinModel<T>& m) {
  ModelRef<Tensor<T>> r;
  if (m.token_inputs()) r.embedding = &m.embedding;
  for (const auto& c : m.layers) r.cells.push_back(view(c));
  r.head_v = &m.head.V;
  r.head_b = &m.head.bias;
  return r;
}

/// Tape leaves for every model parameter, in `named_parameters()` order.
template <class T>
struct TapeBinding {
  std::vector<Var> vars;
  ModelRef<Var> ref;

  TapeBinding(Tape<T>& tape, NoisinModel<T>& model) {
    auto params = model.named_parameters();
    vars.reserve(params.size());
    for (auto& [name, p] : params) vars.push_back(tape.leaf(*p, true));
    std::size_t k = 0;
    if (model.token_inputs()) ref.embedding = &vars[k++];
    for (const auto& c : model.layers) {
      CellRef<Var> cr{c.kind, {}};
      for (std::size_t g = 0; g < c.gates.size(); ++g, k += 3)
        cr.gates.push_back({&vars[k], &vars[k + 1], &vars[k + 2]});
      ref.cells.push_back(std::move(cr));
    }
    ref.head_v = &vars[k];
    ref.head_b = &vars[k + 1];
  }
};

template <class V>
struct WindowResult {
  V loss_sum;                        // summed loss over steps and batch rows
  std::vector<V> step_losses;        // summed over batch rows
  std::vector<V> top;                // emitted top-layer state per step
  std::vector<V> top_clean;          // top-layer cell output before injection
  std::vector<StateRef<V>> final_states;
};

/// Forward pass over one window under the given draws (null = deterministic).
template <class T, class Ops, class V = typename Ops::Value>
WindowResult<V> forward_window(Ops& ops, const NoisinModel<T>& model, const ModelRef<V>& ref,
                               const SequenceBatch<T>& batch, std::vector<StateRef<V>> states,
                               const NoiseDraws<T>* draws) {
  const std::size_t steps = batch.steps();
  const std::size_t L = model.layers.size();
  if (steps == 0) throw DimensionError("forward: empty window");

  std::vector<V> inputs;
  inputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    if (model.token_inputs()) {
      inputs.push_back(ops.gather_rows(*ref.embedding, batch.input_ids.at(t)));
    } else {
      inputs.push_back(ops.constant(batch.inputs.at(t)));
    }
  }

  std::vector<V> eps(steps * L);
  std::vector<std::vector<V>> mask_values(steps * L);
  if (draws) {
    for (std::size_t i = 0; i < steps * L; ++i) {
      if (draws->injection[i].size() > 0) eps[i] = ops.constant(draws->injection[i]);
      for (const auto& m : draws->masks[i]) mask_values[i].push_back(ops.constant(m));
    }
  }

  WindowResult<V> res;
  const InjectionMode mode = model.noise.mode;
  auto hook = [&](Ops& o, std::size_t t, std::size_t l, const V& h) -> LayerOutput<V> {
    if (l + 1 == L) res.top_clean.push_back(h);
    if (!draws || draws->injection[t * L + l].size() == 0) return {h, h};
    V z = inject(o, mode, h, eps[t * L + l]);
    if (model.site == InjectionSite::FinalOutput) return {h, z};
    return {z, z};
  };
  auto masks = [&](std::size_t t, std::size_t l) -> std::span<const V> {
    return mask_values[t * L + l];
  };
  res.top = unroll<Ops, V>(ops, ref.cells, inputs, states, hook, masks);
  res.final_states = std::move(states);

  for (std::size_t t = 0; t < steps; ++t) {
    V z = res.top[t];
    if (draws && draws->output_masks[t].size() > 0) {
      z = ops.mul(z, ops.constant(draws->output_masks[t]));
    }
    V s = ops.add_row(ops.matmul(z, *ref.head_v), *ref.head_b);
    V lt = head_nll(ops, s, model.head.family, model.head.sigma2, batch.targets[t]);
    res.step_losses.push_back(lt);
    res.loss_sum = t == 0 ? lt : ops.add(res.loss_sum, lt);
  }
  return res;
}

template <class T>
std::vector<StateRef<Tensor<T>>> state_refs(const std::vector<RnnState<T>>& s) {
  std::vector<StateRef<Tensor<T>>> out;
  for (const auto& st : s) out.push_back({st.h, st.c});
  return out;
}

template <class T>
std::vector<RnnState<T>> to_states(const std::vector<StateRef<Tensor<T>>>& s) {
  std::vector<RnnState<T>> out;
  for (const auto& st : s) out.push_back({st.h, st.c});
  return out;
}

/// Per-token objective value. `loss` is the mean over steps and batch rows;
/// for categorical heads the perplexity is exp(loss).
template <class T>
struct ObjectiveValue {
  T loss = 0;
  T total = 0;
  std::vector<T> step_losses;  // per-token mean at each step
  std::size_t tokens = 0;

  T perplexity() const { return std::exp(loss); }
};

template <class T>
struct RolloutResult {
  ObjectiveValue<T> objective;
  std::vector<Tensor<T>> top;  // emitted top-layer states
  std::vector<Tensor<T>> top_clean;
  std::vector<RnnState<T>> final_states;
};

/// One eager rollout; `draws` may be null for the deterministic network.
template <class T>
RolloutResult<T> rollout(const NoisinModel<T>& model, const SequenceBatch<T>& batch,
                         const std::vector<RnnState<T>>& init, const NoiseDraws<T>* draws) {
  EagerOps<T> ops;
  auto res = forward_window<T>(ops, model, view(model), batch, state_refs(init), draws);
  RolloutResult<T> out;
  const T B = static_cast<T>(batch.batch());
  out.objective.tokens = batch.tokens();
  out.objective.total = res.loss_sum.item();
  out.objective.loss = out.objective.total / static_cast<T>(batch.tokens());
  for (const auto& l : res.step_losses) out.objective.step_losses.push_back(l.item() / B);
  out.top = std::move(res.top);
  out.top_clean = std::move(res.top_clean);
  out.final_states = to_states(res.final_states);
  return out;
}

/// The noise-free network's loss.
template <class T>
RolloutResult<T> deterministic_forward(const NoisinModel<T>& model, const SequenceBatch<T>& batch,
                                       const std::vector<RnnState<T>>& init) {
  return rollout<T>(model, batch, init, nullptr);
}

/// Monte Carlo objective over K = model.mc_samples rollouts. Rollout k uses
/// the k-th `rng.split()` stream. Reported states are those of rollout 0.
template <class T>
RolloutResult<T> noisy_forward(const NoisinModel<T>& model, const SequenceBatch<T>& batch,
                               const std::vector<RnnState<T>>& init, Rng& rng,
                               DrawOptions opt = {}) {
  const std::size_t K = model.mc_samples;
  RolloutResult<T> first;
  std::vector<ObjectiveValue<T>> objs;
  for (std::size_t k = 0; k < K; ++k) {
    Rng stream = rng.split();
    auto draws = draw_noise(model, batch.steps(), batch.batch(), stream, opt);
    auto r = rollout<T>(model, batch, init, &draws);
    objs.push_back(r.objective);
    if (k == 0) first = std::move(r);
  }
  if (K == 1) return first;
  ObjectiveValue<T> avg;
  avg.tokens = first.objective.tokens;
  avg.step_losses.assign(first.objective.step_losses.size(), T(0));
  for (const auto& o : objs) {
    avg.total += o.total;
    for (std::size_t t = 0; t < o.step_losses.size(); ++t) avg.step_losses[t] += o.step_losses[t];
  }
  avg.total /= static_cast<T>(K);
  for (auto& v : avg.step_losses) v /= static_cast<T>(K);
  avg.loss = avg.total / static_cast<T>(avg.tokens);
  first.objective = avg;
  return first;
}

// ---- optimization --------------------------------------------------------------

/// Plain SGD with optional iterate averaging. Once averaging starts, the
/// running mean of the iterates after each update is maintained.
template <class T>
class Sgd {
 public:
  void update(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, T lr) {
    if (params.size() != grads.size()) throw DimensionError("optimizer: gradient count");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      const Tensor<T>& g = grads[i];
      detail::require_same_shape(p, g, "optimizer update");
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
    if (averaging_) {
      ++count_;
      if (average_.empty()) {
        for (auto* p : params) average_.push_back(*p);
      } else {
        const T w = T(1) / static_cast<T>(count_);
        for (std::size_t i = 0; i < params.size(); ++i)
          for (std::size_t j = 0; j < params[i]->size(); ++j)
            average_[i][j] += w * ((*params[i])[j] - average_[i][j]);
      }
    }
  }

  void start_averaging() { averaging_ = true; }
  bool averaging() const { return averaging_ && !average_.empty(); }
  const std::vector<Tensor<T>>& averaged() const { return average_; }

 private:
  bool averaging_ = false;
  std::size_t count_ = 0;
  std::vector<Tensor<T>> average_;
};

template <class T>
struct StepResult {
  T loss = 0;       // per-token Monte Carlo objective before the update
  T grad_norm = 0;  // global norm before clipping
  bool clipped = false;
};

/// Loss and gradients of the K-sample objective on a tape with the carried
/// states detached. `carry` is replaced by rollout 0's final states.
template <class T>
struct LossAndGrad {
  T loss = 0;
  std::vector<Tensor<T>> grads;
  std::vector<RnnState<T>> final_states;
};

template <class T>
LossAndGrad<T> loss_and_grad(NoisinModel<T>& model, const SequenceBatch<T>& batch,
                             const std::vector<RnnState<T>>& carry,
                             const std::vector<NoiseDraws<T>>& draws) {
  Tape<T> tape;
  TapeBinding<T> bind(tape, model);
  const std::size_t K = draws.size();
  if (K == 0) throw std::invalid_argument("loss_and_grad: need at least one rollout");
  Var total;
  LossAndGrad<T> out;
  const T inv = T(1) / static_cast<T>(K * batch.tokens());
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<StateRef<Var>> init;
    for (const auto& s : carry) {
      init.push_back({tape.constant(s.h), s.c.size() > 0 ? tape.constant(s.c) : Var{}});
    }
    auto res = forward_window<T>(tape, model, bind.ref, batch, std::move(init), &draws[k]);
    total = k == 0 ? res.loss_sum : tape.add(total, res.loss_sum);
    if (k == 0) {
      for (const auto& s : res.final_states) {
        out.final_states.push_back({tape.value(s.h), s.c.valid() ? tape.value(s.c) : Tensor<T>()});
      }
    }
  }
  Var loss = tape.scale(total, inv);
  out.loss = tape.value(loss).item();
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite training loss");
  tape.backward(loss);
  for (Var v : bind.vars) out.grads.push_back(tape.grad(v));
  return out;
}

template <class T>
T global_norm(const std::vector<Tensor<T>>& grads) {
  T acc = 0;
  for (const auto& g : grads)
    for (T v : g.values()) acc += v * v;
  return std::sqrt(acc);
}

/// Rescales gradients to norm `clip_norm` when their global norm exceeds it.
/// Returns the norm before clipping.
template <class T>
T clip_global_norm(std::vector<Tensor<T>>& grads, T clip_norm) {
  const T norm = global_norm(grads);
  if (clip_norm > 0 && norm > clip_norm) {
    const T c = clip_norm / norm;
    for (auto& g : grads)
      for (auto& v : g.values()) v *= c;
  }
  return norm;
}

/// One noisy forward, one backward, clipping and an SGD update.
template <class T>
StepResult<T> train_step(NoisinModel<T>& model, const SequenceBatch<T>& batch,
                         std::vector<RnnState<T>>& carry, Sgd<T>& opt, T clip_norm, T lr,
                         Rng& rng) {
  std::vector<NoiseDraws<T>> draws;
  for (std::size_t k = 0; k < model.mc_samples; ++k) {
    Rng stream = rng.split();
    draws.push_back(draw_noise(model, batch.steps(), batch.batch(), stream));
  }
  auto lg = loss_and_grad(model, batch, carry, draws);
  StepResult<T> r;
  r.loss = lg.loss;
  r.grad_norm = clip_global_norm(lg.grads, clip_norm);
  r.clipped = clip_norm > 0 && r.grad_norm > clip_norm;
  if (!std::isfinite(r.grad_norm)) throw NumericalError("non-finite gradient norm");
  std::vector<Tensor<T>*> params;
  for (auto& [name, p] : model.named_parameters()) params.push_back(p);
  opt.update(params, lg.grads, lr);
  carry = std::move(lg.final_states);
  return r;
}

// ---- unbiasedness ---------------------------------------------------------------

struct UnbiasednessReport {
  std::vector<double> reference;  // f_W(x_{t-1}, z_{t-1})
  std::vector<double> mc_mean;    // Monte Carlo mean of z_t
  std::vector<double> z_scores;   // (mc_mean - reference) / standard error
  double max_abs_z = 0;
  std::size_t samples = 0;
  bool violated = false;
};

inline constexpr std::size_t kMinUnbiasednessSamples = 10000;

/// How the noisy transition is formed for the check.
struct NoisyTransition {
  NoiseSpec noise = NoiseSpec::off();
  /// Gate-level dropout drop probabilities (0 = no masks).
  double drop_input = 0;
  double drop_recurrent = 0;
};

/// Monte Carlo test of E[z_t | z_{t-1}] = f_W(x_{t-1}, z_{t-1}) for one cell.
/// `x_prev` is [1 x input] and `z_prev` holds [1 x hidden] states.
template <class T>
UnbiasednessReport check_unbiasedness(const CellParams<T>& cell, const NoisyTransition& tr,
                                      const Tensor<T>& x_prev, const RnnState<T>& z_prev,
                                      std::size_t n_samples, Rng& rng, double threshold = 4.0) {
  if (n_samples < kMinUnbiasednessSamples) {
    throw std::invalid_argument("check_unbiasedness: need at least " +
                                std::to_string(kMinUnbiasednessSamples) + " samples");
  }
  validate(tr.noise);
  const std::size_t H = cell.hidden_size;
  EagerOps<T> ops;
  const auto ref_cell = view(cell);
  const auto det = cell_step<EagerOps<T>, Tensor<T>>(ops, ref_cell, x_prev, {z_prev.h, z_prev.c});

  UnbiasednessReport rep;
  rep.samples = n_samples;
  rep.reference.assign(det.h.values().begin(), det.h.values().end());
  std::vector<double> sum(H, 0.0), sumsq(H, 0.0);

  const std::size_t chunk = std::min<std::size_t>(n_samples, 4096);
  auto tile = [](const Tensor<T>& row, std::size_t n) {
    Tensor<T> out(Shape{n, row.cols()});
    for (std::size_t i = 0; i < n; ++i) std::copy_n(row.data(), row.cols(), out.data() + i * row.cols());
    return out;
  };
  const bool masked = tr.drop_input > 0 || tr.drop_recurrent > 0;
  const std::size_t G = cell.gates.size();
  for (std::size_t done = 0; done < n_samples; done += chunk) {
    const std::size_t n = std::min(chunk, n_samples - done);
    const Tensor<T> x = tile(x_prev, n);
    StateRef<Tensor<T>> st{tile(z_prev.h, n), z_prev.c.size() > 0 ? tile(z_prev.c, n) : Tensor<T>()};
    std::vector<Tensor<T>> masks;
    if (masked) {
      for (std::size_t k = 0; k < 2 * G; ++k) {
        const double rate = k < G ? tr.drop_input : tr.drop_recurrent;
        masks.push_back(DropoutMasks<T>::bernoulli_mask(1.0 - rate, Shape{n, H}, rng, true));
      }
    }
    auto next = cell_step<EagerOps<T>, Tensor<T>>(ops, ref_cell, x, st, masks);
    Tensor<T> z = next.h;
    if (tr.noise.mode != InjectionMode::Off) {
      z = inject(tr.noise, z, sample_injection<T>(tr.noise, Shape{n, H}, rng));
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < H; ++j) {
        const double d = static_cast<double>(z(i, j)) - rep.reference[j];
        sum[j] += d;
        sumsq[j] += d * d;
      }
    }
  }
  const double N = static_cast<double>(n_samples);
  for (std::size_t j = 0; j < H; ++j) {
    const double mean_dev = sum[j] / N;
    const double var = std::max(0.0, (sumsq[j] - N * mean_dev * mean_dev) / (N - 1));
    const double se = std::sqrt(var / N);
    double z;
    if (se > 0) z = mean_dev / se;
    else z = mean_dev == 0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean_dev);
    rep.mc_mean.push_back(rep.reference[j] + mean_dev);
    rep.z_scores.push_back(z);
    rep.max_abs_z = std::max(rep.max_abs_z, std::abs(z));
  }
  rep.violated = rep.max_abs_z > threshold;
  return rep;
}

/// Model-level form: checks the first layer's noisy transition (Noisin noise
/// and, when configured, its gate dropout masks).
template <class T>
UnbiasednessReport check_unbiasedness(const NoisinModel<T>& model, const Tensor<T>& x_prev,
                                      const RnnState<T>& z_prev, std::size_t n_samples, Rng& rng,
                                      double threshold = 4.0) {
  NoisyTransition tr;
  tr.noise = model.noise;
  tr.drop_input = model.dropout.input;
  tr.drop_recurrent = model.dropout.recurrent;
  return check_unbiasedness(model.layers.front(), tr, x_prev, z_prev, n_samples, rng, threshold);
}

// ---- Jensen bound ---------------------------------------------------------------

template <class T>
struct JensenGap {
  T bound = 0;           // mean over rollouts of log p(x | z^(k))
  T log_mean_exp = 0;    // log (1/K) sum_k p(x | z^(k))
  T gap = 0;             // log_mean_exp - bound >= 0
  std::vector<T> log_likelihoods;
};

/// Jensen gap over an explicit sample of log-likelihoods. Computed relative
/// to the maximum so identical samples give a gap of exactly zero.
template <class T>
JensenGap<T> jensen_gap_from(std::vector<T> log_liks) {
  if (log_liks.size() < 2) throw std::invalid_argument("jensen_gap: need K >= 2");
  JensenGap<T> g;
  const T m = *std::max_element(log_liks.begin(), log_liks.end());
  T mean_dev = 0, sum_exp = 0;
  for (T l : log_liks) {
    mean_dev += l - m;
    sum_exp += std::exp(l - m);
  }
  const T K = static_cast<T>(log_liks.size());
  mean_dev /= K;
  const T lme_dev = std::log(sum_exp) - std::log(K);
  g.bound = m + mean_dev;
  g.log_mean_exp = m + lme_dev;
  g.gap = lme_dev - mean_dev;
  g.log_likelihoods = std::move(log_liks);
  return g;
}

/// K independent noise rollouts of the window (noise and dropout as in
/// training); the log-likelihood of a rollout is minus its summed loss.
template <class T>
JensenGap<T> jensen_gap(const NoisinModel<T>& model, const SequenceBatch<T>& batch,
                        const std::vector<RnnState<T>>& init, std::size_t K, Rng& rng) {
  if (K < 2) throw std::invalid_argument("jensen_gap: need K >= 2");
  std::vector<T> ll;
  for (std::size_t k = 0; k < K; ++k) {
    Rng stream = rng.split();
    auto draws = draw_noise(model, batch.steps(), batch.batch(), stream);
    ll.push_back(-rollout<T>(model, batch, init, &draws).objective.total);
  }
  return jensen_gap_from(std::move(ll));
}

}  // namespace noisin
