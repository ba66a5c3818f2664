#pragma once

// Elman and LSTM cells, layer stacking and the gate-level dropout LSTM.
//
// Cells are written once against a generic op set (`EagerOps` or `Tape`), so
// the eager reference path and the differentiable training path perform the
// same floating-point operations in the same order.
//
// Batched convention: states and inputs are row-major [batch x features] and
// a gate pre-activation is x * W_x + h * W_h + b.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "noisin/rng.hpp"
#include "noisin/tape.hpp"
#include "noisin/tensor.hpp"

namespace noisin {

enum class CellKind { ErnnSigmoid, ErnnTanh, Lstm };

inline std::string to_string(CellKind k) {
  switch (k) {
    case CellKind::ErnnSigmoid: return "ernn-sigmoid";
    case CellKind::ErnnTanh: return "ernn-tanh";
    case CellKind::Lstm: return "lstm";
  }
  return "?";
}

inline CellKind parse_cell_kind(std::string_view s) {
  if (s == "ernn-sigmoid") return CellKind::ErnnSigmoid;
  if (s == "ernn-tanh" || s == "ernn") return CellKind::ErnnTanh;
  if (s == "lstm") return CellKind::Lstm;
  throw std::invalid_argument("unknown cell kind '" + std::string(s) + "'");
}

inline std::size_t gate_count(CellKind k) { return k == CellKind::Lstm ? 4 : 1; }

/// LSTM gate order; an Elman cell has the single gate 0.
enum Gate : std::size_t { kForget = 0, kInputGate = 1, kOutputGate = 2, kCandidate = 3 };

inline constexpr const char* kGateNames[] = {"f", "i", "o", "c"};

template <class T>
struct GateParams {
  Tensor<T> wx;  // [input x hidden]
  Tensor<T> wh;  // [hidden x hidden]
  Tensor<T> b;   // [hidden]
};

template <class T>
struct CellParams {
  CellKind kind = CellKind::Lstm;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  std::vector<GateParams<T>> gates;

  static CellParams zeros(CellKind kind, std::size_t input, std::size_t hidden) {
    CellParams p{kind, input, hidden, {}};
    for (std::size_t g = 0; g < gate_count(kind); ++g) {
      p.gates.push_back({Tensor<T>(Shape{input, hidden}), Tensor<T>(Shape{hidden, hidden}),
                         Tensor<T>(Shape{hidden})});
    }
    return p;
  }

  /// Weights uniform on [-1/sqrt(H), 1/sqrt(H)], biases zero.
  static CellParams uniform(CellKind kind, std::size_t input, std::size_t hidden, Rng& rng) {
    CellParams p = zeros(kind, input, hidden);
    const double a = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (auto& g : p.gates) {
      for (auto& v : g.wx.values()) v = static_cast<T>(a * (2 * rng.uniform() - 1));
      for (auto& v : g.wh.values()) v = static_cast<T>(a * (2 * rng.uniform() - 1));
    }
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : gates) n += g.wx.size() + g.wh.size() + g.b.size();
    return n;
  }

  void validate() const {
    if (gates.size() != gate_count(kind)) {
      throw DimensionError(to_string(kind) + " cell needs " + std::to_string(gate_count(kind)) +
                           " gate parameter sets, got " + std::to_string(gates.size()));
    }
    for (const auto& g : gates) {
      if (g.wx.shape() != Shape{input_size, hidden_size} ||
          g.wh.shape() != Shape{hidden_size, hidden_size} || g.b.shape() != Shape{hidden_size}) {
        throw DimensionError("cell gate parameters have inconsistent shapes");
      }
      for (const auto* t : {&g.wx, &g.wh, &g.b}) require_finite(*t, "cell parameters");
    }
  }
};

template <class T>
struct RnnState {
  Tensor<T> h;  // [batch x hidden]
  Tensor<T> c;  // [batch x hidden], LSTM only

  static RnnState zeros(CellKind kind, std::size_t batch, std::size_t hidden) {
    RnnState s{Tensor<T>(Shape{batch, hidden}), {}};
    if (kind == CellKind::Lstm) s.c = Tensor<T>(Shape{batch, hidden});
    return s;
  }
};

/// The eight Bernoulli masks of the gate-level dropout LSTM, ordered
/// xf, xi, xo, xc, hf, hi, ho, hc. Each gates one [batch x hidden] matrix
/// product. With inverted scaling a kept entry holds 1/keep.
template <class T>
struct DropoutMasks {
  std::array<Tensor<T>, 8> masks;
  double keep_x = 1.0;
  double keep_h = 1.0;
  bool inverted = true;

  static DropoutMasks ones(std::size_t batch, std::size_t hidden) {
    DropoutMasks m;
    for (auto& t : m.masks) t = Tensor<T>(Shape{batch, hidden}, T(1));
    return m;
  }

  static DropoutMasks sample(double keep_x, double keep_h, std::size_t batch, std::size_t hidden,
                             Rng& rng, bool inverted = true) {
    DropoutMasks m{{}, keep_x, keep_h, inverted};
    for (std::size_t k = 0; k < 8; ++k) {
      m.masks[k] = bernoulli_mask(k < 4 ? keep_x : keep_h, Shape{batch, hidden}, rng, inverted);
    }
    return m;
  }

  /// Evaluation-time masks: identity under inverted scaling, keep otherwise.
  static DropoutMasks eval(double keep_x, double keep_h, std::size_t batch, std::size_t hidden,
                           bool inverted = true) {
    DropoutMasks m{{}, keep_x, keep_h, inverted};
    for (std::size_t k = 0; k < 8; ++k) {
      const double keep = k < 4 ? keep_x : keep_h;
      m.masks[k] = Tensor<T>(Shape{batch, hidden}, inverted ? T(1) : static_cast<T>(keep));
    }
    return m;
  }

  static Tensor<T> bernoulli_mask(double keep, const Shape& shape, Rng& rng, bool inverted) {
    if (!(keep > 0 && keep <= 1)) throw DomainError("dropout keep probability must be in (0, 1]");
    Tensor<T> t(shape, T(1));
    if (keep == 1.0) return t;
    const T on = inverted ? static_cast<T>(1.0 / keep) : T(1);
    for (auto& v : t.values()) v = rng.uniform() < keep ? on : T(0);
    return t;
  }
};

// ---- generic cell code ------------------------------------------------------

template <class V>
struct GateRef {
  const V* wx;
  const V* wh;
  const V* b;
};

template <class V>
struct CellRef {
  CellKind kind;
  std::vector<GateRef<V>> gates;
};

template <class V>
struct StateRef {
  V h;
  V c;
};

template <class T>
CellRef<Tensor<T>> view(const CellParams<T>& p) {
  CellRef<Tensor<T>> r{p.kind, {}};
  for (const auto& g : p.gates) r.gates.push_back({&g.wx, &g.wh, &g.b});
  return r;
}

/// x*W_x (optionally masked) + h*W_h (optionally masked) + b.
template <class Ops, class V>
V gate_preactivation(Ops& ops, const GateRef<V>& g, const V& x, const V& h, const V* mask_x,
                     const V* mask_h) {
  V xs = ops.matmul(x, *g.wx);
  if (mask_x) xs = ops.mul(xs, *mask_x);
  V hs = ops.matmul(h, *g.wh);
  if (mask_h) hs = ops.mul(hs, *mask_h);
  return ops.add_row(ops.add(xs, hs), *g.b);
}

/// One transition. `masks` is empty or holds 2 * gates entries: the input
/// side masks for every gate, then the recurrent side masks.
template <class Ops, class V>
StateRef<V> cell_step(Ops& ops, const CellRef<V>& cell, const V& x, const StateRef<V>& state,
                      std::span<const V> masks = {}) {
  const std::size_t G = cell.gates.size();
  if (!masks.empty() && masks.size() != 2 * G) {
    throw DimensionError("cell_step: expected " + std::to_string(2 * G) + " masks");
  }
  auto pre = [&](std::size_t g) {
    const V* mx = masks.empty() ? nullptr : &masks[g];
    const V* mh = masks.empty() ? nullptr : &masks[G + g];
    return gate_preactivation(ops, cell.gates[g], x, state.h, mx, mh);
  };
  switch (cell.kind) {
    case CellKind::ErnnSigmoid: return {ops.sigmoid(pre(0)), V{}};
    case CellKind::ErnnTanh: return {ops.tanh(pre(0)), V{}};
    case CellKind::Lstm: {
      V f = ops.sigmoid(pre(kForget));
      V i = ops.sigmoid(pre(kInputGate));
      V o = ops.sigmoid(pre(kOutputGate));
      V cand = ops.tanh(pre(kCandidate));
      V c = ops.add(ops.mul(f, state.c), ops.mul(i, cand));
      V h = ops.mul(o, ops.tanh(c));
      return {h, c};
    }
  }
  return {};
}

/// What a layer hands on after its transition: the state carried to the next
/// time step and the output passed up the stack (or to the likelihood).
template <class V>
struct LayerOutput {
  V carried;
  V emitted;
};

struct IdentityHook {
  template <class Ops, class V>
  LayerOutput<V> operator()(Ops&, std::size_t /*t*/, std::size_t /*layer*/, const V& h) const {
    return {h, h};
  }
};

template <class V>
struct NoMasks {
  std::span<const V> operator()(std::size_t /*t*/, std::size_t /*layer*/) const { return {}; }
};

/// Unrolls a layer stack over `inputs` (one [batch x input] value per step).
/// Layer l > 0 consumes layer l-1's emitted output at the same step. `states`
/// holds the initial states on entry and the final states on exit. Returns
/// the top layer's emitted output per step.
template <class Ops, class V, class Hook = IdentityHook, class Masks = NoMasks<V>>
std::vector<V> unroll(Ops& ops, std::span<const CellRef<V>> stack, std::span<const V> inputs,
                      std::vector<StateRef<V>>& states, Hook&& hook = {}, Masks&& masks = {}) {
  if (inputs.empty()) throw DimensionError("unroll: need at least one time step");
  if (states.size() != stack.size()) throw DimensionError("unroll: one state per layer required");
  std::vector<V> top;
  top.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    V x = inputs[t];
    for (std::size_t l = 0; l < stack.size(); ++l) {
      std::span<const V> m = masks(t, l);
      StateRef<V> next = cell_step(ops, stack[l], x, states[l], m);
      LayerOutput<V> out = hook(ops, t, l, next.h);
      states[l] = {out.carried, next.c};
      x = out.emitted;
    }
    top.push_back(x);
  }
  return top;
}

// ---- eager convenience API ---------------------------------------------------

namespace detail {
template <class T>
Tensor<T> as_batch(const Tensor<T>& v) {
  return v.rank() == 1 ? as_row(v) : v;
}
template <class T>
void check_cell_inputs(const CellParams<T>& p, const Tensor<T>& x, const Tensor<T>& h) {
  if (x.cols() != p.input_size || h.cols() != p.hidden_size || x.rows() != h.rows()) {
    throw DimensionError("cell step: input " + shape_str(x.shape()) + " / state " +
                         shape_str(h.shape()) + " do not match cell " +
                         std::to_string(p.input_size) + "->" + std::to_string(p.hidden_size));
  }
}
}  // namespace detail

/// squash(x W_x + h W_h + b). Accepts [features] or [batch x features].
template <class T>
Tensor<T> ernn_step(const CellParams<T>& params, const Tensor<T>& x_prev, const Tensor<T>& h_prev) {
  if (params.kind == CellKind::Lstm) throw std::invalid_argument("ernn_step on an LSTM cell");
  const Tensor<T> x = detail::as_batch(x_prev), h = detail::as_batch(h_prev);
  detail::check_cell_inputs(params, x, h);
  EagerOps<T> ops;
  auto out = cell_step<EagerOps<T>, Tensor<T>>(ops, view(params), x, {h, {}});
  return h_prev.rank() == 1 ? out.h.reshaped(h_prev.shape()) : out.h;
}

template <class T>
RnnState<T> lstm_step(const CellParams<T>& params, const Tensor<T>& x_prev, const RnnState<T>& state) {
  if (params.kind != CellKind::Lstm) throw std::invalid_argument("lstm_step on an Elman cell");
  detail::check_cell_inputs(params, x_prev, state.h);
  if (state.c.shape() != state.h.shape()) throw DimensionError("lstm_step: cell state shape");
  EagerOps<T> ops;
  auto out = cell_step<EagerOps<T>, Tensor<T>>(ops, view(params), x_prev, {state.h, state.c});
  return {out.h, out.c};
}

template <class T>
RnnState<T> dropout_lstm_step(const CellParams<T>& params, const DropoutMasks<T>& masks,
                              const Tensor<T>& x_prev, const RnnState<T>& state) {
  if (params.kind != CellKind::Lstm) throw std::invalid_argument("dropout_lstm_step on an Elman cell");
  detail::check_cell_inputs(params, x_prev, state.h);
  for (const auto& m : masks.masks) {
    if (m.shape() != state.h.shape()) throw DimensionError("dropout mask shape mismatch");
  }
  EagerOps<T> ops;
  auto out = cell_step<EagerOps<T>, Tensor<T>>(ops, view(params), x_prev, {state.h, state.c},
                                               std::span<const Tensor<T>>(masks.masks));
  return {out.h, out.c};
}

template <class T>
struct SequenceOutput {
  std::vector<Tensor<T>> top;         // top-layer h per step
  std::vector<RnnState<T>> final_states;
};

/// Deterministic forward of a stack over already-embedded inputs.
template <class T>
SequenceOutput<T> forward_sequence(const std::vector<CellParams<T>>& stack,
                                   std::span<const Tensor<T>> inputs,
                                   const std::vector<RnnState<T>>& init) {
  if (init.size() != stack.size()) throw DimensionError("forward_sequence: one state per layer");
  std::vector<CellRef<Tensor<T>>> refs;
  std::vector<StateRef<Tensor<T>>> states;
  for (std::size_t l = 0; l < stack.size(); ++l) {
    refs.push_back(view(stack[l]));
    if (init[l].h.cols() != stack[l].hidden_size) {
      throw DimensionError("forward_sequence: initial state shape mismatch");
    }
    states.push_back({init[l].h, init[l].c});
  }
  for (const auto& x : inputs) {
    if (x.cols() != stack.front().input_size) throw DimensionError("forward_sequence: input width");
  }
  EagerOps<T> ops;
  SequenceOutput<T> out;
  out.top = unroll<EagerOps<T>, Tensor<T>>(ops, refs, inputs, states);
  for (auto& s : states) out.final_states.push_back({s.h, s.c});
  return out;
}

}  // namespace noisin
