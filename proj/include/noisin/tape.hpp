#pragma once

// Reverse-mode gradient tape for unrolled recurrent computation graphs.
//
// Nodes are appended in evaluation order and may only reference earlier
// nodes, so index order is a topological order and the reverse sweep is a
// single backwards pass over the node list. Gradients accumulate additively
// across fan-out. Nodes whose inputs carry no gradient (constants such as
// noise draws or detached carried states) record no backward closure.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "noisin/tensor.hpp"

namespace noisin {

struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;

  bool valid() const { return id != kNone; }
  bool operator==(const Var&) const = default;
};

template <class T>
class Tape {
 public:
  using Value = Var;
  using Scalar = T;
  /// Called during the reverse sweep with the node's own index; reads the
  /// node's gradient via `grad()` and pushes contributions with `accumulate()`.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, false, requires_grad, {}, {}});
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends a node computed outside the tape. `back` is dropped when no
  /// parent requires a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> parents, Backward back) {
    Node node{std::move(value), {}, false, false, {}, {}};
    const std::size_t self = nodes_.size();
    for (Var p : parents) {
      if (!p.valid() || p.id >= self) {
        throw ContractViolation("tape node references a node that does not precede it");
      }
      node.parents.push_back(p.id);
      node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(back);
    nodes_.push_back(std::move(node));
    return Var{self};
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }

  /// Gradient of the last `backward()` loss with respect to `v`. Leaves that
  /// require a gradient but were unreachable hold zeros.
  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v);
    if (!n.has_grad) {
      throw ContractViolation("no gradient recorded for node " + std::to_string(v.id));
    }
    return n.grad;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
      return;
    }
    detail::require_same_shape(n.grad, g, "gradient accumulation");
    T* dst = n.grad.data();
    const T* src = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  void accumulate(std::size_t id, Tensor<T>&& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
      return;
    }
    accumulate(id, static_cast<const Tensor<T>&>(g));
  }

  const Tensor<T>& grad_at(std::size_t id) const { return nodes_[id].grad; }
  const Tensor<T>& value_at(std::size_t id) const { return nodes_[id].value; }
  std::size_t parent(std::size_t id, std::size_t k) const { return nodes_[id].parents[k]; }

  void backward(Var loss) {
    const Node& l = node(loss);
    if (l.value.size() != 1) {
      throw DimensionError("backward: loss must be a scalar, got shape " +
                           shape_str(l.value.shape()));
    }
    for (Node& n : nodes_) {
      n.grad = Tensor<T>();
      n.has_grad = false;
    }
    accumulate(loss.id, Tensor<T>(l.value.shape(), T(1)));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.requires_grad && n.parents.empty() && !n.has_grad) {
        n.grad = Tensor<T>(n.value.shape());
        n.has_grad = true;
      }
    }
  }

  // ---- differentiable primitives -------------------------------------------

  Var matmul(Var a, Var b) {
    return record(noisin::matmul(value(a), value(b)), {a, b}, [](Tape& t, std::size_t s) {
      const auto& g = t.grad_at(s);
      const std::size_t ia = t.parent(s, 0), ib = t.parent(s, 1);
      if (t.nodes_[ia].requires_grad) t.accumulate(ia, matmul_nt(g, t.value_at(ib)));
      if (t.nodes_[ib].requires_grad) t.accumulate(ib, matmul_tn(t.value_at(ia), g));
    });
  }

  Var add(Var a, Var b) {
    return record(noisin::add(value(a), value(b)), {a, b}, [](Tape& t, std::size_t s) {
      t.accumulate(t.parent(s, 0), t.grad_at(s));
      t.accumulate(t.parent(s, 1), t.grad_at(s));
    });
  }

  Var sub(Var a, Var b) {
    return record(noisin::sub(value(a), value(b)), {a, b}, [](Tape& t, std::size_t s) {
      t.accumulate(t.parent(s, 0), t.grad_at(s));
      t.accumulate(t.parent(s, 1), noisin::scale(t.grad_at(s), T(-1)));
    });
  }

  Var mul(Var a, Var b) {
    return record(noisin::mul(value(a), value(b)), {a, b}, [](Tape& t, std::size_t s) {
      const auto& g = t.grad_at(s);
      const std::size_t ia = t.parent(s, 0), ib = t.parent(s, 1);
      if (t.nodes_[ia].requires_grad) t.accumulate(ia, noisin::mul(g, t.value_at(ib)));
      if (t.nodes_[ib].requires_grad) t.accumulate(ib, noisin::mul(g, t.value_at(ia)));
    });
  }

  Var add_row(Var a, Var bias) {
    return record(noisin::add_row(value(a), value(bias)), {a, bias},
                  [](Tape& t, std::size_t s) {
                    const auto& g = t.grad_at(s);
                    t.accumulate(t.parent(s, 0), g);
                    const std::size_t ib = t.parent(s, 1);
                    if (t.nodes_[ib].requires_grad) t.accumulate(ib, sum_rows(g));
                  });
  }

  Var scale(Var a, T c) {
    return record(noisin::scale(value(a), c), {a}, [c](Tape& t, std::size_t s) {
      t.accumulate(t.parent(s, 0), noisin::scale(t.grad_at(s), c));
    });
  }

  Var sigmoid(Var a) {
    return record(noisin::sigmoid(value(a)), {a}, [](Tape& t, std::size_t s) {
      const auto& g = t.grad_at(s);
      const auto& y = t.value_at(s);
      Tensor<T> d(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) d[i] = g[i] * y[i] * (T(1) - y[i]);
      t.accumulate(t.parent(s, 0), std::move(d));
    });
  }

  Var tanh(Var a) {
    return record(noisin::tanh(value(a)), {a}, [](Tape& t, std::size_t s) {
      const auto& g = t.grad_at(s);
      const auto& y = t.value_at(s);
      Tensor<T> d(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) d[i] = g[i] * (T(1) - y[i] * y[i]);
      t.accumulate(t.parent(s, 0), std::move(d));
    });
  }

  Var exp(Var a) {
    return record(noisin::exp(value(a)), {a}, [](Tape& t, std::size_t s) {
      t.accumulate(t.parent(s, 0), noisin::mul(t.grad_at(s), t.value_at(s)));
    });
  }

  Var log(Var a) {
    return record(noisin::log(value(a)), {a}, [](Tape& t, std::size_t s) {
      const auto& g = t.grad_at(s);
      const auto& x = t.value_at(t.parent(s, 0));
      Tensor<T> d(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) d[i] = g[i] / x[i];
      t.accumulate(t.parent(s, 0), std::move(d));
    });
  }

  Var sum(Var a) {
    return record(Tensor<T>::scalar(noisin::sum(value(a))), {a},
                  [](Tape& t, std::size_t s) {
                    const std::size_t ia = t.parent(s, 0);
                    t.accumulate(ia, Tensor<T>(t.value_at(ia).shape(), t.grad_at(s).item()));
                  });
  }

  /// Rows of `table` selected by `ids` (an embedding lookup).
  Var gather_rows(Var table, std::span<const std::size_t> ids) {
    Tensor<T> out = noisin::gather_rows(value(table), ids);
    const std::size_t n = out.cols();
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return record(std::move(out), {table},
                  [idx = std::move(idx), n](Tape& t, std::size_t s) {
                    const std::size_t it = t.parent(s, 0);
                    Tensor<T> d(t.value_at(it).shape());
                    const auto& g = t.grad_at(s);
                    for (std::size_t i = 0; i < idx.size(); ++i)
                      for (std::size_t j = 0; j < n; ++j) d(idx[i], j) += g(i, j);
                    t.accumulate(it, std::move(d));
                  });
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad;
    bool requires_grad;
    std::vector<std::size_t> parents;
    Backward backward;
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) {
      throw ContractViolation("variable does not belong to this tape");
    }
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

}  // namespace noisin
