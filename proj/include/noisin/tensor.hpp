#pragma once

// Dense row-major tensors and the eager arithmetic used by every other module.
//
// Tensors are plain values: copying one copies its buffer. There is no
// implicit broadcasting; the only row-broadcast operation is `add_row`, used
// for bias vectors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace noisin {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when a value that must be finite is NaN or infinite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition of a caller-supplied object was not met.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor(Shape{values.size()}, std::vector<T>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{m, n}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  std::size_t rows() const {
    require_rank(2);
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank(2);
    return shape_[1];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  std::span<T> row(std::size_t i) {
    return std::span<T>(data_).subspan(i * shape_[1], shape_[1]);
  }
  std::span<const T> row(std::size_t i) const {
    return std::span<const T>(data_).subspan(i * shape_[1], shape_[1]);
  }

  T item() const {
    if (data_.size() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Bitwise-equal shape and values (NaN never compares equal).
  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  void require_rank(std::size_t r) const {
    if (shape_.size() != r) {
      throw DimensionError("expected rank " + std::to_string(r) + ", got shape " +
                           shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

template <class T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.shape()));
  }
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& x, F f) {
  Tensor<T> out(x.shape());
  const T* in = x.data();
  T* o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(in[i]);
  return out;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* o = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = f(pa[i], pb[i]);
  return out;
}

}  // namespace detail

/// a[m x k] * b[k x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                         " * " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out.data() + i * n;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// a^T * b, with a[k x m] and b[k x n].
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_tn");
  detail::require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: inner dimensions disagree " +
                         shape_str(a.shape()) + "^T * " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * m;
    const T* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// a * b^T, with a[m x k] and b[n x k].
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree " +
                         shape_str(a.shape()) + " * " + shape_str(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    T* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] = acc;
    }
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_matrix(a, "transpose");
  Tensor<T> out(Shape{a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::map(a, [c](T x) { return x * c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::map(a, [c](T x) { return x + c; });
}

/// a[m x n] + bias[n] broadcast over rows.
template <class T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& bias) {
  detail::require_matrix(a, "add_row");
  if (bias.size() != a.cols() || bias.rank() != 1) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) +
                         " does not match " + shape_str(a.shape()));
  }
  Tensor<T> out(a.shape());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = a(i, j) + bias[j];
  return out;
}

/// Column sums of a[m x n] -> [n].
template <class T>
Tensor<T> sum_rows(const Tensor<T>& a) {
  detail::require_matrix(a, "sum_rows");
  Tensor<T> out(Shape{a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += a(i, j);
  return out;
}

template <class T>
T sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  return acc;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Symmetric form: never evaluates exp of a positive argument.
template <class T>
T sigmoid(T s) {
  if (s >= T(0)) return T(1) / (T(1) + std::exp(-s));
  const T e = std::exp(s);
  return e / (T(1) + e);
}

/// log(1 + e^s) without overflow.
template <class T>
T softplus(T s) {
  return std::max(s, T(0)) + std::log1p(std::exp(-std::abs(s)));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::map(x, [](T v) { return sigmoid(v); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::map(x, [](T v) { return std::tanh(v); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::map(x, [](T v) { return std::exp(v); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::map(x, [](T v) {
    if (!(v > T(0))) throw DomainError("log of nonpositive value");
    return std::log(v);
  });
}

/// Max-shifted log(sum(exp(s))).
template <class T>
T logsumexp(std::span<const T> s) {
  if (s.empty()) throw DimensionError("logsumexp of empty input");
  const T m = *std::max_element(s.begin(), s.end());
  if (!std::isfinite(m)) throw NumericalError("logsumexp: non-finite input");
  T acc = 0;
  for (T v : s) acc += std::exp(v - m);
  return m + std::log(acc);
}

template <class T>
T logsumexp(const Tensor<T>& s) {
  return logsumexp<T>(s.values());
}

/// Row-wise softmax of a[m x n].
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  detail::require_matrix(a, "softmax_rows");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    const T m = *std::max_element(in.begin(), in.end());
    T z = 0;
    for (std::size_t j = 0; j < in.size(); ++j) z += (o[j] = std::exp(in[j] - m));
    for (auto& v : o) v /= z;
  }
  return out;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](T v) { return std::isfinite(v); });
}

template <class T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  if (!all_finite(t)) throw NumericalError(what + ": non-finite value");
}

template <class T>
T frobenius_norm(const Tensor<T>& t) {
  T acc = 0;
  for (T v : t.values()) acc += v * v;
  return std::sqrt(acc);
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Matrix view of a vector: [n] -> [1 x n].
template <class T>
Tensor<T> as_row(const Tensor<T>& v) {
  return v.reshaped(Shape{1, v.size()});
}

/// Rows of table [n x d] selected by ids (an embedding lookup).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t d = table.cols();
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) throw DimensionError("gather_rows: id out of range");
    std::copy_n(table.data() + ids[i] * d, d, out.data() + i * d);
  }
  return out;
}

/// Eager evaluation backend for code written against the generic op set
/// shared with `Tape`.
template <class T>
struct EagerOps {
  using Value = Tensor<T>;
  using Scalar = T;

  Value matmul(const Value& a, const Value& b) { return noisin::matmul(a, b); }
  Value add(const Value& a, const Value& b) { return noisin::add(a, b); }
  Value sub(const Value& a, const Value& b) { return noisin::sub(a, b); }
  Value mul(const Value& a, const Value& b) { return noisin::mul(a, b); }
  Value add_row(const Value& a, const Value& b) { return noisin::add_row(a, b); }
  Value scale(const Value& a, T c) { return noisin::scale(a, c); }
  Value sigmoid(const Value& a) { return noisin::sigmoid(a); }
  Value tanh(const Value& a) { return noisin::tanh(a); }
  Value exp(const Value& a) { return noisin::exp(a); }
  Value log(const Value& a) { return noisin::log(a); }
  Value sum(const Value& a) { return Value::scalar(noisin::sum(a)); }
  Value gather_rows(const Value& table, std::span<const std::size_t> ids) {
    return noisin::gather_rows(table, ids);
  }
  Value constant(Value v) { return v; }
  const Value& value(const Value& v) const { return v; }
};

}  // namespace noisin
