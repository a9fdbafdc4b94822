#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation over an
// explicit tape.
//
// The scalar type is a template parameter: the product path runs on float
// (Tensor/Tape aliases below), while grad_check re-evaluates the same forward
// code at double precision for its finite-difference oracle. Reduction-style
// kernels (matmul, sums, norms, softmax) accumulate in double regardless of
// the storage type.
//
// Tape discipline: operations append nodes in creation order, which is a
// topological order by construction (an input must exist before any consumer).
// backward() walks the tape once, in reverse, accumulating into the gradient
// buffers of tensors that were marked requires_grad. Each thread should own
// its own tape; tensors are safe to share read-only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sembed/rng.hpp"

namespace sembed {

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline int shape_product(const std::vector<int>& shape) {
  int n = 1;
  for (const int d : shape) {
    require(d >= 0, "tensor: negative dimension");
    n *= d;
  }
  return n;
}

}  // namespace detail

template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> shape) {
    TensorT t;
    const int n = detail::shape_product(shape);
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->v.assign(static_cast<std::size_t>(n), T(0));
    return t;
  }

  static TensorT full(std::vector<int> shape, T value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.s_->v.begin(), t.s_->v.end(), value);
    return t;
  }

  static TensorT from_values(std::vector<int> shape, std::vector<T> values) {
    const int n = detail::shape_product(shape);
    detail::require(static_cast<std::size_t>(n) == values.size(),
                    "tensor: value count does not match shape");
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->v = std::move(values);
    return t;
  }

  static TensorT scalar(T value) { return from_values({1}, {value}); }

  bool defined() const { return s_ != nullptr; }

  const std::vector<int>& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape.at(static_cast<std::size_t>(i)); }
  int size() const { return static_cast<int>(s_->v.size()); }
  int rows() const { return dim(0); }
  int cols() const { return dim(1); }

  std::vector<T>& values() { return s_->v; }
  const std::vector<T>& values() const { return s_->v; }

  bool requires_grad() const { return s_ && s_->requires_grad; }

  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on) {
      s_->g.assign(s_->v.size(), T(0));
    } else {
      s_->g.clear();
    }
  }

  std::vector<T>& grad() {
    detail::require(requires_grad(), "tensor: gradient not tracked");
    return s_->g;
  }
  const std::vector<T>& grad() const {
    detail::require(requires_grad(), "tensor: gradient not tracked");
    return s_->g;
  }

  void zero_grad() {
    if (requires_grad()) std::fill(s_->g.begin(), s_->g.end(), T(0));
  }

  T item() const {
    detail::require(size() == 1, "tensor: item() needs a scalar");
    return s_->v[0];
  }

  // Deep copy of values; gradient tracking is not carried over.
  TensorT clone() const {
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = s_->shape;
    t.s_->v = s_->v;
    return t;
  }

  template <class U>
  TensorT<U> cast() const {
    std::vector<U> out(s_->v.size());
    for (std::size_t i = 0; i < s_->v.size(); ++i) out[i] = static_cast<U>(s_->v[i]);
    return TensorT<U>::from_values(s_->shape, std::move(out));
  }

  // Identity of the underlying buffer; used to verify structural weight tying.
  const void* storage_id() const { return static_cast<const void*>(s_.get()); }

 private:
  struct Storage {
    std::vector<int> shape;
    std::vector<T> v;
    std::vector<T> g;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

template <class T>
class TapeT {
 public:
  explicit TapeT(bool recording = true) : recording_(recording) {}

  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  bool recording() const { return recording_; }
  std::size_t node_count() const { return nodes_.size(); }

  void record(std::function<void()> backprop) { nodes_.push_back(std::move(backprop)); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape once in reverse order.
  // A loss that does not depend on any tracked tensor is a constant; backward
  // is then a no-op and all gradients stay zero.
  void backward(const TensorT<T>& loss) {
    detail::require(loss.defined() && loss.size() == 1, "backward: loss must be a scalar");
    if (!loss.requires_grad()) return;
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  bool recording_;
  std::vector<std::function<void()>> nodes_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

template <class T>
bool all_finite(const TensorT<T>& t) {
  for (const T x : t.values())
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

namespace detail {

template <class T>
bool track(TapeT<T>& tape, std::initializer_list<const TensorT<T>*> parents) {
  if (!tape.recording()) return false;
  for (const auto* p : parents)
    if (p->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary operations
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      const auto& og = out.grad();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
      }
      if (b.requires_grad()) {
        auto& g = b.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> sub(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      const auto& og = out.grad();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
      }
      if (b.requires_grad()) {
        auto& g = b.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] -= og[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      const auto& og = out.grad();
      const auto& av2 = a.values();
      const auto& bv2 = b.values();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * bv2[i];
      }
      if (b.requires_grad()) {
        auto& g = b.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * av2[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> div(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.shape() == b.shape(), "div: shape mismatch");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      const auto& og = out.grad();
      const auto& av2 = a.values();
      const auto& bv2 = b.values();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] / bv2[i];
      }
      if (b.requires_grad()) {
        auto& g = b.grad();
        for (std::size_t i = 0; i < og.size(); ++i)
          g[i] -= og[i] * av2[i] / (bv2[i] * bv2[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scalar-constant operations
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> scale(TapeT<T>& tape, const TensorT<T>& a, T c) {
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, c]() mutable {
      const auto& og = out.grad();
      auto& g = a.grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * c;
    });
  }
  return out;
}

template <class T>
TensorT<T> add_scalar(TapeT<T>& tape, const TensorT<T>& a, T c) {
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out]() mutable {
      const auto& og = out.grad();
      auto& g = a.grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix operations
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> matmul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2, "matmul: inputs must be 2-D");
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  const int n = a.rows(), k = a.cols(), m = b.cols();
  TensorT<T> out = TensorT<T>::zeros({n, m});
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p)
        acc += static_cast<double>(av[i * k + p]) * static_cast<double>(bv[p * m + j]);
      ov[i * m + j] = static_cast<T>(acc);
    }
  }
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out, n, k, m]() mutable {
      const auto& og = out.grad();
      const auto& av2 = a.values();
      const auto& bv2 = b.values();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (int i = 0; i < n; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int j = 0; j < m; ++j)
              acc += static_cast<double>(og[i * m + j]) * static_cast<double>(bv2[p * m + j]);
            g[i * k + p] += static_cast<T>(acc);
          }
      }
      if (b.requires_grad()) {
        auto& g = b.grad();
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i)
              acc += static_cast<double>(av2[i * k + p]) * static_cast<double>(og[i * m + j]);
            g[p * m + j] += static_cast<T>(acc);
          }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> transpose(TapeT<T>& tape, const TensorT<T>& a) {
  detail::require(a.ndim() == 2, "transpose: input must be 2-D");
  const int n = a.rows(), m = a.cols();
  TensorT<T> out = TensorT<T>::zeros({m, n});
  const auto& av = a.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) ov[j * n + i] = av[i * m + j];
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, n, m]() mutable {
      const auto& og = out.grad();
      auto& g = a.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) g[i * m + j] += og[j * n + i];
    });
  }
  return out;
}

// Row lookup into an embedding table; backward scatter-adds into the table.
template <class T>
TensorT<T> gather_rows(TapeT<T>& tape, const TensorT<T>& table, const std::vector<int>& ids) {
  detail::require(table.ndim() == 2, "gather_rows: table must be 2-D");
  const int v = table.rows(), d = table.cols();
  for (const int id : ids)
    detail::require(id >= 0 && id < v, "gather_rows: id out of range");
  const int n = static_cast<int>(ids.size());
  TensorT<T> out = TensorT<T>::zeros({n, d});
  const auto& tv = table.values();
  auto& ov = out.values();
  for (int r = 0; r < n; ++r)
    std::copy(tv.begin() + static_cast<long>(ids[r]) * d,
              tv.begin() + static_cast<long>(ids[r] + 1) * d, ov.begin() + static_cast<long>(r) * d);
  if (detail::track(tape, {&table})) {
    out.set_requires_grad(true);
    tape.record([table, out, ids, d]() mutable {
      const auto& og = out.grad();
      auto& g = table.grad();
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (int j = 0; j < d; ++j) g[static_cast<long>(ids[r]) * d + j] += og[r * d + j];
    });
  }
  return out;
}

// A[n x d] + v[d], broadcast over rows.
template <class T>
TensorT<T> add_row_vector(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& v) {
  detail::require(a.ndim() == 2 && v.ndim() == 1, "add_row_vector: need matrix and vector");
  detail::require(a.cols() == v.dim(0), "add_row_vector: width mismatch");
  const int n = a.rows(), d = a.cols();
  TensorT<T> out = TensorT<T>::zeros({n, d});
  const auto& av = a.values();
  const auto& vv = v.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) ov[i * d + j] = av[i * d + j] + vv[j];
  if (detail::track(tape, {&a, &v})) {
    out.set_requires_grad(true);
    tape.record([a, v, out, n, d]() mutable {
      const auto& og = out.grad();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
      }
      if (v.requires_grad()) {
        auto& g = v.grad();
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int i = 0; i < n; ++i) acc += static_cast<double>(og[i * d + j]);
          g[j] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

// Row i of A scaled by s[i].
template <class T>
TensorT<T> scale_rows(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& s) {
  detail::require(a.ndim() == 2 && s.ndim() == 1, "scale_rows: need matrix and vector");
  detail::require(a.rows() == s.dim(0), "scale_rows: height mismatch");
  const int n = a.rows(), d = a.cols();
  TensorT<T> out = TensorT<T>::zeros({n, d});
  const auto& av = a.values();
  const auto& sv = s.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) ov[i * d + j] = av[i * d + j] * sv[i];
  if (detail::track(tape, {&a, &s})) {
    out.set_requires_grad(true);
    tape.record([a, s, out, n, d]() mutable {
      const auto& og = out.grad();
      const auto& av2 = a.values();
      const auto& sv2 = s.values();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) g[i * d + j] += og[i * d + j] * sv2[i];
      }
      if (s.requires_grad()) {
        auto& g = s.grad();
        for (int i = 0; i < n; ++i) {
          double acc = 0.0;
          for (int j = 0; j < d; ++j)
            acc += static_cast<double>(og[i * d + j]) * static_cast<double>(av2[i * d + j]);
          g[i] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

// a / s where s is a scalar tensor, broadcast over every element of a.
template <class T>
TensorT<T> div_by_scalar(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& s) {
  detail::require(s.size() == 1, "div_by_scalar: divisor must be a scalar tensor");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.values();
  const T sv = s.values()[0];
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / sv;
  if (detail::track(tape, {&a, &s})) {
    out.set_requires_grad(true);
    tape.record([a, s, out]() mutable {
      const auto& og = out.grad();
      const auto& av2 = a.values();
      const T sv2 = s.values()[0];
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] / sv2;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < og.size(); ++i)
          acc -= static_cast<double>(og[i]) * static_cast<double>(av2[i]);
        s.grad()[0] += static_cast<T>(acc / (static_cast<double>(sv2) * static_cast<double>(sv2)));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> row_sum(TapeT<T>& tape, const TensorT<T>& a) {
  detail::require(a.ndim() == 2, "row_sum: input must be 2-D");
  const int n = a.rows(), d = a.cols();
  TensorT<T> out = TensorT<T>::zeros({n});
  const auto& av = a.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) acc += static_cast<double>(av[i * d + j]);
    ov[i] = static_cast<T>(acc);
  }
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, n, d]() mutable {
      const auto& og = out.grad();
      auto& g = a.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) g[i * d + j] += og[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> sum(TapeT<T>& tape, const TensorT<T>& a) {
  TensorT<T> out = TensorT<T>::zeros({1});
  double acc = 0.0;
  for (const T x : a.values()) acc += static_cast<double>(x);
  out.values()[0] = static_cast<T>(acc);
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out]() mutable {
      const T og = out.grad()[0];
      auto& g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += og;
    });
  }
  return out;
}

template <class T>
TensorT<T> mean(TapeT<T>& tape, const TensorT<T>& a) {
  detail::require(a.size() > 0, "mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.size());
  TensorT<T> out = TensorT<T>::zeros({1});
  double acc = 0.0;
  for (const T x : a.values()) acc += static_cast<double>(x);
  out.values()[0] = static_cast<T>(acc * inv);
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, inv]() mutable {
      const T og = static_cast<T>(static_cast<double>(out.grad()[0]) * inv);
      auto& g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += og;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary operations
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class FwdFn, class BwdFn>
TensorT<T> unary_op(TapeT<T>& tape, const TensorT<T>& a, FwdFn fwd, BwdFn dfdx) {
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(fwd(static_cast<double>(av[i])));
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, dfdx]() mutable {
      const auto& og = out.grad();
      const auto& av2 = a.values();
      auto& g = a.grad();
      for (std::size_t i = 0; i < og.size(); ++i)
        g[i] += static_cast<T>(static_cast<double>(og[i]) * dfdx(static_cast<double>(av2[i])));
    });
  }
  return out;
}

}  // namespace detail

template <class T>
TensorT<T> sqrt(TapeT<T>& tape, const TensorT<T>& a) {
  for (const T x : a.values())
    detail::require(x >= T(0), "sqrt: negative input");
  return detail::unary_op(
      tape, a, [](double x) { return std::sqrt(x); },
      [](double x) { return 0.5 / std::sqrt(x); });
}

template <class T>
TensorT<T> exp(TapeT<T>& tape, const TensorT<T>& a) {
  return detail::unary_op(
      tape, a, [](double x) { return std::exp(x); },
      [](double x) { return std::exp(x); });
}

template <class T>
TensorT<T> log(TapeT<T>& tape, const TensorT<T>& a) {
  for (const T x : a.values())
    detail::require(x > T(0), "log: non-positive input");
  return detail::unary_op(
      tape, a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

template <class T>
TensorT<T> abs(TapeT<T>& tape, const TensorT<T>& a) {
  // Subgradient 0 at the origin.
  return detail::unary_op(
      tape, a, [](double x) { return std::abs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// Smooth tanh-approximation GELU; the activation used by the encoder blocks.
template <class T>
TensorT<T> gelu(TapeT<T>& tape, const TensorT<T>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  auto fwd = [](double x) {
    const double u = kC * (x + kA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  };
  auto bwd = [](double x) {
    const double u = kC * (x + kA * x * x * x);
    const double t = std::tanh(u);
    const double du = kC * (1.0 + 3.0 * kA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
  };
  return detail::unary_op(tape, a, fwd, bwd);
}

// Elementwise atan2(y, x); the angle of the complex number x + iy.
template <class T>
TensorT<T> atan2(TapeT<T>& tape, const TensorT<T>& y, const TensorT<T>& x) {
  detail::require(y.shape() == x.shape(), "atan2: shape mismatch");
  TensorT<T> out = TensorT<T>::zeros(y.shape());
  const auto& yv = y.values();
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = static_cast<T>(std::atan2(static_cast<double>(yv[i]), static_cast<double>(xv[i])));
  if (detail::track(tape, {&y, &x})) {
    out.set_requires_grad(true);
    tape.record([y, x, out]() mutable {
      const auto& og = out.grad();
      const auto& yv2 = y.values();
      const auto& xv2 = x.values();
      if (y.requires_grad()) {
        auto& g = y.grad();
        for (std::size_t i = 0; i < og.size(); ++i) {
          const double r2 = static_cast<double>(xv2[i]) * xv2[i] + static_cast<double>(yv2[i]) * yv2[i];
          g[i] += static_cast<T>(static_cast<double>(og[i]) * xv2[i] / r2);
        }
      }
      if (x.requires_grad()) {
        auto& g = x.grad();
        for (std::size_t i = 0; i < og.size(); ++i) {
          const double r2 = static_cast<double>(xv2[i]) * xv2[i] + static_cast<double>(yv2[i]) * yv2[i];
          g[i] -= static_cast<T>(static_cast<double>(og[i]) * yv2[i] / r2);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization, softmax, losses
// ---------------------------------------------------------------------------

// Per-row layer normalization with learned gain and bias.
template <class T>
TensorT<T> layer_norm(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& gain,
                      const TensorT<T>& bias, double eps = 1e-5) {
  detail::require(a.ndim() == 2, "layer_norm: input must be 2-D");
  detail::require(gain.ndim() == 1 && bias.ndim() == 1, "layer_norm: gain/bias must be 1-D");
  detail::require(gain.dim(0) == a.cols() && bias.dim(0) == a.cols(),
                  "layer_norm: gain/bias width mismatch");
  const int n = a.rows(), d = a.cols();
  TensorT<T> out = TensorT<T>::zeros({n, d});
  std::vector<double> xhat(static_cast<std::size_t>(n) * d);
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  const auto& av = a.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += static_cast<double>(av[i * d + j]);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = static_cast<double>(av[i * d + j]) - mu;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = inv;
    for (int j = 0; j < d; ++j) {
      const double xh = (static_cast<double>(av[i * d + j]) - mu) * inv;
      xhat[static_cast<std::size_t>(i) * d + j] = xh;
      ov[i * d + j] = static_cast<T>(xh * static_cast<double>(gv[j]) + static_cast<double>(bv[j]));
    }
  }
  if (detail::track(tape, {&a, &gain, &bias})) {
    out.set_requires_grad(true);
    tape.record([a, gain, bias, out, xhat, inv_std, n, d]() mutable {
      const auto& og = out.grad();
      const auto& gv2 = gain.values();
      for (int i = 0; i < n; ++i) {
        if (a.requires_grad()) {
          auto& g = a.grad();
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(og[i * d + j]) * static_cast<double>(gv2[j]);
            m1 += dxh;
            m2 += dxh * xhat[static_cast<std::size_t>(i) * d + j];
          }
          m1 /= d;
          m2 /= d;
          for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(og[i * d + j]) * static_cast<double>(gv2[j]);
            const double dx =
                inv_std[static_cast<std::size_t>(i)] *
                (dxh - m1 - xhat[static_cast<std::size_t>(i) * d + j] * m2);
            g[i * d + j] += static_cast<T>(dx);
          }
        }
      }
      if (gain.requires_grad()) {
        auto& g = gain.grad();
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int i = 0; i < n; ++i)
            acc += static_cast<double>(og[i * d + j]) * xhat[static_cast<std::size_t>(i) * d + j];
          g[j] += static_cast<T>(acc);
        }
      }
      if (bias.requires_grad()) {
        auto& g = bias.grad();
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int i = 0; i < n; ++i) acc += static_cast<double>(og[i * d + j]);
          g[j] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

// Row-wise softmax with max-subtraction stabilization.
template <class T>
TensorT<T> softmax_rows(TapeT<T>& tape, const TensorT<T>& a) {
  detail::require(a.ndim() == 2, "softmax_rows: input must be 2-D");
  const int n = a.rows(), d = a.cols();
  detail::require(d >= 1, "softmax_rows: empty rows");
  TensorT<T> out = TensorT<T>::zeros({n, d});
  const auto& av = a.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < d; ++j) mx = std::max(mx, static_cast<double>(av[i * d + j]));
    double z = 0.0;
    for (int j = 0; j < d; ++j) z += std::exp(static_cast<double>(av[i * d + j]) - mx);
    for (int j = 0; j < d; ++j)
      ov[i * d + j] = static_cast<T>(std::exp(static_cast<double>(av[i * d + j]) - mx) / z);
  }
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, n, d]() mutable {
      const auto& og = out.grad();
      const auto& yv = out.values();
      auto& g = a.grad();
      for (int i = 0; i < n; ++i) {
        double dotp = 0.0;
        for (int j = 0; j < d; ++j)
          dotp += static_cast<double>(og[i * d + j]) * static_cast<double>(yv[i * d + j]);
        for (int j = 0; j < d; ++j)
          g[i * d + j] += static_cast<T>(static_cast<double>(yv[i * d + j]) *
                                         (static_cast<double>(og[i * d + j]) - dotp));
      }
    });
  }
  return out;
}

// Per-row softmax cross-entropy with integer targets. `excluded`, when
// non-empty, is a flat row-major n*m mask; excluded entries are dropped from
// the softmax (the target entry must never be excluded). Stable via
// log-sum-exp. Returns the per-row losses as an n-vector.
template <class T>
TensorT<T> softmax_cross_entropy_rows(TapeT<T>& tape, const TensorT<T>& logits,
                                      const std::vector<int>& targets,
                                      const std::vector<std::uint8_t>& excluded = {}) {
  detail::require(logits.ndim() == 2, "softmax_cross_entropy_rows: logits must be 2-D");
  const int n = logits.rows(), m = logits.cols();
  detail::require(static_cast<int>(targets.size()) == n,
                  "softmax_cross_entropy_rows: one target per row required");
  detail::require(excluded.empty() || static_cast<int>(excluded.size()) == n * m,
                  "softmax_cross_entropy_rows: mask size mismatch");
  for (int i = 0; i < n; ++i) {
    detail::require(targets[i] >= 0 && targets[i] < m,
                    "softmax_cross_entropy_rows: target index out of range");
    detail::require(excluded.empty() || !excluded[static_cast<std::size_t>(i) * m + targets[i]],
                    "softmax_cross_entropy_rows: target entry is excluded");
  }
  auto is_valid = [&](int i, int j) {
    return excluded.empty() || !excluded[static_cast<std::size_t>(i) * m + j];
  };
  TensorT<T> out = TensorT<T>::zeros({n});
  std::vector<double> lse(static_cast<std::size_t>(n));
  const auto& lv = logits.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j)
      if (is_valid(i, j)) mx = std::max(mx, static_cast<double>(lv[i * m + j]));
    double z = 0.0;
    for (int j = 0; j < m; ++j)
      if (is_valid(i, j)) z += std::exp(static_cast<double>(lv[i * m + j]) - mx);
    lse[static_cast<std::size_t>(i)] = mx + std::log(z);
    ov[i] = static_cast<T>(lse[static_cast<std::size_t>(i)] -
                           static_cast<double>(lv[i * m + targets[i]]));
  }
  if (detail::track(tape, {&logits})) {
    out.set_requires_grad(true);
    tape.record([logits, out, targets, excluded, lse, n, m, is_valid]() mutable {
      const auto& og = out.grad();
      const auto& lv2 = logits.values();
      auto& g = logits.grad();
      for (int i = 0; i < n; ++i) {
        const double gi = static_cast<double>(og[i]);
        for (int j = 0; j < m; ++j) {
          if (!is_valid(i, j)) continue;
          const double p =
              std::exp(static_cast<double>(lv2[i * m + j]) - lse[static_cast<std::size_t>(i)]);
          const double delta = (j == targets[i]) ? 1.0 : 0.0;
          g[i * m + j] += static_cast<T>(gi * (p - delta));
        }
      }
    });
  }
  return out;
}

// log(1 + sum_k exp(v_k)), stable, with the implicit zero logit. An empty
// input yields the constant 0.
template <class T>
TensorT<T> log1p_sum_exp(TapeT<T>& tape, const TensorT<T>& v) {
  TensorT<T> out = TensorT<T>::zeros({1});
  double mx = 0.0;  // the implicit 0 logit participates in the max
  for (const T x : v.values()) mx = std::max(mx, static_cast<double>(x));
  double z = std::exp(-mx);
  for (const T x : v.values()) z += std::exp(static_cast<double>(x) - mx);
  const double result = mx + std::log(z);
  out.values()[0] = static_cast<T>(result);
  if (v.size() > 0 && detail::track(tape, {&v})) {
    out.set_requires_grad(true);
    tape.record([v, out, result]() mutable {
      const double og = static_cast<double>(out.grad()[0]);
      const auto& vv = v.values();
      auto& g = v.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += static_cast<T>(og * std::exp(static_cast<double>(vv[i]) - result));
    });
  }
  return out;
}

// Per-element binary cross-entropy on logits with constant 0/1 labels,
// computed in the numerically stable max(z,0) - z*y + log1p(exp(-|z|)) form.
template <class T>
TensorT<T> bce_with_logits(TapeT<T>& tape, const TensorT<T>& z, const std::vector<double>& labels) {
  detail::require(static_cast<std::size_t>(z.size()) == labels.size(),
                  "bce_with_logits: label count mismatch");
  for (const double y : labels)
    detail::require(y == 0.0 || y == 1.0, "bce_with_logits: labels must be 0 or 1");
  TensorT<T> out = TensorT<T>::zeros(z.shape());
  const auto& zv = z.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double x = static_cast<double>(zv[i]);
    ov[i] = static_cast<T>(std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x))));
  }
  if (detail::track(tape, {&z})) {
    out.set_requires_grad(true);
    tape.record([z, out, labels]() mutable {
      const auto& og = out.grad();
      const auto& zv2 = z.values();
      auto& g = z.grad();
      for (std::size_t i = 0; i < og.size(); ++i) {
        const double x = static_cast<double>(zv2[i]);
        const double sig = 1.0 / (1.0 + std::exp(-x));
        g[i] += static_cast<T>(static_cast<double>(og[i]) * (sig - labels[i]));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> reshape(TapeT<T>& tape, const TensorT<T>& a, std::vector<int> shape) {
  detail::require(detail::shape_product(shape) == a.size(), "reshape: size mismatch");
  TensorT<T> out = TensorT<T>::from_values(std::move(shape), a.values());
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out]() mutable {
      const auto& og = out.grad();
      auto& g = a.grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> concat_rows(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2, "concat_rows: inputs must be 2-D");
  detail::require(a.cols() == b.cols(), "concat_rows: width mismatch");
  const int n = a.rows(), m = b.rows(), d = a.cols();
  TensorT<T> out = TensorT<T>::zeros({n + m, d});
  auto& ov = out.values();
  std::copy(a.values().begin(), a.values().end(), ov.begin());
  std::copy(b.values().begin(), b.values().end(), ov.begin() + static_cast<long>(n) * d);
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out, n, m, d]() mutable {
      const auto& og = out.grad();
      if (a.requires_grad()) {
        auto& g = a.grad();
        for (long i = 0; i < static_cast<long>(n) * d; ++i) g[i] += og[i];
      }
      if (b.requires_grad()) {
        auto& g = b.grad();
        for (long i = 0; i < static_cast<long>(m) * d; ++i) g[i] += og[static_cast<long>(n) * d + i];
      }
    });
  }
  return out;
}

// Stacks 1-D tensors of equal length into a matrix, one per row.
template <class T>
TensorT<T> stack_rows(TapeT<T>& tape, const std::vector<TensorT<T>>& items) {
  detail::require(!items.empty(), "stack_rows: empty input");
  const int d = items[0].size();
  for (const auto& t : items)
    detail::require(t.ndim() == 1 && t.size() == d, "stack_rows: rows must be equal-length vectors");
  const int n = static_cast<int>(items.size());
  TensorT<T> out = TensorT<T>::zeros({n, d});
  auto& ov = out.values();
  for (int i = 0; i < n; ++i)
    std::copy(items[i].values().begin(), items[i].values().end(), ov.begin() + static_cast<long>(i) * d);
  bool needs = false;
  if (tape.recording())
    for (const auto& t : items) needs = needs || t.requires_grad();
  if (needs) {
    out.set_requires_grad(true);
    tape.record([items, out, d]() mutable {
      const auto& og = out.grad();
      for (std::size_t i = 0; i < items.size(); ++i) {
        if (!items[i].requires_grad()) continue;
        auto& g = items[i].grad();
        for (int j = 0; j < d; ++j) g[j] += og[i * static_cast<std::size_t>(d) + j];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_rows(TapeT<T>& tape, const TensorT<T>& a, int r0, int r1) {
  detail::require(a.ndim() == 2, "slice_rows: input must be 2-D");
  detail::require(0 <= r0 && r0 < r1 && r1 <= a.rows(), "slice_rows: bad range");
  const int d = a.cols();
  TensorT<T> out = TensorT<T>::zeros({r1 - r0, d});
  std::copy(a.values().begin() + static_cast<long>(r0) * d,
            a.values().begin() + static_cast<long>(r1) * d, out.values().begin());
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, r0, d]() mutable {
      const auto& og = out.grad();
      auto& g = a.grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[static_cast<long>(r0) * d + i] += og[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_cols(TapeT<T>& tape, const TensorT<T>& a, int c0, int c1) {
  detail::require(a.ndim() == 2, "slice_cols: input must be 2-D");
  detail::require(0 <= c0 && c0 < c1 && c1 <= a.cols(), "slice_cols: bad range");
  const int n = a.rows(), d = a.cols(), w = c1 - c0;
  TensorT<T> out = TensorT<T>::zeros({n, w});
  const auto& av = a.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) ov[i * w + j] = av[i * d + c0 + j];
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, c0, n, d, w]() mutable {
      const auto& og = out.grad();
      auto& g = a.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) g[i * d + c0 + j] += og[i * w + j];
    });
  }
  return out;
}

// Element-wise max over the rows whose mask entry is nonzero. Gradient routes
// to the first maximizing row per column.
template <class T>
TensorT<T> masked_col_max(TapeT<T>& tape, const TensorT<T>& a, const std::vector<std::uint8_t>& row_mask) {
  detail::require(a.ndim() == 2, "masked_col_max: input must be 2-D");
  detail::require(static_cast<int>(row_mask.size()) == a.rows(), "masked_col_max: mask length mismatch");
  const int n = a.rows(), d = a.cols();
  int live = 0;
  for (const auto m : row_mask) live += (m != 0);
  detail::require(live > 0, "masked_col_max: all rows masked");
  TensorT<T> out = TensorT<T>::zeros({d});
  std::vector<int> argmax(static_cast<std::size_t>(d), -1);
  const auto& av = a.values();
  auto& ov = out.values();
  for (int j = 0; j < d; ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (!row_mask[static_cast<std::size_t>(i)]) continue;
      const double x = static_cast<double>(av[i * d + j]);
      if (x > best) {
        best = x;
        argmax[static_cast<std::size_t>(j)] = i;
      }
    }
    ov[j] = static_cast<T>(best);
  }
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    tape.record([a, out, argmax, d]() mutable {
      const auto& og = out.grad();
      auto& g = a.grad();
      for (int j = 0; j < d; ++j) g[argmax[static_cast<std::size_t>(j)] * d + j] += og[j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Compositions
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> dot(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.ndim() == 1 && b.ndim() == 1 && a.size() == b.size(),
                  "dot: need equal-length vectors");
  return sum(tape, mul(tape, a, b));
}

// dot(a,b) / (|a| * |b|), differentiable in both arguments. The evaluation
// order is symmetric in (a, b) so cosine(a,b) == cosine(b,a) bit-for-bit.
template <class T>
TensorT<T> cosine_similarity(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.ndim() == 1 && b.ndim() == 1, "cosine_similarity: inputs must be 1-D");
  detail::require(a.size() == b.size(), "cosine_similarity: length mismatch");
  double na = 0.0, nb = 0.0;
  for (const T x : a.values()) na += static_cast<double>(x) * static_cast<double>(x);
  for (const T x : b.values()) nb += static_cast<double>(x) * static_cast<double>(x);
  detail::require(na > 0.0, "cosine_similarity: zero-norm input");
  detail::require(nb > 0.0, "cosine_similarity: zero-norm input");
  TensorT<T> num = dot(tape, a, b);
  TensorT<T> norm_a = sqrt(tape, sum(tape, mul(tape, a, a)));
  TensorT<T> norm_b = sqrt(tape, sum(tape, mul(tape, b, b)));
  return div(tape, num, mul(tape, norm_a, norm_b));
}

// -log softmax(logits)[target] for a 1-D logit vector.
template <class T>
TensorT<T> softmax_cross_entropy(TapeT<T>& tape, const TensorT<T>& logits, int target) {
  detail::require(logits.ndim() == 1 && logits.size() >= 1,
                  "softmax_cross_entropy: logits must be a non-empty vector");
  detail::require(target >= 0 && target < logits.size(),
                  "softmax_cross_entropy: target index out of range");
  TensorT<T> row = reshape(tape, logits, {1, logits.size()});
  TensorT<T> losses = softmax_cross_entropy_rows(tape, row, {target});
  return reshape(tape, losses, {1});
}

// L2-normalizes each row of a matrix. Rows must have nonzero norm.
template <class T>
TensorT<T> normalize_rows(TapeT<T>& tape, const TensorT<T>& a) {
  detail::require(a.ndim() == 2, "normalize_rows: input must be 2-D");
  const int n = a.rows(), d = a.cols();
  const auto& av = a.values();
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += static_cast<double>(av[i * d + j]) * av[i * d + j];
    detail::require(s > 0.0, "normalize_rows: zero-norm row");
  }
  TensorT<T> norms = sqrt(tape, row_sum(tape, mul(tape, a, a)));
  TensorT<T> inv = div(tape, TensorT<T>::full({n}, T(1)), norms);
  return scale_rows(tape, a, inv);
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline Tensor normal_init(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& x : t.values()) x = static_cast<float>(rng.normal() * stddev);
  return t;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  double value = 0.0;  // f at the evaluation point
  int worst_input = -1;
  int worst_element = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Near-zero gradients are compared against this scale floor.
inline constexpr double kGradCheckFloor = 1e-5;

// Compares reverse-mode gradients against central finite differences
// (f(x+eps) - f(x-eps)) / (2 eps), element-wise. The analytic side runs the
// float tape under test; the difference quotient re-evaluates the same
// forward code at double precision, since float-precision function values
// would swamp the quotient with rounding noise at eps this small. Relative
// error is measured per input against its largest gradient magnitude, with an
// absolute floor for near-zero gradients.
//
// `f` must be callable as f(TapeT<U>&, std::vector<TensorT<U>>&) -> TensorT<U>
// for U in {float, double} (a generic lambda over the shared op vocabulary).
template <class Fn>
GradCheckReport grad_check(Fn&& f, const std::vector<Tensor>& inputs, double eps = 1e-3,
                           double tol = 1e-3) {
  detail::require(eps > 0.0, "grad_check: eps must be positive");
  // Analytic pass on the float tape.
  std::vector<Tensor> xs;
  xs.reserve(inputs.size());
  for (const auto& t : inputs) {
    xs.push_back(t.clone());
    xs.back().set_requires_grad(true);
  }
  TapeT<float> tape(true);
  Tensor out = f(tape, xs);
  if (!(out.defined() && out.size() == 1) || !std::isfinite(static_cast<double>(out.item())))
    throw std::runtime_error("grad_check: function value is not a finite scalar");
  tape.backward(out);

  GradCheckReport report;
  report.value = static_cast<double>(out.item());

  // Numeric pass at double precision.
  std::vector<TensorT<double>> base;
  base.reserve(xs.size());
  for (const auto& t : xs) base.push_back(t.template cast<double>());
  auto eval = [&]() {
    TapeT<double> quiet(false);
    TensorT<double> y = f(quiet, base);
    return y.item();
  };

  bool all_ok = true;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& analytic = xs[k].grad();
    std::vector<double> numeric(analytic.size());
    auto& slot = base[k].values();
    for (std::size_t e = 0; e < slot.size(); ++e) {
      const double x0 = slot[e];
      slot[e] = x0 + eps;
      const double fp = eval();
      slot[e] = x0 - eps;
      const double fm = eval();
      slot[e] = x0;
      numeric[e] = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(numeric[e])) all_ok = false;
    }
    double scale_k = kGradCheckFloor;
    for (std::size_t e = 0; e < numeric.size(); ++e) {
      scale_k = std::max(scale_k, std::abs(static_cast<double>(analytic[e])));
      scale_k = std::max(scale_k, std::abs(numeric[e]));
    }
    for (std::size_t e = 0; e < numeric.size(); ++e) {
      const double err = std::abs(static_cast<double>(analytic[e]) - numeric[e]) / scale_k;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_input = static_cast<int>(k);
        report.worst_element = static_cast<int>(e);
        report.worst_analytic = static_cast<double>(analytic[e]);
        report.worst_numeric = numeric[e];
      }
    }
  }
  report.pass = all_ok && report.max_rel_err <= tol;
  return report;
}

}  // namespace sembed
