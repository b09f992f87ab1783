// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense float64 arrays of rank <= 3 and a tape-based reverse-mode autodiff
// engine over them. Each forward op records its local gradient rule on the
// tape; backward() replays the tape in reverse creation order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "priormap/errors.hpp"
#include "priormap/rng.hpp"

namespace priormap {

class ShapeError : public NumericError {
 public:
  using NumericError::NumericError;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

/// Row-major dense array. Rank 0 is a scalar with one element.
class Array {
 public:
  Array() : data_(1, 0.0) {}
  explicit Array(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    if (shape_.size() > 3) throw ShapeError("Array: rank " + std::to_string(shape_.size()) + " exceeds 3");
    data_.assign(shape_size(shape_), fill);
  }
  Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.size() > 3) throw ShapeError("Array: rank " + std::to_string(shape_.size()) + " exceeds 3");
    if (data_.size() != shape_size(shape_))
      throw ShapeError("Array: data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }
  static Array vector(std::vector<double> v) {
    const auto n = v.size();
    return Array(Shape{n}, std::move(v));
  }
  static Array matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Array(Shape{r, c}, std::move(v));
  }
  static Array identity(std::size_t n) {
    Array a(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) a.at(i, i) = 1.0;
    return a;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  /// Extent of the last axis (1 for scalars).
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading axes.
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Array&, const Array&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_mat(const Array& a) {
  return ConstMatMap(a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}
inline MatMap as_mat(Array& a) {
  return MatMap(a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Parameters and optimizer state

struct Parameter {
  Array value;
  Array grad;
  Array m;  // Adam first moment
  Array v;  // Adam second moment
};

/// Named trainable parameters, iterated in name order.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Parameter& add(const std::string& name, Array init) {
    if (params_.count(name)) throw UsageError("ParamStore: duplicate parameter '" + name + "'");
    Parameter p;
    p.grad = Array(init.shape());
    p.m = Array(init.shape());
    p.v = Array(init.shape());
    p.value = std::move(init);
    return params_.emplace(name, std::move(p)).first->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }
  const Array& value(const std::string& name) const { return at(name).value; }
  Array& value(const std::string& name) { return at(name).value; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grads() {
    for (auto& [_, p] : params_) p.grad.fill(0.0);
    grads_pending_ = false;
  }
  bool grads_pending() const { return grads_pending_; }
  void mark_grads_pending() { grads_pending_ = true; }

  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t s) { seed_ = s; }
  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

 private:
  std::map<std::string, Parameter> params_;
  std::uint64_t seed_;
  std::uint64_t step_ = 0;
  bool grads_pending_ = false;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update. Consumes and clears the pending gradients.
inline void adam_step(ParamStore& store, const AdamConfig& cfg) {
  for (const auto& [name, p] : store)
    if (!p.grad.all_finite()) throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
  const std::uint64_t t = store.step() + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, p] : store) {
    auto& w = p.value.storage();
    const auto& g = p.grad.storage();
    auto& m = p.m.storage();
    auto& v = p.v.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  store.set_step(t);
  store.zero_grads();
}

// ---------------------------------------------------------------------------
// Tape

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
};

enum class GradMode { fresh, accumulate };

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array a) { return push(std::move(a), false, nullptr); }

  /// Leaf bound to a stored parameter; repeated calls return the same node.
  Var param(const ParamStore& store, const std::string& name) {
    if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return {this, it->second};
    nodes_.push_back(Node{Array(Shape{0}), Array(), true, nullptr});
    nodes_.back().borrowed = &store.value(name);
    param_nodes_.emplace(name, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  const Array& value(Var v) const {
    const auto& n = nodes_[v.id];
    return n.borrowed != nullptr ? *n.borrowed : n.value;
  }
  const Array& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Records an op result. The backward rule receives the output gradient
  /// and pushes contributions into its inputs via accumulate().
  Var push(Array value, bool requires_grad, std::function<void(const Array&)> backward,
           const char* op = nullptr) {
    if (op != nullptr && !value.all_finite())
      throw NumericError(std::string("op '") + op + "': non-finite value in output of shape " +
                         shape_str(value.shape()));
    nodes_.push_back(Node{std::move(value), Array(), requires_grad, std::move(backward)});
    return {this, nodes_.size() - 1};
  }

  void set_backward(Var v, std::function<void(const Array&)> backward) {
    if (nodes_[v.id].requires_grad) nodes_[v.id].backward = std::move(backward);
  }

  /// grad(v) += g, allocating on first use.
  void accumulate(Var v, Array g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
      return;
    }
    auto& dst = n.grad.storage();
    const auto& src = g.storage();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  Array& grad_buffer(Var v) {
    auto& n = nodes_[v.id];
    if (!n.has_grad) {
      n.grad = Array(value(v).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Reverse pass from a scalar loss. Parameter gradients are added into
  /// the store. With GradMode::fresh the store must not hold gradients from
  /// an earlier pass that were never consumed or zeroed.
  void backward(Var loss, ParamStore& store, GradMode mode = GradMode::fresh) {
    if (value(loss).size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    if (mode == GradMode::fresh && store.grads_pending())
      throw UsageError("backward: gradients already populated; call zero_grads() or use GradMode::accumulate");
    run_backward(loss);
    for (const auto& [name, id] : param_nodes_) {
      const auto& n = nodes_[id];
      if (!n.has_grad) continue;
      auto& dst = store.at(name).grad.storage();
      const auto& src = n.grad.storage();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    store.mark_grads_pending();
  }

  /// Reverse pass without a parameter store; leaf gradients are read back
  /// through grad().
  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    run_backward(loss);
  }

 private:
  struct Node {
    Array value;
    Array grad;
    bool requires_grad = false;
    std::function<void(const Array&)> backward;
    bool has_grad = false;
    const Array* borrowed = nullptr;  // parameter leaves read the store directly
  };

  void run_backward(Var loss) {
    if (backward_done_) throw UsageError("backward: tape already consumed");
    backward_done_ = true;
    auto& root = nodes_[loss.id];
    root.grad = Array(value(loss).shape(), 1.0);
    root.has_grad = true;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(n.grad);
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_nodes_;
  bool backward_done_ = false;
};

inline const Array& Var::value() const { return tape->value(*this); }

namespace detail {
inline Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) throw UsageError(std::string(op) + ": operands live on different tapes");
  return *a.tape;
}
inline bool any_grad(std::initializer_list<Var> vs) {
  for (auto v : vs)
    if (v.tape->requires_grad(v)) return true;
  return false;
}
[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b. b may also be rank 1 with the length of a's last axis (row bias).
inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "add");
  const Array& av = a.value();
  const Array& bv = b.value();
  const bool bias = bv.rank() == 1 && av.rank() >= 1 && bv.dim(0) == av.cols() && av.shape() != bv.shape();
  if (!bias && av.shape() != bv.shape()) detail::shape_mismatch("add", av.shape(), bv.shape());
  Array out = av;
  auto& o = out.storage();
  const auto& bs = bv.storage();
  if (bias) {
    const std::size_t c = av.cols();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bs[i % c];
  } else {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bs[i];
  }
  return t.push(std::move(out), detail::any_grad({a, b}), [a, b, bias, &t](const Array& g) {
    t.accumulate(a, g);
    if (!t.requires_grad(b)) return;
    if (!bias) {
      t.accumulate(b, g);
      return;
    }
    Array gb(b.value().shape());
    const std::size_t c = gb.size();
    const auto& gs = g.storage();
    for (std::size_t i = 0; i < gs.size(); ++i) gb[i % c] += gs[i];
    t.accumulate(b, std::move(gb));
  }, "add");
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Array out = a.value();
  for (auto& v : out.storage()) v *= s;
  return t.push(std::move(out), t.requires_grad(a), [a, s, &t](const Array& g) {
    Array ga = g;
    for (auto& v : ga.storage()) v *= s;
    t.accumulate(a, std::move(ga));
  }, "scale");
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "sub");
  if (a.shape() != b.shape()) detail::shape_mismatch("sub", a.shape(), b.shape());
  Array out = a.value();
  auto& o = out.storage();
  const auto& bs = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bs[i];
  return t.push(std::move(out), detail::any_grad({a, b}), [a, b, &t](const Array& g) {
    t.accumulate(a, g);
    if (!t.requires_grad(b)) return;
    Array gb = g;
    for (auto& v : gb.storage()) v = -v;
    t.accumulate(b, std::move(gb));
  }, "sub");
}

/// Elementwise product of equal shapes.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "mul");
  if (a.shape() != b.shape()) detail::shape_mismatch("mul", a.shape(), b.shape());
  Array out = a.value();
  auto& o = out.storage();
  const auto& bs = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bs[i];
  return t.push(std::move(out), detail::any_grad({a, b}), [a, b, &t](const Array& g) {
    const auto& gs = g.storage();
    if (t.requires_grad(a)) {
      Array ga = g;
      const auto& bs2 = b.value().storage();
      for (std::size_t i = 0; i < gs.size(); ++i) ga[i] = gs[i] * bs2[i];
      t.accumulate(a, std::move(ga));
    }
    if (t.requires_grad(b)) {
      Array gb = g;
      const auto& as = a.value().storage();
      for (std::size_t i = 0; i < gs.size(); ++i) gb[i] = gs[i] * as[i];
      t.accumulate(b, std::move(gb));
    }
  }, "mul");
}

inline Var square(Var a) {
  Tape& t = *a.tape;
  Array out = a.value();
  for (auto& v : out.storage()) v *= v;
  return t.push(std::move(out), t.requires_grad(a), [a, &t](const Array& g) {
    Array ga = g;
    const auto& as = a.value().storage();
    for (std::size_t i = 0; i < as.size(); ++i) ga[i] *= 2.0 * as[i];
    t.accumulate(a, std::move(ga));
  }, "square");
}

inline Var sqrt(Var a) {
  Tape& t = *a.tape;
  Array out = a.value();
  for (auto& v : out.storage()) {
    if (v < 0.0) throw NumericError("op 'sqrt': negative input");
    v = std::sqrt(v);
  }
  Var y = t.push(std::move(out), t.requires_grad(a), nullptr, "sqrt");
  t.set_backward(y, [a, y, &t](const Array& g) {
    Array ga = g;
    const auto& ys = y.value().storage();
    for (std::size_t i = 0; i < ys.size(); ++i) {
      if (ys[i] == 0.0) throw NumericError("op 'sqrt': gradient undefined at zero");
      ga[i] *= 0.5 / ys[i];
    }
    t.accumulate(a, std::move(ga));
  });
  return y;
}

inline Var gelu(Var a) {
  Tape& t = *a.tape;
  Array out = a.value();
  for (auto& v : out.storage()) v = 0.5 * v * (1.0 + std::erf(v * 0.7071067811865476));
  return t.push(std::move(out), t.requires_grad(a), [a, &t](const Array& g) {
    Array ga = g;
    const auto& xs = a.value().storage();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x = xs[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] *= cdf + x * pdf;
    }
    t.accumulate(a, std::move(ga));
  }, "gelu");
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : a.value().storage()) s += v;
  return t.push(Array::scalar(s), t.requires_grad(a), [a, &t](const Array& g) {
    t.accumulate(a, Array(a.value().shape(), g[0]));
  }, "sum");
}

inline Var mean(Var a) {
  Tape& t = *a.tape;
  const auto n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().storage()) s += v;
  return t.push(Array::scalar(s / n), t.requires_grad(a), [a, n, &t](const Array& g) {
    t.accumulate(a, Array(a.value().shape(), g[0] / n));
  }, "mean");
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n].
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    detail::shape_mismatch("matmul", av.shape(), bv.shape());
  Array out(Shape{av.dim(0), bv.dim(1)});
  detail::as_mat(out).noalias() = detail::as_mat(av) * detail::as_mat(bv);
  return t.push(std::move(out), detail::any_grad({a, b}), [a, b, &t](const Array& g) {
    if (t.requires_grad(a)) {
      Array ga(a.value().shape());
      detail::as_mat(ga).noalias() = detail::as_mat(g) * detail::as_mat(b.value()).transpose();
      t.accumulate(a, std::move(ga));
    }
    if (t.requires_grad(b)) {
      Array gb(b.value().shape());
      detail::as_mat(gb).noalias() = detail::as_mat(a.value()).transpose() * detail::as_mat(g);
      t.accumulate(b, std::move(gb));
    }
  }, "matmul");
}

/// [m,k] x [n,k]^T -> [m,n].
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul_nt");
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
    detail::shape_mismatch("matmul_nt", av.shape(), bv.shape());
  Array out(Shape{av.dim(0), bv.dim(0)});
  detail::as_mat(out).noalias() = detail::as_mat(av) * detail::as_mat(bv).transpose();
  return t.push(std::move(out), detail::any_grad({a, b}), [a, b, &t](const Array& g) {
    if (t.requires_grad(a)) {
      Array ga(a.value().shape());
      detail::as_mat(ga).noalias() = detail::as_mat(g) * detail::as_mat(b.value());
      t.accumulate(a, std::move(ga));
    }
    if (t.requires_grad(b)) {
      Array gb(b.value().shape());
      detail::as_mat(gb).noalias() = detail::as_mat(g).transpose() * detail::as_mat(a.value());
      t.accumulate(b, std::move(gb));
    }
  }, "matmul_nt");
}

// ---------------------------------------------------------------------------
// Layout

/// Columns [offset, offset + width) of the last axis.
inline Var slice_last_dim(Var a, std::size_t offset, std::size_t width) {
  Tape& t = *a.tape;
  const Array& av = a.value();
  if (av.rank() == 0 || offset + width > av.cols())
    throw ShapeError("slice_last_dim: range [" + std::to_string(offset) + "," + std::to_string(offset + width) +
                     ") out of bounds for shape " + shape_str(av.shape()));
  Shape s = av.shape();
  s.back() = width;
  Array out(s);
  const std::size_t rows = av.rows();
  const std::size_t c = av.cols();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(r * c + offset), width,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  return t.push(std::move(out), t.requires_grad(a), [a, offset, width, rows, c, &t](const Array& g) {
    Array& ga = t.grad_buffer(a);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < width; ++k) ga[r * c + offset + k] += g[r * width + k];
  }, "slice_last_dim");
}

inline std::vector<Var> split_last_dim(Var a, std::size_t parts) {
  const std::size_t c = a.value().cols();
  if (parts == 0 || c % parts != 0)
    throw ShapeError("split_last_dim: " + std::to_string(c) + " columns not divisible into " + std::to_string(parts));
  std::vector<Var> out;
  const std::size_t w = c / parts;
  for (std::size_t p = 0; p < parts; ++p) out.push_back(slice_last_dim(a, p * w, w));
  return out;
}

inline Var concat_last_dim(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_last_dim: no inputs");
  Tape& t = *parts[0].tape;
  const Shape& s0 = parts[0].value().shape();
  std::size_t total = 0;
  bool grad = false;
  for (const auto& p : parts) {
    const Shape& s = p.value().shape();
    if (p.tape != &t) throw UsageError("concat_last_dim: operands live on different tapes");
    if (s.size() != s0.size() || s.empty() || !std::equal(s.begin(), s.end() - 1, s0.begin()))
      detail::shape_mismatch("concat_last_dim", s0, s);
    total += s.back();
    grad = grad || t.requires_grad(p);
  }
  Shape so = s0;
  so.back() = total;
  Array out(so);
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < w; ++k) out[r * total + off + k] = p.value()[r * w + k];
    off += w;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.push(std::move(out), grad, [inputs, offsets, rows, total, &t](const Array& g) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!t.requires_grad(inputs[i])) continue;
      Array& gi = t.grad_buffer(inputs[i]);
      const std::size_t w = gi.cols();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < w; ++k) gi[r * w + k] += g[r * total + offsets[i] + k];
    }
  }, "concat_last_dim");
}

inline Var concat_last_dim(std::initializer_list<Var> parts) {
  return concat_last_dim(std::span<const Var>(parts.begin(), parts.size()));
}

/// Rows of a [V,d] table selected by index -> [n,d]. Backward scatter-adds.
inline Var embedding_lookup(Var table, std::span<const std::size_t> indices) {
  Tape& t = *table.tape;
  const Array& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(tv.shape()));
  const std::size_t d = tv.dim(1);
  Array out(Shape{indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.dim(0))
      throw ShapeError("embedding_lookup: index " + std::to_string(indices[i]) + " out of range for table " +
                       shape_str(tv.shape()));
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return t.push(std::move(out), t.requires_grad(table), [table, idx, d, &t](const Array& g) {
    Array& gt = t.grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) gt[idx[i] * d + k] += g[i * d + k];
  }, "embedding_lookup");
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

inline constexpr double kMaskedLogit = -1e9;

/// Softmax over the last axis after adding `mask` (0 keeps an entry,
/// kMaskedLogit removes it). A row whose entries are all masked comes out
/// uniform.
inline Var softmax_last_dim(Var a, const Array* mask = nullptr) {
  Tape& t = *a.tape;
  const Array& av = a.value();
  if (mask != nullptr && mask->shape() != av.shape()) detail::shape_mismatch("softmax_last_dim", av.shape(), mask->shape());
  Array out = av;
  if (mask != nullptr)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*mask)[i];
  const std::size_t rows = out.rows();
  const std::size_t c = out.cols();
  // Rows with every entry masked get uniform weights and no gradient.
  std::vector<char> blocked(rows, 0);
  if (mask != nullptr)
    for (std::size_t r = 0; r < rows; ++r) {
      const double* mr = mask->data().data() + r * c;
      blocked[r] = c > 0 && std::all_of(mr, mr + c, [](double v) { return v <= 0.5 * kMaskedLogit; });
    }
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data().data() + r * c;
    if (blocked[r]) {
      std::fill(row, row + c, 1.0 / static_cast<double>(c));
      continue;
    }
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      // exp underflows to exactly 0 this far below the row maximum; skip it.
      row[k] = row[k] - mx < -700.0 ? 0.0 : std::exp(row[k] - mx);
      s += row[k];
    }
    for (std::size_t k = 0; k < c; ++k) row[k] /= s;
  }
  Var y = t.push(std::move(out), t.requires_grad(a), nullptr, "softmax_last_dim");
  t.set_backward(y, [a, y, rows, c, blocked = std::move(blocked), &t](const Array& g) {
    Array& ga = t.grad_buffer(a);
    const Array& yv = y.value();
    for (std::size_t r = 0; r < rows; ++r) {
      if (blocked[r]) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += g[r * c + k] * yv[r * c + k];
      for (std::size_t k = 0; k < c; ++k) ga[r * c + k] += yv[r * c + k] * (g[r * c + k] - dot);
    }
  });
  return y;
}

/// (x - mean) / sqrt(var + eps) * gamma + beta over the last axis.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = detail::same_tape(x, gamma, "layer_norm");
  const Array& xv = x.value();
  const std::size_t d = xv.cols();
  if (gamma.value().shape() != Shape{d} || beta.value().shape() != Shape{d})
    detail::shape_mismatch("layer_norm", xv.shape(), gamma.value().shape());
  const std::size_t rows = xv.rows();
  Array xhat(xv.shape());
  std::vector<double> inv_std(rows);
  Array out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t k = 0; k < d; ++k) mu += row[k];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (row[k] - mu) * (row[k] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t k = 0; k < d; ++k) {
      const double h = (row[k] - mu) * is;
      xhat[r * d + k] = h;
      out[r * d + k] = h * gv[k] + bv[k];
    }
  }
  return t.push(std::move(out), detail::any_grad({x, gamma, beta}),
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d, &t](const Array& g) {
    const auto& gv2 = gamma.value();
    if (t.requires_grad(gamma) || t.requires_grad(beta)) {
      Array gg(Shape{d});
      Array gb(Shape{d});
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < d; ++k) {
          gg[k] += g[r * d + k] * xhat[r * d + k];
          gb[k] += g[r * d + k];
        }
      t.accumulate(gamma, std::move(gg));
      t.accumulate(beta, std::move(gb));
    }
    if (!t.requires_grad(x)) return;
    Array& gx = t.grad_buffer(x);
    const double dd = static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double s1 = 0.0;
      double s2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double dh = g[r * d + k] * gv2[k];
        s1 += dh;
        s2 += dh * xhat[r * d + k];
      }
      for (std::size_t k = 0; k < d; ++k) {
        const double dh = g[r * d + k] * gv2[k];
        gx[r * d + k] += inv_std[r] * (dh - s1 / dd - xhat[r * d + k] * s2 / dd);
      }
    }
  }, "layer_norm");
}

}  // namespace priormap
