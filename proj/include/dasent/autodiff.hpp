#pragma once

// Reverse-mode differentiation over small dense tensors.
//
// A Tape records every forward op as a node holding its value and a closure
// that pushes the node's gradient into its inputs. Parameters enter the tape
// by reference, so backward() accumulates straight into Parameter::grad.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dasent/errors.hpp"
#include "dasent/rng.hpp"

namespace dasent::ad {

class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > kMaxRank) throw ShapeError("tensor rank above " + std::to_string(kMaxRank));
    for (std::size_t d : dims) dims_[rank_++] = d;
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t back() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }

  std::size_t size() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  Shape with(std::size_t axis, std::size_t extent) const {
    Shape s = *this;
    s.dims_[axis] = extent;
    return s;
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (std::size_t i = 0; i < a.rank_; ++i)
      if (a.dims_[i] != b.dims_[i]) return false;
    return true;
  }

  std::string to_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) s += "x";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), values_(shape.size(), fill) {
    if (!std::isfinite(fill)) throw NumericError("non-finite fill value");
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.size())
      throw ShapeError("shape " + shape_.to_string() + " needs " + std::to_string(shape_.size()) +
                       " values, got " + std::to_string(values_.size()));
    check_finite("tensor construction");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{1, n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.rank(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * shape_.back() + c]; }
  double item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_.to_string());
    return values_[0];
  }

  std::span<const double> values() const { return values_; }

  /// Raw write access for kernels. Callers re-validate with check_finite().
  std::span<double> mutable_values() { return values_; }

  void set(std::size_t i, double v) {
    if (!std::isfinite(v)) throw NumericError("non-finite value written at index " + std::to_string(i));
    values_[i] = v;
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  void check_finite(const std::string& context) const {
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (!std::isfinite(values_[i]))
        throw NumericError("non-finite value in " + context + " at index " + std::to_string(i) + " of " +
                           shape_.to_string());
  }

 private:
  Shape shape_;
  std::vector<double> values_;
};

struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor value_) : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    value.check_finite("constant");
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf bound to a trainable parameter; backward() adds into p.grad.
  Var param(Parameter& p) {
    if (!(p.grad.shape() == p.value.shape())) throw ShapeError("parameter " + p.name + " grad shape mismatch");
    Node n;
    n.external = &p.value;
    n.external_grad = &p.grad;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Read-only leaf viewing an external tensor (inference path).
  Var reference(const Tensor& value) {
    Node n;
    n.external = &value;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Appends the result of an op. `fn` is dropped when no input needs a gradient.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    value.check_finite(op);
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape_ != this) throw std::invalid_argument(std::string(op) + ": input from a different tape");
      needs = needs || nodes_[v.id_].requires_grad;
    }
    Node n;
    n.owned = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.external_grad) return *n.external_grad;
    if (!n.grad) n.grad.emplace(value(id).shape());
    return *n.grad;
  }

  /// Accumulates d(loss)/d(node) for every reachable node, visiting each node
  /// once in reverse recording order. Parameter gradients are added to, never
  /// overwritten, so successive calls sum their losses' gradients.
  void backward(Var loss) {
    if (loss.tape_ != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (value(loss.id_).size() != 1)
      throw ShapeError("backward on non-scalar of shape " + value(loss.id_).shape().to_string());
    for (Node& n : nodes_) n.grad.reset();
    if (!nodes_[loss.id_].requires_grad) return;
    Tensor& seed = grad(loss.id_);
    seed.mutable_values()[0] += 1.0;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward || !n.grad) continue;
      n.backward(*this, id);
    }
    for (Node& n : nodes_)
      if (n.external_grad) n.external_grad->check_finite("gradient");
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* external_grad = nullptr;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  // deque: references to existing nodes survive push_back.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void axpy(std::span<double> dst, std::span<const double> src, double a = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Fwd, typename Deriv>
Var unary(const char* op, Var a, Fwd fwd, Deriv deriv_from_out) {
  Tensor out(a.shape());
  auto o = out.mutable_values();
  auto x = a.value().values();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = fwd(x[i]);
  const std::size_t ia = a.id();
  return a.tape().record(op, std::move(out), {a}, [ia, deriv_from_out](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    auto y = t.value(self).values();
    auto x = t.value(ia).values();
    auto g = t.grad(self).values();
    auto ga = t.grad(ia).mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv_from_out(x[i], y[i]);
  });
}

}  // namespace detail

/// C[m x n] = A[m x k] . B[k x n]
inline Var matmul(Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() != 2 || sb.rank() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: incompatible shapes " + sa.to_string() + " and " + sb.to_string());
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out(Shape{m, n});
  {
    auto c = out.mutable_values();
    auto av = a.value().values();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = &bv[p * n];
        double* crow = &c[i * n];
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    auto g = t.grad(self).values();
    if (t.requires_grad(ia)) {
      // dA = dC . B^T
      auto bv = t.value(ib).values();
      auto ga = t.grad(ia).mutable_values();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (t.requires_grad(ib)) {
      // dB = A^T . dC
      auto av = t.value(ia).values();
      auto gb = t.grad(ib).mutable_values();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

/// Elementwise sum. `b` may also be a vector matching a's last extent, in
/// which case it is added to every row.
inline Var add(Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool same = sa == sb;
  const bool bias = !same && sb.rank() == 1 && sa.rank() >= 1 && sb[0] == sa.back();
  if (!same && !bias) throw ShapeError("add: incompatible shapes " + sa.to_string() + " and " + sb.to_string());
  Tensor out = a.value();
  {
    auto o = out.mutable_values();
    auto bv = b.value().values();
    const std::size_t w = bv.size();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[same ? i : i % w];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [ia, ib, same](Tape& t, std::size_t self) {
    auto g = t.grad(self).values();
    if (t.requires_grad(ia)) detail::axpy(t.grad(ia).mutable_values(), g);
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib).mutable_values();
      if (same) {
        detail::axpy(gb, g);
      } else {
        const std::size_t w = gb.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % w] += g[i];
      }
    }
  });
}

/// Elementwise (Hadamard) product of equal shapes.
inline Var mul(Var a, Var b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("mul: incompatible shapes " + a.shape().to_string() + " and " + b.shape().to_string());
  Tensor out = a.value();
  {
    auto o = out.mutable_values();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self).values();
    if (t.requires_grad(ia)) {
      auto bv = t.value(ib).values();
      auto ga = t.grad(ia).mutable_values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto av = t.value(ia).values();
      auto gb = t.grad(ib).mutable_values();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double c) {
  return detail::unary(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

/// Sum of all elements, as a scalar.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const double g = t.grad(self)[0];
    for (double& v : t.grad(ia).mutable_values()) v += g;
  });
}

inline Var sigmoid(Var a) {
  return detail::unary("sigmoid", a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// relu'(0) is taken as 0.
inline Var relu(Var a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.rank()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + first.to_string());
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.rank() == first.rank();
    for (std::size_t d = 0; ok && d < s.rank(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw ShapeError("concat: incompatible shapes " + first.to_string() + " and " + s.to_string());
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.rank(); ++d) inner *= first[d];

  const Shape out_shape = first.with(axis, total);
  Tensor out(out_shape);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;  // extent along axis times inner
  {
    auto o = out.mutable_values();
    const std::size_t row = total * inner;
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t w = p.shape()[axis] * inner;
      auto v = p.value().values();
      for (std::size_t r = 0; r < outer; ++r) std::copy_n(&v[r * w], w, &o[r * row + offset]);
      offset += w;
      ids.push_back(p.id());
      widths.push_back(w);
    }
  }
  Tape& tape = parts[0].tape();
  return tape.record("concat", std::move(out), parts,
                     [ids, widths, outer, row = total * inner](Tape& t, std::size_t self) {
                       auto g = t.grad(self).values();
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         const std::size_t w = widths[k];
                         if (t.requires_grad(ids[k])) {
                           auto gp = t.grad(ids[k]).mutable_values();
                           for (std::size_t r = 0; r < outer; ++r)
                             for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * row + offset + j];
                         }
                         offset += w;
                       }
                     });
}

inline Var concat(Var a, Var b, std::size_t axis) {
  const std::array<Var, 2> parts{a, b};
  return concat(std::span<const Var>(parts), axis);
}

/// Gathers rows of a [V x d] table. Backward scatter-adds, so a repeated
/// index receives the sum of its rows' upstream gradients.
inline Var embedding_lookup(Var table, std::span<const int> indices) {
  const Shape& st = table.shape();
  if (st.rank() != 2) throw ShapeError("embedding_lookup: table must be a matrix, got " + st.to_string());
  const std::size_t vocab = st[0], dim = st[1];
  for (int i : indices)
    if (i < 0 || static_cast<std::size_t>(i) >= vocab)
      throw std::out_of_range("embedding_lookup: index " + std::to_string(i) + " outside [0, " +
                              std::to_string(vocab) + ")");
  Tensor out(Shape{indices.size(), dim});
  {
    auto o = out.mutable_values();
    auto tv = table.value().values();
    for (std::size_t r = 0; r < indices.size(); ++r)
      std::copy_n(&tv[static_cast<std::size_t>(indices[r]) * dim], dim, &o[r * dim]);
  }
  const std::size_t it = table.id();
  std::vector<int> idx(indices.begin(), indices.end());
  return table.tape().record("embedding_lookup", std::move(out), {table},
                             [it, idx = std::move(idx), dim](Tape& t, std::size_t self) {
                               if (!t.requires_grad(it)) return;
                               auto g = t.grad(self).values();
                               auto gt = t.grad(it).mutable_values();
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                 double* dst = &gt[static_cast<std::size_t>(idx[r]) * dim];
                                 for (std::size_t j = 0; j < dim; ++j) dst[j] += g[r * dim + j];
                               }
                             });
}

/// Inverted dropout: survivors are scaled by 1/(1-rate) so inference is the identity.
inline Var dropout(Var a, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(a.value().size());
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = a.value();
  {
    auto o = out.mutable_values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= mask[i];
  }
  const std::size_t ia = a.id();
  return a.tape().record("dropout", std::move(out), {a}, [ia, mask = std::move(mask)](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    auto g = t.grad(self).values();
    auto ga = t.grad(ia).mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

/// Numerically stable softmax over all entries of `logits`.
inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

/// -log softmax(logits)[gold]; the logits tensor is treated as a flat K-vector.
inline Var softmax_cross_entropy(Var logits, std::size_t gold) {
  const auto x = logits.value().values();
  const std::size_t k = x.size();
  if (k < 2) throw ShapeError("softmax_cross_entropy: need at least 2 classes");
  if (gold >= k)
    throw std::out_of_range("softmax_cross_entropy: gold class " + std::to_string(gold) + " outside [0, " +
                            std::to_string(k) + ")");
  const double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  const double loss = std::log(z) + mx - x[gold];
  const std::size_t il = logits.id();
  return logits.tape().record("softmax_cross_entropy", Tensor::scalar(loss), {logits},
                              [il, gold](Tape& t, std::size_t self) {
                                if (!t.requires_grad(il)) return;
                                const double g = t.grad(self)[0];
                                const auto p = softmax(t.value(il).values());
                                auto gl = t.grad(il).mutable_values();
                                for (std::size_t i = 0; i < p.size(); ++i)
                                  gl[i] += g * (p[i] - (i == gold ? 1.0 : 0.0));
                              });
}

inline void backward(Var loss) { loss.tape().backward(loss); }

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

/// value -= lr * grad, then grads are cleared.
inline void sgd_step(std::span<Parameter* const> params, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  for (Parameter* p : params) {
    auto v = p->value.mutable_values();
    auto g = p->grad.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    p->value.check_finite("parameter " + p->name);
    p->zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

/// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
/// gradient is ~0 from reporting round-off as a large relative error.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string param;  // worst coordinate
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

using LossBuilder = std::function<Var(Tape&)>;

/// Compares backward() against central differences (f(x+eps)-f(x-eps))/(2 eps)
/// for every coordinate of `params` (or a seeded sample of `max_coords` per
/// parameter when nonzero). Parameter values are restored afterwards; grads
/// are left zeroed.
inline GradCheckResult grad_check(const LossBuilder& f, std::span<Parameter* const> params, double eps = 1e-3,
                                  std::size_t max_coords = 0, std::uint64_t seed = 0, double floor = 1e-6) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  zero_grads(params);
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);
  zero_grads(params);

  auto eval = [&] {
    Tape tape;
    return f(tape).value().item();
  };

  GradCheckResult res;
  Rng rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    std::vector<std::size_t> coords(p.value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords && coords.size() > max_coords) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      auto v = p.value.mutable_values();
      const double orig = v[i];
      v[i] = orig + eps;
      const double up = eval();
      v[i] = orig - eps;
      const double down = eval();
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = relative_error(a, numeric, floor);
      if (res.checked++ == 0 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.param = p.name;
        res.coordinate = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  zero_grads(params);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   dasent-checkpoint 1
//   params <count>
//   <name> <rank> <extent>...
//   <value> <value> ...            (shortest round-trip decimal)

inline constexpr const char* kCheckpointMagic = "dasent-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void save_checkpoint(std::ostream& os, std::span<const Parameter* const> params) {
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "params " << params.size() << '\n';
  for (const Parameter* p : params) {
    const Shape& s = p->value.shape();
    os << p->name << ' ' << s.rank();
    for (std::size_t d = 0; d < s.rank(); ++d) os << ' ' << s[d];
    os << '\n';
    bool first = true;
    for (double v : p->value.values()) {
      if (!first) os << ' ';
      os << format_double(v);
      first = false;
    }
    os << '\n';
  }
}

/// Restores values into `params`; names and shapes must match in order.
inline void load_checkpoint(std::istream& is, std::span<Parameter* const> params) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != kCheckpointMagic)
    throw DataError("checkpoint: missing header");
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  std::string tag;
  std::size_t count = 0;
  if (!(is >> tag >> count) || tag != "params") throw DataError("checkpoint: missing parameter count");
  if (count != params.size())
    throw DataError("checkpoint: holds " + std::to_string(count) + " parameters, model has " +
                    std::to_string(params.size()));
  for (Parameter* p : params) {
    std::string name;
    std::size_t rank = 0;
    if (!(is >> name >> rank)) throw DataError("checkpoint: truncated before " + p->name);
    if (name != p->name) throw DataError("checkpoint: expected parameter " + p->name + ", found " + name);
    const Shape& s = p->value.shape();
    bool ok = rank == s.rank();
    for (std::size_t d = 0; d < rank; ++d) {
      std::size_t e = 0;
      is >> e;
      ok = ok && d < s.rank() && e == s[d];
    }
    if (!ok) throw DataError("checkpoint: shape mismatch for " + name);
    std::vector<double> vals(s.size());
    for (double& v : vals) {
      std::string tok;
      if (!(is >> tok)) throw DataError("checkpoint: truncated values for " + name);
      auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (r.ec != std::errc() || r.ptr != tok.data() + tok.size())
        throw DataError("checkpoint: bad number '" + tok + "' in " + name);
    }
    p->value = Tensor(s, std::move(vals));
    p->grad = Tensor(s);
  }
}

}  // namespace dasent::ad
