#pragma once

#include <Eigen/Core>

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "clora/errors.hpp"
#include "clora/random.hpp"
#include "clora/tensor.hpp"

namespace clora {

/// A named model weight. `trainable` decides whether the tape tracks it and
/// whether an optimizer may touch it.
template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = false;
  bool has_grad = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool train = false)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}

  std::size_t numel() const noexcept { return value.size(); }

  void zero_grad() {
    has_grad = false;
    if (!grad.empty()) grad.fill(T{0});
  }
};

template <std::floating_point T>
class Tape;

namespace detail {
// (x - x) is 0 for finite x and NaN otherwise; Eigen vectorises the sum.
template <class T>
bool finite(const Tensor<T>& t) {
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> a(t.ptr(), static_cast<Eigen::Index>(t.size()));
  return (a - a).sum() == T(0);
}
}  // namespace detail

/// Handle to a node recorded on a Tape.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order and replays their gradient rules in
/// reverse. One tape per forward pass; backward may run once.
template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.value = &n.owned;
    return {this, nodes_.size() - 1};
  }

  /// Reads the parameter in place; the parameter must outlive the tape.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Node& n = nodes_.emplace_back();
    n.value = &p.value;
    n.requires_grad = p.trainable;
    n.param = &p;
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Appends an operation result. The gradient rule is kept only when at least
  /// one input participates in differentiation.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
    if (backward_done_) throw StateError("tape already consumed by backward(); start a new tape");
    bool rg = false;
    for (const Var<T>& in : inputs) {
      if (&in.tape() != this) throw StateError("operation mixes variables from different tapes");
      rg = rg || nodes_[in.id()].requires_grad;
    }
    if (!detail::finite(value)) throw NumericError("non-finite value produced by a tape operation");
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.value = &n.owned;
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return *nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of a node, zero-initialised on first touch.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value->shape(), T{0});
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return backward_done_; }

  /// Propagates d(loss)/d(node) to every node and writes the result into the
  /// `grad` of each trainable parameter used on this tape. Gradients are not
  /// accumulated across calls: a parameter still holding an unconsumed
  /// gradient raises StateError.
  void backward(Var<T> loss) {
    if (backward_done_) throw StateError("backward() called twice on the same tape");
    if (&loss.tape() != this) throw StateError("loss belongs to a different tape");
    if (loss.value().size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    for (auto& [p, id] : param_nodes_) {
      if (p->trainable && p->has_grad) {
        throw StateError("parameter '" + p->name + "' still holds a gradient; call zero_grad() before another backward");
      }
    }
    backward_done_ = true;
    if (nodes_[loss.id()].requires_grad) {
      grad(loss.id())[0] = T{1};
      for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
      }
    }
    for (auto& [p, id] : param_nodes_) {
      if (!p->trainable) continue;
      Node& n = nodes_[id];
      p->grad = n.grad.empty() ? Tensor<T>(p->value.shape(), T{0}) : std::move(n.grad);
      p->has_grad = true;
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* value = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  std::unordered_map<Parameter<T>*, std::size_t> param_nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
MatMap<T> mat(Tensor<T>& t) {
  return MatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <class T>
CMatMap<T> mat(const Tensor<T>& t) {
  return CMatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline void require_matrix(const Shape& s, const char* op) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(s));
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace detail

/// C[m x n] = A[m x k] * B[k x n].
template <std::floating_point T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  Tensor<T> out({sa[0], sb[1]}, Tensor<T>::uninitialized);
  detail::mat(out).noalias() = detail::mat(a.value()) * detail::mat(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) detail::mat(t.grad(ia)).noalias() += detail::mat(g) * detail::mat(t.value(ib)).transpose();
    if (t.requires_grad(ib)) detail::mat(t.grad(ib)).noalias() += detail::mat(t.value(ia)).transpose() * detail::mat(g);
  });
}

/// y = x * W^T (+ bias). W is stored [out x in], matching h = W x for column inputs.
template <std::floating_point T>
Var<T> linear(Var<T> x, Var<T> weight) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1]) {
    throw ShapeError("linear: input " + shape_str(sx) + " does not match weight " + shape_str(sw));
  }
  Tensor<T> out({sx[0], sw[0]}, Tensor<T>::uninitialized);
  detail::mat(out).noalias() = detail::mat(x.value()) * detail::mat(weight.value()).transpose();
  const std::size_t ix = x.id(), iw = weight.id();
  return x.tape().record(std::move(out), {x, weight}, [ix, iw](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ix)) detail::mat(t.grad(ix)).noalias() += detail::mat(g) * detail::mat(t.value(iw));
    if (t.requires_grad(iw)) detail::mat(t.grad(iw)).noalias() += detail::mat(g).transpose() * detail::mat(t.value(ix));
  });
}

/// Adds a length-d row vector to every row of x[n x d].
template <std::floating_point T>
Var<T> add_row(Var<T> x, Var<T> bias) {
  detail::require_matrix(x.shape(), "add_row");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (bias.value().size() != d) {
    throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " does not match width of " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  const T* b = bias.value().ptr();
  for (std::size_t i = 0; i < n; ++i) {
    T* r = out.ptr() + i * d;
    for (std::size_t j = 0; j < d; ++j) r[j] += b[j];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib, n, d](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ix)) detail::add_into(t.grad(ix), g);
    if (t.requires_grad(ib)) {
      T* db = t.grad(ib).ptr();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
    }
  });
}

template <std::floating_point T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_row(linear(x, weight), bias);
}

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) detail::add_into(t.grad(ia), g);
    if (t.requires_grad(ib)) detail::add_into(t.grad(ib), g);
  });
}

template <std::floating_point T>
Var<T> scale(Var<T> x, T s) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= s;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, s](Tape<T>& t, const Tensor<T>& g) {
    T* d = t.grad(ix).ptr();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
  });
}

/// x[B*S x d] + pos[S x d] broadcast over the B sequences.
template <std::floating_point T>
Var<T> add_tiled(Var<T> x, Var<T> pos) {
  detail::require_matrix(x.shape(), "add_tiled");
  detail::require_matrix(pos.shape(), "add_tiled");
  const std::size_t rows = x.shape()[0], d = x.shape()[1], s = pos.shape()[0];
  if (pos.shape()[1] != d || rows % s != 0) {
    throw ShapeError("add_tiled: " + shape_str(pos.shape()) + " does not tile " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  const T* p = pos.value().ptr();
  for (std::size_t i = 0; i < rows; ++i) {
    T* r = out.ptr() + i * d;
    const T* pr = p + (i % s) * d;
    for (std::size_t j = 0; j < d; ++j) r[j] += pr[j];
  }
  const std::size_t ix = x.id(), ip = pos.id();
  return x.tape().record(std::move(out), {x, pos}, [ix, ip, rows, s, d](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ix)) detail::add_into(t.grad(ix), g);
    if (t.requires_grad(ip)) {
      T* dp = t.grad(ip).ptr();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) dp[(i % s) * d + j] += g[i * d + j];
    }
  });
}

namespace detail {
template <class T>
constexpr T gelu_c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <class T>
constexpr T gelu_a = static_cast<T>(0.044715);
}  // namespace detail

/// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <std::floating_point T>
Var<T> gelu(Var<T> x) {
  using detail::gelu_a;
  using detail::gelu_c;
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(x.value().size());
  Eigen::Map<const Arr> in(x.value().ptr(), n);
  Arr th = (gelu_c<T> * (in + gelu_a<T> * in.cube())).tanh();
  Tensor<T> out(x.shape(), Tensor<T>::uninitialized);
  Eigen::Map<Arr>(out.ptr(), n) = T(0.5) * in * (T(1) + th);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, th = std::move(th)](Tape<T>& t, const Tensor<T>& g) {
    const auto n = th.size();
    Eigen::Map<const Arr> in(t.value(ix).ptr(), n), go(g.ptr(), n);
    Eigen::Map<Arr> d(t.grad(ix).ptr(), n);
    const auto du = gelu_c<T> * (T(1) + T(3) * gelu_a<T> * in.square());
    d += go * (T(0.5) * (T(1) + th) + T(0.5) * in * (T(1) - th.square()) * du);
  });
}

template <std::floating_point T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& in = t.value(ix);
    T* d = t.grad(ix).ptr();
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in[i] > T(0)) d[i] += g[i];
  });
}

/// Per-row normalisation over the last dimension, eps inside the square root.
template <std::floating_point T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const Shape& sx = x.shape();
  if (sx.empty()) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = sx.back();
  if (d == 0) throw ShapeError("layer_norm: zero-width feature dimension");
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match last dimension of " + shape_str(sx));
  }
  const std::size_t n = x.value().size() / d;
  Tensor<T> out(sx, Tensor<T>::uninitialized);
  Tensor<T> xhat(sx, Tensor<T>::uninitialized);
  std::vector<T> rstd(n);
  const T* in = x.value().ptr();
  const T* gw = gain.value().ptr();
  const T* bw = bias.value().ptr();
  for (std::size_t i = 0; i < n; ++i) {
    const T* r = in + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += r[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<T>(d);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (r[j] - mu) * rstd[i];
      xhat[i * d + j] = h;
      out[i * d + j] = gw[j] * h + bw[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
        if (t.requires_grad(ig)) {
          T* dg = t.grad(ig).ptr();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * xhat[i * d + j];
        }
        if (t.requires_grad(ib)) {
          T* db = t.grad(ib).ptr();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
        }
        if (t.requires_grad(ix)) {
          const T* gw = t.value(ig).ptr();
          T* dx = t.grad(ix).ptr();
          const T inv_d = T(1) / static_cast<T>(d);
          for (std::size_t i = 0; i < n; ++i) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[i * d + j] * gw[j];
              m1 += dh;
              m2 += dh * xhat[i * d + j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[i * d + j] * gw[j];
              dx[i * d + j] += rstd[i] * (dh - m1 - xhat[i * d + j] * m2);
            }
          }
        }
      });
}

/// Inverted dropout. Identity (the same node) in eval mode or when p == 0.
template <std::floating_point T>
Var<T> dropout(Var<T> x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw DomainError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  // Four 16-bit draws per engine call; p is resolved to 1/65536.
  const auto threshold = static_cast<std::uint32_t>(std::lround(p * 65536.0));
  std::vector<T> mask(x.value().size());
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (i % 4 == 0) bits = rng.next_u64();
    const auto draw = static_cast<std::uint32_t>(bits & 0xFFFFu);
    bits >>= 16;
    mask[i] = draw < threshold ? T(0) : keep_scale;
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
    T* d = t.grad(ix).ptr();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * mask[i];
  });
}

namespace detail {
// In-place stable softmax of v[0..n) scaled by 1/temperature.
template <class T>
void softmax_inplace(T* v, std::size_t n, T inv_temp) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, v[j] * inv_temp);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    v[j] = std::exp(v[j] * inv_temp - mx);
    sum += v[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) v[j] *= inv;
}
}  // namespace detail

/// out[i][k] = exp(x[i][k]/tau) / sum_j exp(x[i][j]/tau), row-max subtracted.
template <std::floating_point T>
Var<T> row_softmax(Var<T> x, T temperature = T(1)) {
  if (!(temperature > T(0))) throw DomainError("softmax temperature must be positive");
  detail::require_matrix(x.shape(), "row_softmax");
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  Tensor<T> out = x.value();
  const T inv_t = T(1) / temperature;
  for (std::size_t i = 0; i < n; ++i) detail::softmax_inplace(out.ptr() + i * k, k, inv_t);
  const std::size_t ix = x.id();
  Tensor<T> y = out;
  return x.tape().record(std::move(out), {x}, [ix, n, k, inv_t, y = std::move(y)](Tape<T>& t, const Tensor<T>& g) {
    T* d = t.grad(ix).ptr();
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += g[i * k + j] * y[i * k + j];
      for (std::size_t j = 0; j < k; ++j) d[i * k + j] += inv_t * y[i * k + j] * (g[i * k + j] - dot);
    }
  });
}

/// Scaled dot-product attention for `batch` sequences of `seq` rows packed in
/// q, k, v [batch*seq x d], split into `heads` column groups of width d/heads.
/// Scores are scaled by 1/sqrt(d/heads). `key_mask` (optional, batch*seq
/// entries) marks valid keys with 1; masked keys receive -inf before softmax.
template <std::floating_point T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t batch, std::size_t seq, std::size_t heads,
                 std::span<const std::uint8_t> key_mask = {}) {
  const Shape& sq = q.shape();
  if (sq.size() != 2 || k.shape() != sq || v.shape() != sq) {
    throw ShapeError("attention: q/k/v shapes " + shape_str(sq) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()) + " must be equal matrices");
  }
  const std::size_t d = sq[1];
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (batch * seq != sq[0]) {
    throw ShapeError("attention: " + std::to_string(batch) + "x" + std::to_string(seq) + " rows expected, got " +
                     shape_str(sq));
  }
  if (!key_mask.empty() && key_mask.size() != sq[0]) throw ShapeError("attention: key mask length mismatch");
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  const auto S = static_cast<Eigen::Index>(seq);
  const auto DH = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

  std::vector<T> probs(batch * heads * seq * seq);
  Tensor<T> out(sq, Tensor<T>::uninitialized);
  const T* qp = q.value().ptr();
  const T* kp = k.value().ptr();
  const T* vp = v.value().ptr();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t row0 = b * seq;
    if (!key_mask.empty()) {
      bool any = false;
      for (std::size_t j = 0; j < seq; ++j) any = any || key_mask[row0 + j];
      if (!any) throw InputError("attention: sequence " + std::to_string(b) + " has no valid keys");
    }
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = row0 * d + h * dh;
      detail::CStridedMap<T> Q(qp + off, S, DH, stride), K(kp + off, S, DH, stride), V(vp + off, S, DH, stride);
      detail::MatMap<T> P(probs.data() + (b * heads + h) * seq * seq, S, S);
      P.noalias() = (Q * K.transpose()) * sc;
      for (std::size_t i = 0; i < seq; ++i) {
        T* r = P.data() + i * seq;
        if (!key_mask.empty())
          for (std::size_t j = 0; j < seq; ++j)
            if (!key_mask[row0 + j]) r[j] = -std::numeric_limits<T>::infinity();
        detail::softmax_inplace(r, seq, T(1));
      }
      detail::StridedMap<T> O(out.ptr() + off, S, DH, stride);
      O.noalias() = P * V;
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {q, k, v},
      [iq, ik, iv, batch, seq, heads, d, dh, sc, probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
        const auto S = static_cast<Eigen::Index>(seq);
        const auto DH = static_cast<Eigen::Index>(dh);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        T* dqp = gq ? t.grad(iq).ptr() : nullptr;
        T* dkp = gk ? t.grad(ik).ptr() : nullptr;
        T* dvp = gv ? t.grad(iv).ptr() : nullptr;
        const T* qp = t.value(iq).ptr();
        const T* kp = t.value(ik).ptr();
        const T* vp = t.value(iv).ptr();
        detail::RowMat<T> dP(S, S);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq * d + h * dh;
            detail::CStridedMap<T> Q(qp + off, S, DH, stride), K(kp + off, S, DH, stride), V(vp + off, S, DH, stride);
            detail::CStridedMap<T> dO(g.ptr() + off, S, DH, stride);
            detail::CMatMap<T> P(probs.data() + (b * heads + h) * seq * seq, S, S);
            if (gv) detail::StridedMap<T>(dvp + off, S, DH, stride).noalias() += P.transpose() * dO;
            if (!gq && !gk) continue;
            dP.noalias() = dO * V.transpose();
            for (Eigen::Index i = 0; i < S; ++i) {
              const T dot = dP.row(i).dot(P.row(i));
              dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
            }
            if (gq) detail::StridedMap<T>(dqp + off, S, DH, stride).noalias() += (dP * K) * sc;
            if (gk) detail::StridedMap<T>(dkp + off, S, DH, stride).noalias() += (dP.transpose() * Q) * sc;
          }
        }
      });
}

/// out[i] = table[index[i]]; gradient scatter-adds back into the table rows.
template <std::floating_point T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> index) {
  detail::require_matrix(table.shape(), "gather_rows");
  const std::size_t n = table.shape()[0], d = table.shape()[1];
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  Tensor<T> out({index.size(), d}, Tensor<T>::uninitialized);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) {
      throw InputError("gather_rows: row " + std::to_string(index[i]) + " out of range for " + shape_str(table.shape()));
    }
    std::copy_n(table.value().ptr() + index[i] * d, d, out.ptr() + i * d);
  }
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table}, [it, d, index = std::move(index)](Tape<T>& t, const Tensor<T>& g) {
    T* dt = t.grad(it).ptr();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dt[index[i] * d + j] += g[i * d + j];
  });
}

/// Stacks matrices with equal column counts vertically.
template <std::floating_point T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var<T>& p : parts) {
    if (p.value().cols() != d) throw ShapeError("concat_rows: column mismatch at " + shape_str(p.shape()));
    rows += p.value().rows();
  }
  Tensor<T> out({rows, d}, Tensor<T>::uninitialized);
  std::vector<std::size_t> ids, offsets;
  std::size_t at = 0;
  for (const Var<T>& p : parts) {
    std::copy_n(p.value().ptr(), p.value().size(), out.ptr() + at);
    ids.push_back(p.id());
    offsets.push_back(at);
    at += p.value().size();
  }
  return parts.front().tape().record(std::move(out), std::span<const Var<T>>(parts),
                                     [ids = std::move(ids), offsets = std::move(offsets)](Tape<T>& t, const Tensor<T>& g) {
                                       for (std::size_t i = 0; i < ids.size(); ++i) {
                                         if (!t.requires_grad(ids[i])) continue;
                                         Tensor<T>& dst = t.grad(ids[i]);
                                         for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[offsets[i] + j];
                                       }
                                     });
}

/// Each row divided by its Euclidean norm.
template <std::floating_point T>
Var<T> l2_normalize_rows(Var<T> x) {
  detail::require_matrix(x.shape(), "l2_normalize_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  Tensor<T> out = x.value();
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += out[i * d + j] * out[i * d + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > T(0))) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= norms[i];
  }
  Tensor<T> y = out;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, n, d, y = std::move(y), norms = std::move(norms)](Tape<T>& t, const Tensor<T>& g) {
                           T* dx = t.grad(ix).ptr();
                           for (std::size_t i = 0; i < n; ++i) {
                             T dot = 0;
                             for (std::size_t j = 0; j < d; ++j) dot += y[i * d + j] * g[i * d + j];
                             for (std::size_t j = 0; j < d; ++j)
                               dx[i * d + j] += (g[i * d + j] - y[i * d + j] * dot) / norms[i];
                           }
                         });
}

template <std::floating_point T>
Var<T> transpose(Var<T> x) {
  detail::require_matrix(x.shape(), "transpose");
  Tensor<T> out({x.shape()[1], x.shape()[0]}, Tensor<T>::uninitialized);
  detail::mat(out) = detail::mat(x.value()).transpose();
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    detail::mat(t.grad(ix)) += detail::mat(g).transpose();
  });
}

/// x / s for a one-element tensor s (used for the learnable temperature).
template <std::floating_point T>
Var<T> div_scalar(Var<T> x, Var<T> s) {
  if (s.value().size() != 1) throw ShapeError("div_scalar: divisor must have one element, got " + shape_str(s.shape()));
  const T sv = s.value()[0];
  if (sv == T(0)) throw DomainError("div_scalar: division by zero");
  Tensor<T> out = x.value();
  for (T& v : out.data()) v /= sv;
  const std::size_t ix = x.id(), is = s.id();
  return x.tape().record(std::move(out), {x, s}, [ix, is](Tape<T>& t, const Tensor<T>& g) {
    const T sv = t.value(is)[0];
    if (t.requires_grad(ix)) {
      T* d = t.grad(ix).ptr();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / sv;
    }
    if (t.requires_grad(is)) {
      const Tensor<T>& xv = t.value(ix);
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.grad(is)[0] += -acc / (sv * sv);
    }
  });
}

template <std::floating_point T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(s), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    T* d = t.grad(ix).ptr();
    for (std::size_t i = 0; i < t.value(ix).size(); ++i) d[i] += g[0];
  });
}

/// Mean over rows of -log softmax(logits)[label]; log-sum-exp with max shift.
template <std::floating_point T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<std::size_t> labels) {
  detail::require_matrix(logits.shape(), "softmax_cross_entropy");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     shape_str(logits.shape()) + " logits");
  }
  Tensor<T> probs = logits.value();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw InputError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    T* r = probs.ptr() + i * k;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, r[j]);
    T se = 0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(r[j] - mx);
    const T lse = mx + std::log(se);
    loss += lse - r[labels[i]];
    for (std::size_t j = 0; j < k; ++j) r[j] = std::exp(r[j] - lse);
  }
  loss /= static_cast<T>(n);
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor<T>::scalar(loss), {logits},
      [il, n, k, labels = std::move(labels), probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
        T* d = t.grad(il).ptr();
        const T s = g[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j)
            d[i * k + j] += s * (probs[i * k + j] - (j == labels[i] ? T(1) : T(0)));
      });
}

}  // namespace clora
