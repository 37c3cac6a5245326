// Copyright 2026 The aeskd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Tape records every operation applied to Vars in execution order, which
// makes the recorded graph acyclic and topologically sorted by construction.
// backward() walks the tape in reverse and accumulates gradients into the
// nodes and, for parameter leaves, into Parameter::grad.

#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>

#include "aeskd/tensor.hpp"

namespace aeskd {

enum class Mode { training, inference };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  // Buffers (batch-norm running statistics) are never touched by optimizers.
  bool buffer = false;
  bool trainable = true;

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

// Ordered, name-unique collection of parameters and buffers. Layers refer to
// entries by index, so copying a ParameterSet copies a whole model.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(const std::string& name, Tensor<T> value,
                  bool buffer = false) {
    if (index_.count(name)) {
      throw std::invalid_argument("duplicate parameter name '" + name + "'");
    }
    Parameter<T> p{name, std::move(value), {}, buffer, !buffer};
    p.zero_grad();
    items_.push_back(std::move(p));
    index_.emplace(name, items_.size() - 1);
    return items_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return items_.at(i); }
  const Parameter<T>& operator[](std::size_t i) const { return items_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const noexcept { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& p : items_) p.zero_grad();
  }

  void set_trainable(std::string_view prefix, bool trainable) {
    for (auto& p : items_)
      if (!p.buffer && p.name.rfind(prefix, 0) == 0) p.trainable = trainable;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : items_) {
      auto idx = out.add(p.name, p.value.template cast<U>(), p.buffer);
      out[idx].trainable = p.trainable;
    }
    return out;
  }

 private:
  std::vector<Parameter<T>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Tensor<T>& grad() const { return tape->grad(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
struct Node {
  std::string name;
  std::string op;
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::size_t> inputs;
  std::function<void(Tape<T>&, const Node&)> backward;
  Parameter<T>* param = nullptr;
  double macs = 0.0;
};

template <typename T>
class Tape {
 public:
  explicit Tape(Mode mode = Mode::training) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Mode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node<T>& node(std::size_t i) const { return nodes_.at(i); }

  Var<T> constant(Tensor<T> value, std::string_view name = "input") {
    return make_leaf(std::move(value), name, false, nullptr);
  }

  // Leaf that collects its own gradient (used to differentiate with respect
  // to loss inputs rather than parameters).
  Var<T> leaf(Tensor<T> value, std::string_view name = "leaf") {
    return make_leaf(std::move(value), name, true, nullptr);
  }

  Var<T> param(Parameter<T>& p) {
    return make_leaf(p.value, p.name, p.trainable && !p.buffer, &p);
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }

  const Tensor<T>& grad(Var<T> v) {
    auto& n = nodes_.at(v.id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Zero-initialised on first use.
  T* grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad.ptr();
  }

  double total_macs() const {
    double s = 0.0;
    for (const auto& n : nodes_) s += n.macs;
    return s;
  }

  // Records an op node. The output is checked for finiteness here so every
  // op reports the node that first produced a NaN/Inf.
  Var<T> record(std::string_view op, std::string_view name, Tensor<T> value,
                std::vector<std::size_t> inputs,
                std::function<void(Tape&, const Node<T>&)> backward,
                double macs = 0.0) {
    Node<T> n;
    n.op = std::string(op);
    n.name = name.empty() ? n.op + "#" + std::to_string(nodes_.size())
                          : std::string(name);
    if (!value.all_finite()) throw NumericError(n.name, "non-finite output");
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    for (auto i : n.inputs) n.requires_grad = n.requires_grad || needs_grad(i);
    if (n.requires_grad) n.backward = std::move(backward);
    n.macs = macs;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::string default_name(std::string_view op, std::string_view name) const {
    return name.empty() ? std::string(op) + "#" + std::to_string(nodes_.size())
                        : std::string(name);
  }

  void backward(Var<T> loss) {
    auto& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw ShapeError(root.name, "backward requires a scalar loss, got " +
                                      to_string(root.value.shape()));
    }
    grad_buffer(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.has_grad || !n.requires_grad) continue;
      if (!n.grad.all_finite()) throw NumericError(n.name, "non-finite gradient");
      if (n.backward) n.backward(*this, n);
      if (n.param) {
        auto& g = n.param->grad;
        if (g.shape() != n.value.shape()) g = Tensor<T>(n.value.shape());
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

 private:
  Var<T> make_leaf(Tensor<T> value, std::string_view name, bool wants_grad,
                   Parameter<T>* p) {
    Node<T> n;
    n.op = "leaf";
    n.name = std::string(name);
    if (!value.all_finite()) throw NumericError(n.name, "non-finite leaf value");
    n.value = std::move(value);
    n.requires_grad = wants_grad;
    n.param = wants_grad ? p : nullptr;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  Mode mode_;
  std::deque<Node<T>> nodes_;
};

// ---------------------------------------------------------------------------
// Kernel ops. Each takes an optional node name used in error messages.

namespace detail {
template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const std::string& name,
                  std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(name, std::string(op) + " operands " +
                               to_string(a.shape()) + " vs " +
                               to_string(b.shape()));
  }
}

template <typename T>
std::size_t last_dim(const Shape& s) {
  return s.empty() ? 1 : s.back();
}
}  // namespace detail

// Elementwise add. b may also be a vector broadcast along the last axis of a.
template <typename T>
Var<T> add(Var<T> a, Var<T> b, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto nm = tape.default_name("add", name);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out = av;
  if (av.shape() == bv.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return tape.record("add", nm, std::move(out), {a.id, b.id},
                       [ia = a.id, ib = b.id](Tape<T>& t, const Node<T>& n) {
                         for (auto id : {ia, ib}) {
                           if (!t.needs_grad(id)) continue;
                           T* g = t.grad_buffer(id);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                             g[i] += n.grad[i];
                         }
                       });
  }
  if (bv.rank() == 1 && av.rank() >= 1 && av.shape().back() == bv.dim(0)) {
    const std::size_t k = bv.dim(0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % k];
    return tape.record(
        "add", nm, std::move(out), {a.id, b.id},
        [ia = a.id, ib = b.id, k](Tape<T>& t, const Node<T>& n) {
          if (t.needs_grad(ia)) {
            T* g = t.grad_buffer(ia);
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
          }
          if (t.needs_grad(ib)) {
            T* g = t.grad_buffer(ib);
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % k] += n.grad[i];
          }
        });
  }
  throw ShapeError(nm, "add operands " + to_string(av.shape()) + " vs " +
                           to_string(bv.shape()));
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto nm = tape.default_name("sub", name);
  detail::require_same(a, b, nm, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record("sub", nm, std::move(out), {a.id, b.id},
                     [ia = a.id, ib = b.id](Tape<T>& t, const Node<T>& n) {
                       if (t.needs_grad(ia)) {
                         T* g = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < n.grad.size(); ++i)
                           g[i] += n.grad[i];
                       }
                       if (t.needs_grad(ib)) {
                         T* g = t.grad_buffer(ib);
                         for (std::size_t i = 0; i < n.grad.size(); ++i)
                           g[i] -= n.grad[i];
                       }
                     });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto nm = tape.default_name("mul", name);
  detail::require_same(a, b, nm, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record("mul", nm, std::move(out), {a.id, b.id},
                     [ia = a.id, ib = b.id](Tape<T>& t, const Node<T>& n) {
                       const auto& av = t.node(ia).value;
                       const auto& bv = t.node(ib).value;
                       if (t.needs_grad(ia)) {
                         T* g = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < n.grad.size(); ++i)
                           g[i] += n.grad[i] * bv[i];
                       }
                       if (t.needs_grad(ib)) {
                         T* g = t.grad_buffer(ib);
                         for (std::size_t i = 0; i < n.grad.size(); ++i)
                           g[i] += n.grad[i] * av[i];
                       }
                     });
}

// scale * a + shift
template <typename T>
Var<T> affine(Var<T> a, T scale, T shift, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto nm = tape.default_name("affine", name);
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = scale * v + shift;
  return tape.record("affine", nm, std::move(out), {a.id},
                     [ia = a.id, scale](Tape<T>& t, const Node<T>& n) {
                       T* g = t.grad_buffer(ia);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                         g[i] += scale * n.grad[i];
                     });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto nm = tape.default_name("matmul", name);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError(nm, "matmul operands " + to_string(av.shape()) + " x " +
                             to_string(bv.shape()));
  }
  const std::size_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  Tensor<T> out(Shape{M, N});
  kernels::gemm_nn(M, N, K, av.ptr(), bv.ptr(), out.ptr());
  return tape.record(
      "matmul", nm, std::move(out), {a.id, b.id},
      [ia = a.id, ib = b.id, M, K, N](Tape<T>& t, const Node<T>& n) {
        const auto& av = t.node(ia).value;
        const auto& bv = t.node(ib).value;
        if (t.needs_grad(ia)) {
          kernels::gemm_nt(M, K, N, n.grad.ptr(), bv.ptr(), t.grad_buffer(ia));
        }
        if (t.needs_grad(ib)) {
          kernels::gemm_tn(K, N, M, av.ptr(), n.grad.ptr(), t.grad_buffer(ib));
        }
      },
      static_cast<double>(M) * K * N);
}

// 3x3 convolution, zero padding 1. x [N,C,H,W], w [Co,C,3,3], bias [Co].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, std::size_t stride,
              std::string_view name = {}) {
  auto& tape = *x.tape;
  const auto nm = tape.default_name("conv2d", name);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) ||
      wv.dim(2) != 3 || wv.dim(3) != 3 || bv.rank() != 1 ||
      bv.dim(0) != wv.dim(0) || (stride != 1 && stride != 2)) {
    throw ShapeError(nm, "conv2d input " + to_string(xv.shape()) +
                             " weight " + to_string(wv.shape()) + " bias " +
                             to_string(bv.shape()) + " stride " +
                             std::to_string(stride));
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t Co = wv.dim(0);
  const std::size_t Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
  const std::size_t P = Ho * Wo, R = C * 9;
  Tensor<T> out(Shape{N, Co, Ho, Wo});
  std::vector<T> col(R * P);
  for (std::size_t s = 0; s < N; ++s) {
    kernels::im2col3x3(xv.ptr() + s * C * H * W, C, H, W, stride, Ho, Wo,
                       col.data());
    T* o = out.ptr() + s * Co * P;
    for (std::size_t c = 0; c < Co; ++c) std::fill(o + c * P, o + (c + 1) * P, bv[c]);
    kernels::gemm_nn(Co, P, R, wv.ptr(), col.data(), o);
  }
  const double macs = static_cast<double>(N) * Co * P * R;
  return tape.record(
      "conv2d", nm, std::move(out), {x.id, w.id, bias.id},
      [ix = x.id, iw = w.id, ib = bias.id, N, C, H, W, Co, Ho, Wo, P, R,
       stride](Tape<T>& t, const Node<T>& n) {
        const auto& xv = t.node(ix).value;
        const auto& wv = t.node(iw).value;
        const bool gx = t.needs_grad(ix), gw = t.needs_grad(iw),
                   gb = t.needs_grad(ib);
        if (gb) {
          T* g = t.grad_buffer(ib);
          for (std::size_t s = 0; s < N; ++s)
            for (std::size_t c = 0; c < Co; ++c) {
              const T* d = n.grad.ptr() + (s * Co + c) * P;
              T acc{0};
              for (std::size_t p = 0; p < P; ++p) acc += d[p];
              g[c] += acc;
            }
        }
        if (!gx && !gw) return;
        std::vector<T> col(R * P), dcol(R * P);
        T* gwb = gw ? t.grad_buffer(iw) : nullptr;
        T* gxb = gx ? t.grad_buffer(ix) : nullptr;
        for (std::size_t s = 0; s < N; ++s) {
          const T* d = n.grad.ptr() + s * Co * P;
          if (gw) {
            kernels::im2col3x3(xv.ptr() + s * C * H * W, C, H, W, stride, Ho,
                               Wo, col.data());
            kernels::gemm_nt(Co, R, P, d, col.data(), gwb);
          }
          if (gx) {
            std::fill(dcol.begin(), dcol.end(), T{0});
            kernels::gemm_tn(R, P, Co, wv.ptr(), d, dcol.data());
            kernels::col2im3x3(dcol.data(), C, H, W, stride, Ho, Wo,
                               gxb + s * C * H * W);
          }
        }
      },
      macs);
}

namespace detail {
template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, std::string_view op, std::string_view name, F f, D df) {
  auto& tape = *a.tape;
  const auto nm = tape.default_name(op, name);
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = f(v);
  return tape.record(op, nm, std::move(out), {a.id},
                     [ia = a.id, df](Tape<T>& t, const Node<T>& n) {
                       const auto& x = t.node(ia).value;
                       T* g = t.grad_buffer(ia);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                         g[i] += n.grad[i] * df(x[i], n.value[i]);
                     });
}
}  // namespace detail

template <typename T>
Var<T> relu(Var<T> a, std::string_view name = {}) {
  return detail::unary(
      a, "relu", name, [](T x) { return x > T{0} ? x : T{0}; },
      [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(Var<T> a, std::string_view name = {}) {
  return detail::unary(
      a, "sigmoid", name,
      [](T x) {
        return x >= T{0} ? T{1} / (T{1} + std::exp(-x))
                         : std::exp(x) / (T{1} + std::exp(x));
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> log(Var<T> a, std::string_view name = {}) {
  return detail::unary(
      a, "log", name, [](T x) { return std::log(x); },
      [](T x, T) { return T{1} / x; });
}

// The derivative at 0 is taken as 0 (subgradient), so a zero loss built on
// sqrt still yields a finite zero gradient.
template <typename T>
Var<T> sqrt(Var<T> a, std::string_view name = {}) {
  return detail::unary(
      a, "sqrt", name, [](T x) { return std::sqrt(x); },
      [](T, T y) { return y > T{0} ? T{0.5} / y : T{0}; });
}

template <typename T>
Var<T> square(Var<T> a, std::string_view name = {}) {
  return detail::unary(
      a, "square", name, [](T x) { return x * x; },
      [](T x, T) { return T{2} * x; });
}

template <typename T>
Var<T> abs(Var<T> a, std::string_view name = {}) {
  return detail::unary(
      a, "abs", name, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi, std::string_view name = {}) {
  return detail::unary(
      a, "clamp", name, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

// Mean of all entries -> rank-0 scalar.
template <typename T>
Var<T> mean(Var<T> a, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto& av = a.value();
  T s{0};
  for (auto v : av.data()) s += v;
  const std::size_t count = av.size();
  return tape.record("mean", tape.default_name("mean", name),
                     Tensor<T>::scalar(s / static_cast<T>(count)), {a.id},
                     [ia = a.id, count](Tape<T>& t, const Node<T>& n) {
                       T* g = t.grad_buffer(ia);
                       const T d = n.grad[0] / static_cast<T>(count);
                       for (std::size_t i = 0; i < count; ++i) g[i] += d;
                     });
}

// Mean over the last axis: [N,K] -> [N].
template <typename T>
Var<T> row_mean(Var<T> a, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto nm = tape.default_name("row_mean", name);
  const auto& av = a.value();
  if (av.rank() != 2) throw ShapeError(nm, "row_mean expects rank 2, got " + to_string(av.shape()));
  const std::size_t N = av.dim(0), K = av.dim(1);
  Tensor<T> out(Shape{N});
  for (std::size_t i = 0; i < N; ++i) {
    T s{0};
    for (std::size_t k = 0; k < K; ++k) s += av.at(i, k);
    out[i] = s / static_cast<T>(K);
  }
  return tape.record("row_mean", nm, std::move(out), {a.id},
                     [ia = a.id, N, K](Tape<T>& t, const Node<T>& n) {
                       T* g = t.grad_buffer(ia);
                       for (std::size_t i = 0; i < N; ++i)
                         for (std::size_t k = 0; k < K; ++k)
                           g[i * K + k] += n.grad[i] / static_cast<T>(K);
                     });
}

// Row-wise softmax over the last axis.
template <typename T>
Var<T> softmax(Var<T> a, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto& av = a.value();
  const std::size_t K = detail::last_dim<T>(av.shape());
  const std::size_t rows = av.size() / K;
  Tensor<T> out = av;
  for (std::size_t r = 0; r < rows; ++r) {
    T* x = out.ptr() + r * K;
    const T mx = *std::max_element(x, x + K);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) s += (x[k] = std::exp(x[k] - mx));
    for (std::size_t k = 0; k < K; ++k) x[k] /= s;
  }
  return tape.record("softmax", tape.default_name("softmax", name),
                     std::move(out), {a.id},
                     [ia = a.id, K, rows](Tape<T>& t, const Node<T>& n) {
                       T* g = t.grad_buffer(ia);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const T* y = n.value.ptr() + r * K;
                         const T* d = n.grad.ptr() + r * K;
                         T dot{0};
                         for (std::size_t k = 0; k < K; ++k) dot += y[k] * d[k];
                         for (std::size_t k = 0; k < K; ++k)
                           g[r * K + k] += y[k] * (d[k] - dot);
                       }
                     });
}

// Prefix sums along the last axis.
template <typename T>
Var<T> cumsum(Var<T> a, std::string_view name = {}) {
  auto& tape = *a.tape;
  const auto& av = a.value();
  const std::size_t K = detail::last_dim<T>(av.shape());
  const std::size_t rows = av.size() / K;
  Tensor<T> out = av;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 1; k < K; ++k) out[r * K + k] += out[r * K + k - 1];
  return tape.record("cumsum", tape.default_name("cumsum", name),
                     std::move(out), {a.id},
                     [ia = a.id, K, rows](Tape<T>& t, const Node<T>& n) {
                       T* g = t.grad_buffer(ia);
                       for (std::size_t r = 0; r < rows; ++r) {
                         T acc{0};
                         for (std::size_t k = K; k-- > 0;) {
                           acc += n.grad[r * K + k];
                           g[r * K + k] += acc;
                         }
                       }
                     });
}

// Concatenation of rank-2 tensors along axis 1.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::string_view name = {}) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  auto& tape = *parts.front().tape;
  const auto nm = tape.default_name("concat", name);
  const std::size_t N = parts.front().value().dim(0);
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    if (v.rank() != 2 || v.dim(0) != N) {
      throw ShapeError(nm, "concat part " + to_string(v.shape()) +
                               " incompatible with batch " + std::to_string(N));
    }
    widths.push_back(v.dim(1));
    ids.push_back(p.id);
    total += v.dim(1);
  }
  Tensor<T> out(Shape{N, total});
  std::size_t off = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const auto& v = parts[j].value();
    for (std::size_t i = 0; i < N; ++i)
      std::copy_n(v.ptr() + i * widths[j], widths[j], out.ptr() + i * total + off);
    off += widths[j];
  }
  return tape.record("concat", nm, std::move(out), ids,
                     [ids, widths, N, total](Tape<T>& t, const Node<T>& n) {
                       std::size_t off = 0;
                       for (std::size_t j = 0; j < ids.size(); ++j) {
                         if (t.needs_grad(ids[j])) {
                           T* g = t.grad_buffer(ids[j]);
                           for (std::size_t i = 0; i < N; ++i)
                             for (std::size_t k = 0; k < widths[j]; ++k)
                               g[i * widths[j] + k] += n.grad[i * total + off + k];
                         }
                         off += widths[j];
                       }
                     });
}

// [N,C,H,W] -> [N,C]
template <typename T>
Var<T> global_avg_pool(Var<T> x, std::string_view name = {}) {
  auto& tape = *x.tape;
  const auto nm = tape.default_name("gap", name);
  const auto& xv = x.value();
  if (xv.rank() != 4) throw ShapeError(nm, "global_avg_pool expects rank 4, got " + to_string(xv.shape()));
  const std::size_t N = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
  Tensor<T> out(Shape{N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    T s{0};
    const T* p = xv.ptr() + i * P;
    for (std::size_t k = 0; k < P; ++k) s += p[k];
    out[i] = s / static_cast<T>(P);
  }
  return tape.record("gap", nm, std::move(out), {x.id},
                     [ix = x.id, N, C, P](Tape<T>& t, const Node<T>& n) {
                       T* g = t.grad_buffer(ix);
                       for (std::size_t i = 0; i < N * C; ++i) {
                         const T d = n.grad[i] / static_cast<T>(P);
                         for (std::size_t k = 0; k < P; ++k) g[i * P + k] += d;
                       }
                     });
}

struct BatchNormOptions {
  double momentum = 0.9;  // weight kept on the previous running value
  double eps = 1e-5;
};

// Batch normalization over axis 1 of a rank-2 [N,F] or rank-4 [N,C,H,W]
// input. With use_batch_stats the batch mean/variance (biased) normalise the
// input and the running statistics are updated in place; otherwise the
// running statistics are used.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, Parameter<T>& running_mean,
                  Parameter<T>& running_var, bool use_batch_stats,
                  BatchNormOptions opt = {}, std::string_view name = {}) {
  auto& tape = *x.tape;
  const auto nm = tape.default_name("batch_norm", name);
  const auto& xv = x.value();
  if ((xv.rank() != 2 && xv.rank() != 4) || gamma.value().size() != xv.dim(1) ||
      beta.value().size() != xv.dim(1) || running_mean.value.size() != xv.dim(1)) {
    throw ShapeError(nm, "batch_norm input " + to_string(xv.shape()) +
                             " with " + std::to_string(gamma.value().size()) +
                             " channels");
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1);
  const std::size_t P = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  const double m = static_cast<double>(N * P);
  std::vector<T> mu(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (use_batch_stats) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const T* p = xv.ptr() + (i * C + c) * P;
        for (std::size_t k = 0; k < P; ++k) s += p[k];
      }
      const double mean_c = s / m;
      for (std::size_t i = 0; i < N; ++i) {
        const T* p = xv.ptr() + (i * C + c) * P;
        for (std::size_t k = 0; k < P; ++k) s2 += (p[k] - mean_c) * (p[k] - mean_c);
      }
      const double var_c = s2 / m;
      mu[c] = static_cast<T>(mean_c);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var_c + opt.eps));
      running_mean.value[c] = static_cast<T>(opt.momentum * running_mean.value[c] +
                                             (1.0 - opt.momentum) * mean_c);
      running_var.value[c] = static_cast<T>(opt.momentum * running_var.value[c] +
                                            (1.0 - opt.momentum) * var_c);
    } else {
      mu[c] = running_mean.value[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.value[c]) + opt.eps));
    }
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> xhat(xv.shape());
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (i * C + c) * P;
      for (std::size_t k = 0; k < P; ++k) {
        const T h = (xv[base + k] - mu[c]) * inv_std[c];
        xhat[base + k] = h;
        out[base + k] = gv[c] * h + bv[c];
      }
    }
  return tape.record(
      "batch_norm", nm, std::move(out), {x.id, gamma.id, beta.id},
      [ix = x.id, ig = gamma.id, ib = beta.id, xhat = std::move(xhat),
       inv_std = std::move(inv_std), N, C, P, use_batch_stats](Tape<T>& t, const Node<T>& n) {
        const auto& gv = t.node(ig).value;
        const T* dy = n.grad.ptr();
        std::vector<T> sum_dy(C, T{0}), sum_dy_xhat(C, T{0});
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (i * C + c) * P;
            for (std::size_t k = 0; k < P; ++k) {
              sum_dy[c] += dy[base + k];
              sum_dy_xhat[c] += dy[base + k] * xhat[base + k];
            }
          }
        if (t.needs_grad(ig)) {
          T* g = t.grad_buffer(ig);
          for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy_xhat[c];
        }
        if (t.needs_grad(ib)) {
          T* g = t.grad_buffer(ib);
          for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy[c];
        }
        if (!t.needs_grad(ix)) return;
        T* g = t.grad_buffer(ix);
        const T m = static_cast<T>(N * P);
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (i * C + c) * P;
            const T scale = gv[c] * inv_std[c];
            for (std::size_t k = 0; k < P; ++k) {
              if (use_batch_stats) {
                g[base + k] += scale * (dy[base + k] - sum_dy[c] / m -
                                        xhat[base + k] * sum_dy_xhat[c] / m);
              } else {
                g[base + k] += scale * dy[base + k];
              }
            }
          }
      });
}

}  // namespace aeskd
