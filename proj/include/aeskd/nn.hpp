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

#pragma once

#include <cstdint>
#include <random>

#include "aeskd/autograd.hpp"

namespace aeskd {

using Rng = std::mt19937_64;

// Fan-in scaled uniform initialisation: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double b = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-b, b);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

// y = x W + b with W stored [in, out].
struct Linear {
  std::size_t weight = 0, bias = 0;
  std::size_t in = 0, out = 0;
  std::string name;

  template <typename T>
  static Linear create(ParameterSet<T>& ps, const std::string& name,
                       std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.in = in;
    l.out = out;
    l.name = name;
    l.weight = ps.add(name + ".weight", fan_in_uniform<T>({in, out}, in, rng));
    l.bias = ps.add(name + ".bias", Tensor<T>(Shape{out}));
    return l;
  }

  template <typename T>
  Var<T> operator()(Tape<T>& tape, ParameterSet<T>& ps, Var<T> x) const {
    auto y = matmul(x, tape.param(ps[weight]), name);
    return add(y, tape.param(ps[bias]), name + ".bias");
  }
};

struct Conv3x3 {
  std::size_t weight = 0, bias = 0;
  std::size_t in = 0, out = 0, stride = 1;
  std::string name;

  template <typename T>
  static Conv3x3 create(ParameterSet<T>& ps, const std::string& name,
                        std::size_t in, std::size_t out, std::size_t stride,
                        Rng& rng) {
    Conv3x3 c;
    c.in = in;
    c.out = out;
    c.stride = stride;
    c.name = name;
    c.weight =
        ps.add(name + ".weight", fan_in_uniform<T>({out, in, 3, 3}, in * 9, rng));
    c.bias = ps.add(name + ".bias", Tensor<T>(Shape{out}));
    return c;
  }

  template <typename T>
  Var<T> operator()(Tape<T>& tape, ParameterSet<T>& ps, Var<T> x) const {
    return conv2d(x, tape.param(ps[weight]), tape.param(ps[bias]), stride, name);
  }
};

struct BatchNorm {
  std::size_t gamma = 0, beta = 0, running_mean = 0, running_var = 0;
  BatchNormOptions options;
  std::string name;

  template <typename T>
  static BatchNorm create(ParameterSet<T>& ps, const std::string& name,
                          std::size_t channels) {
    BatchNorm b;
    b.name = name;
    b.gamma = ps.add(name + ".gamma", Tensor<T>(Shape{channels}, T{1}));
    b.beta = ps.add(name + ".beta", Tensor<T>(Shape{channels}));
    b.running_mean = ps.add(name + ".running_mean", Tensor<T>(Shape{channels}), true);
    b.running_var = ps.add(name + ".running_var", Tensor<T>(Shape{channels}, T{1}), true);
    return b;
  }

  template <typename T>
  Var<T> operator()(Tape<T>& tape, ParameterSet<T>& ps, Var<T> x,
                    bool use_batch_stats) const {
    return batch_norm(x, tape.param(ps[gamma]), tape.param(ps[beta]),
                      ps[running_mean], ps[running_var], use_batch_stats,
                      options, name);
  }
};

}  // namespace aeskd
