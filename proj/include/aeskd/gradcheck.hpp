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

// Central finite differences: the oracle every backward() is checked against.

#pragma once

#include "aeskd/autograd.hpp"

namespace aeskd {

// Estimates d loss / d target for every entry of every target tensor.
// `loss` re-evaluates the scalar objective from the current target values.
template <typename T, typename F>
std::vector<Tensor<T>> finite_difference_gradient(
    F&& loss, const std::vector<Tensor<T>*>& targets, double eps) {
  if (!(eps > 0.0)) {
    throw std::invalid_argument("finite difference step must be positive");
  }
  std::vector<Tensor<T>> grads;
  grads.reserve(targets.size());
  for (auto* t : targets) {
    Tensor<T> g(t->shape());
    for (std::size_t i = 0; i < t->size(); ++i) {
      const T saved = (*t)[i];
      (*t)[i] = static_cast<T>(saved + eps);
      const double up = static_cast<double>(loss());
      (*t)[i] = static_cast<T>(saved - eps);
      const double down = static_cast<double>(loss());
      (*t)[i] = saved;
      g[i] = static_cast<T>((up - down) / (2.0 * eps));
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// Same, over the trainable entries of a parameter set (in set order).
template <typename T, typename F>
std::vector<Tensor<T>> finite_difference_gradient(F&& loss, ParameterSet<T>& ps,
                                                  double eps) {
  std::vector<Tensor<T>*> targets;
  for (auto& p : ps)
    if (p.trainable && !p.buffer) targets.push_back(&p.value);
  return finite_difference_gradient<T>(std::forward<F>(loss), targets, eps);
}

// Largest entrywise |a - b| / max(|a|, |b|, floor).
template <typename T>
double max_relative_error(const Tensor<T>& a, const Tensor<T>& b,
                          double floor = 1e-6) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("relative error of mismatched shapes " +
                                to_string(a.shape()) + " vs " +
                                to_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    const double denom = std::max({std::abs(x), std::abs(y), floor});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

}  // namespace aeskd
