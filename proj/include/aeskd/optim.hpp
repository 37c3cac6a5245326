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

#include <cmath>
#include <cstdint>

#include "aeskd/autograd.hpp"

namespace aeskd {

// Step-decay learning-rate schedule: rate * decay^floor(epoch / interval).
struct Schedule {
  std::size_t epochs = 12;
  std::size_t batch_size = 16;
  double rate = 1e-3;
  double decay = 0.1;
  std::size_t decay_interval = 3;

  double rate_at(std::size_t epoch) const {
    if (decay_interval == 0) return rate;
    return rate * std::pow(decay, static_cast<double>(epoch / decay_interval));
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer. Moments are kept per parameter index and sized
// lazily to the parameter's shape.
template <typename T>
class Adam {
 public:
  explicit Adam(Schedule schedule = {}, AdamConfig cfg = {})
      : schedule_(schedule), cfg_(cfg) {}

  const Schedule& schedule() const noexcept { return schedule_; }
  std::uint64_t steps() const noexcept { return step_; }
  std::size_t moments() const noexcept { return m_.size(); }
  const Tensor<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor<T>& second_moment(std::size_t i) const { return v_.at(i); }

  // Applies one update at the rate for `epoch`. A non-finite gradient on any
  // trainable parameter rejects the whole step and leaves parameters and
  // optimizer state untouched; the return value reports acceptance.
  bool step(ParameterSet<T>& params, std::size_t epoch) {
    for (const auto& p : params) {
      if (!p.trainable || p.buffer) continue;
      if (p.grad.shape() != p.value.shape()) {
        throw ShapeError(p.name, "gradient shape " + to_string(p.grad.shape()) +
                                     " does not match parameter " +
                                     to_string(p.value.shape()));
      }
      if (!p.grad.all_finite()) return false;
    }
    if (m_.size() < params.size()) {
      m_.resize(params.size());
      v_.resize(params.size());
    }
    ++step_;
    const double lr = schedule_.rate_at(epoch);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.trainable || p.buffer) continue;
      if (m_[i].shape() != p.value.shape()) {
        m_[i] = Tensor<T>(p.value.shape());
        v_[i] = Tensor<T>(p.value.shape());
      }
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad[k];
        const double mk = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
        const double vk = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + cfg_.eps);
        p.value[k] = static_cast<T>(p.value[k] - update);
      }
    }
    return true;
  }

 private:
  Schedule schedule_;
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace aeskd
