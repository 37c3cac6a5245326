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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace aeskd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Raised when operand extents do not fit an operation. Carries the name of
// the graph node that rejected them.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string node, const std::string& what)
      : std::invalid_argument("node '" + node + "': " + what),
        node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

// Raised when a forward value, gradient, or input is NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string node, const std::string& what)
      : std::runtime_error("node '" + node + "': " + what),
        node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

// Dense row-major tensor. Extents are strictly positive; a rank-0 tensor is
// a scalar holding one value.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(numel(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != numel(shape_)) {
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  T item() const {
    if (data_.size() != 1) {
      throw std::logic_error("item() on tensor of shape " + to_string(shape_));
    }
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw std::invalid_argument("cannot reshape " + to_string(shape_) +
                                  " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) {
        throw std::invalid_argument("tensor extents must be positive, got " +
                                    to_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

namespace kernels {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMajor<T>> view(const T* p, std::size_t rows, std::size_t cols) {
  return {p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <typename T>
Eigen::Map<RowMajor<T>> view(T* p, std::size_t rows, std::size_t cols) {
  return {p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C) {
  view(C, M, N).noalias() += view(A, M, K) * view(B, K, N);
}

// C[M,N] += A^T * B with A stored [K,M], B stored [K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C) {
  view(C, M, N).noalias() += view(A, K, M).transpose() * view(B, K, N);
}

// C[M,N] += A[M,K] * B^T with B stored [N,K]
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C) {
  view(C, M, N).noalias() += view(A, M, K) * view(B, N, K).transpose();
}

// Output columns ox whose tap ox*stride + kx - 1 falls inside [0, W).
inline std::pair<std::size_t, std::size_t> valid_columns(std::size_t kx, std::size_t W,
                                                         std::size_t stride,
                                                         std::size_t Wo) {
  const std::size_t lo = kx == 0 ? 1 : 0;
  if (W + 1 <= kx) return {lo, lo};
  const std::size_t hi = std::min(Wo, (W + 1 - kx - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

// 3x3 patches with zero padding 1. col is [C*9, Ho*Wo].
template <typename T>
void im2col3x3(const T* x, std::size_t C, std::size_t H, std::size_t W,
               std::size_t stride, std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = x + c * H * W;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = col + ((c * 3 + ky) * 3 + kx) * P;
        const auto [lo, hi] = valid_columns(kx, W, stride, Wo);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::size_t iy1 = oy * stride + ky;  // input row + 1
          T* r = row + oy * Wo;
          if (iy1 == 0 || iy1 > H) {
            std::fill(r, r + Wo, T{0});
            continue;
          }
          const T* xr = xc + (iy1 - 1) * W + kx;  // xr[ox*stride] is x[iy][ix+1]
          std::fill(r, r + lo, T{0});
          if (stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) r[ox] = xr[ox - 1];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) r[ox] = xr[ox * stride - 1];
          }
          std::fill(r + hi, r + Wo, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const T* col, std::size_t C, std::size_t H, std::size_t W,
               std::size_t stride, std::size_t Ho, std::size_t Wo, T* dx) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    T* xc = dx + c * H * W;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = col + ((c * 3 + ky) * 3 + kx) * P;
        const auto [lo, hi] = valid_columns(kx, W, stride, Wo);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::size_t iy1 = oy * stride + ky;
          if (iy1 == 0 || iy1 > H) continue;
          T* xr = xc + (iy1 - 1) * W + kx;
          const T* r = row + oy * Wo;
          if (stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) xr[ox - 1] += r[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) xr[ox * stride - 1] += r[ox];
          }
        }
      }
    }
  }
}

}  // namespace kernels
}  // namespace aeskd
