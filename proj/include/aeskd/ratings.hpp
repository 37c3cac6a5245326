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
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aeskd {

inline constexpr std::size_t kDefaultLevels = 10;
inline constexpr double kDistributionTolerance = 1e-9;

// Normalised histogram over the ordered score levels 1..n.
class RatingDistribution {
 public:
  RatingDistribution() = default;

  // Validates non-negativity and unit mass (within tolerance).
  explicit RatingDistribution(std::vector<double> mass,
                              double tolerance = kDistributionTolerance)
      : mass_(std::move(mass)) {
    if (mass_.empty()) throw std::invalid_argument("distribution needs at least one level");
    double s = 0.0;
    for (double m : mass_) {
      if (!(m >= 0.0) || !std::isfinite(m)) {
        throw std::invalid_argument("distribution mass must be finite and non-negative");
      }
      s += m;
    }
    if (std::abs(s - 1.0) > tolerance) {
      throw std::invalid_argument("distribution mass sums to " + std::to_string(s));
    }
  }

  // Renormalises a non-negative vector; used for float round-trips where the
  // sum carries single-precision error.
  static RatingDistribution normalized(std::span<const double> raw) {
    double s = 0.0;
    for (double v : raw) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw std::invalid_argument("distribution mass must be finite and non-negative");
      }
      s += v;
    }
    if (!(s > 0.0)) throw std::invalid_argument("distribution has zero total mass");
    std::vector<double> m(raw.begin(), raw.end());
    for (auto& v : m) v /= s;
    return RatingDistribution(std::move(m));
  }

  static RatingDistribution normalized(std::span<const float> raw) {
    std::vector<double> d(raw.begin(), raw.end());
    return normalized(std::span<const double>(d));
  }

  std::size_t levels() const noexcept { return mass_.size(); }
  const std::vector<double>& mass() const noexcept { return mass_; }
  double operator[](std::size_t k) const { return mass_.at(k); }

  std::vector<float> as_floats() const { return {mass_.begin(), mass_.end()}; }

  friend bool operator==(const RatingDistribution&, const RatingDistribution&) = default;

 private:
  std::vector<double> mass_;
};

enum class AestheticClass : std::uint8_t { low = 0, high = 1 };

inline RatingDistribution from_votes(std::span<const std::uint64_t> counts) {
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  if (total == 0) throw std::invalid_argument("vote counts are all zero");
  std::vector<double> mass(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k)
    mass[k] = static_cast<double>(counts[k]) / static_cast<double>(total);
  return RatingDistribution(std::move(mass));
}

// Expected level, levels numbered from 1.
inline double mean_score(const RatingDistribution& d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d.levels(); ++k) s += static_cast<double>(k + 1) * d[k];
  return s;
}

// High iff strictly above the threshold; a score exactly at it is low.
inline AestheticClass binarize(double score, double threshold = 5.0) {
  return score > threshold ? AestheticClass::high : AestheticClass::low;
}

inline std::vector<double> cdf(const RatingDistribution& d) {
  std::vector<double> c(d.levels());
  double acc = 0.0;
  for (std::size_t k = 0; k < d.levels(); ++k) c[k] = (acc += d[k]);
  return c;
}

inline constexpr double kMinGaussianSigma = 1e-3;

// mass_k proportional to exp(-(k - mu)^2 / (2 sigma^2)) over levels 1..n.
// Below kMinGaussianSigma the limit is taken: a delta at round(mu).
inline RatingDistribution discretized_gaussian(double mu, double sigma,
                                               std::size_t n = kDefaultLevels) {
  if (n == 0) throw std::invalid_argument("need at least one level");
  if (!(mu >= 1.0 && mu <= static_cast<double>(n))) {
    throw std::invalid_argument("gaussian centre " + std::to_string(mu) +
                                " outside [1, n]");
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian spread must be positive");
  std::vector<double> mass(n, 0.0);
  if (sigma < kMinGaussianSigma) {
    mass[static_cast<std::size_t>(std::round(mu)) - 1] = 1.0;
    return RatingDistribution(std::move(mass));
  }
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double z = (static_cast<double>(k + 1) - mu) / sigma;
    s += (mass[k] = std::exp(-0.5 * z * z));
  }
  for (auto& m : mass) m /= s;
  return RatingDistribution(std::move(mass));
}

}  // namespace aeskd
