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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aeskd/evaluation.hpp"
#include "aeskd/nn.hpp"
#include "oracles.hpp"

using namespace aeskd;
using oracle::Vec;

namespace {

Vec tied_vector(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> u(0, 4);
  Vec v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

bool constant(const Vec& v) { return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; }); }

std::span<const float> span_of(const std::vector<float>& v) { return v; }

}  // namespace

TEST(Correlation, Examples) {
  Vec up{1, 2, 3, 4, 5}, down{5, 4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(srcc(up, up), 1.0);
  EXPECT_DOUBLE_EQ(srcc(up, down), -1.0);
  EXPECT_EQ(srcc(Vec{1, 2, 3, 4}, Vec{1, 3, 2, 4}), 0.8);
  Vec affine;
  for (double x : up) affine.push_back(2.0 * x + 1.0);
  EXPECT_NEAR(plcc(up, affine), 1.0, 1e-15);
  Vec p{1.0, 2.0, 4.0}, g{1.0, 3.0, 2.0};
  // Centered: (-4/3, -1/3, 5/3) and (-1, 1, 0) give 1 / sqrt(42/9 * 2).
  EXPECT_NEAR(plcc(p, g), 1.0 / std::sqrt(42.0 / 9.0 * 2.0), 1e-15);
}

TEST(Correlation, UndefinedCasesRaise) {
  EXPECT_THROW(srcc(Vec{1, 1, 1}, Vec{1, 2, 3}), MetricError);
  EXPECT_THROW(plcc(Vec{1, 2, 3}, Vec{2, 2, 2}), MetricError);
  EXPECT_THROW(srcc(Vec{1}, Vec{1}), MetricError);
  EXPECT_THROW(srcc(Vec{1, 2}, Vec{1, 2, 3}), MetricError);
}

TEST(Correlation, AgreesWithBruteForceOnTiedVectors) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> len(2, 8);
  int checked = 0;
  while (checked < 1000) {
    const auto n = len(rng);
    auto a = tied_vector(rng, n), b = tied_vector(rng, n);
    if (constant(a) || constant(b)) continue;
    ASSERT_NEAR(srcc(a, b), oracle::spearman(a, b), 1e-9);
    ASSERT_NEAR(plcc(a, b), oracle::pearson(a, b), 1e-9);
    ++checked;
  }
}

TEST(Correlation, Invariances) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  for (int trial = 0; trial < 200; ++trial) {
    Vec a(20), b(20), ea(20), lin(20);
    for (std::size_t i = 0; i < 20; ++i) {
      a[i] = z(rng);
      b[i] = a[i] + z(rng);
      ea[i] = std::exp(3.0 * a[i]);
      lin[i] = 0.25 * a[i] + 7.0;
    }
    ASSERT_EQ(srcc(ea, b), srcc(a, b));
    ASSERT_NEAR(plcc(lin, b), plcc(a, b), 1e-12);
    ASSERT_NEAR(srcc(a, b), srcc(b, a), 1e-15);
  }
}

TEST(Correlation, FractionalRanksAverageTies) {
  EXPECT_EQ(fractional_ranks(Vec{10, 20, 20, 5}), (Vec{2, 3.5, 3.5, 1}));
}

TEST(Accuracy, ThresholdOnBothSides) {
  EXPECT_DOUBLE_EQ(accuracy(Vec{6, 2, 7}, Vec{5.5, 1, 9}), 1.0);
  EXPECT_DOUBLE_EQ(accuracy(Vec{5.0, 5.1}, Vec{5.1, 5.1}), 0.5);
}

TEST(Report, CategoriesAndRecords) {
  Vec pred{1, 2, 3, 4, 5, 6}, gt{1, 3, 2, 4, 6, 5};
  std::vector<std::string> cats{"a", "a", "a", "b", "b", "b"};
  auto r = metric_report(pred, gt, cats);
  EXPECT_EQ(r.n, 6u);
  ASSERT_EQ(r.categories.size(), 2u);
  EXPECT_NEAR(r.categories.at("a").srcc, 0.5, 1e-12);
  auto report = make_report(records_from(r, "fold0", 2), "abc", {1, 2});
  EXPECT_TRUE(validate_report(report).empty());
  report["records"][0]["extra"] = 1;
  report["records"][1]["n"] = -3;
  EXPECT_EQ(validate_report(report).size(), 2u);
  EXPECT_FALSE(validate_report(nlohmann::json::array()).empty());
}

TEST(Matching, Examples) {
  FeatureBank bank;
  const float r0[2] = {0, 0}, r1[2] = {1, 5}, r2[2] = {3, 1};
  bank.push_back(10, r0);
  bank.push_back(11, r1);
  bank.push_back(12, r2);
  const Vec scores{2.0, 7.0, 4.0};
  auto same = match_eval(bank, bank, scores);
  EXPECT_EQ(same.predictions, scores);

  FeatureBank one;
  one.push_back(1, r1);
  auto single = match_eval(bank, one, Vec{6.0});
  for (double p : single.predictions) EXPECT_EQ(p, 6.0);
  EXPECT_THROW(srcc(single.predictions, scores), MetricError);
  EXPECT_THROW(match_eval(bank, FeatureBank{}, Vec{}), std::invalid_argument);
}

TEST(Matching, TiesGoToTheLowestIdAndFlatDimsAreDropped) {
  FeatureBank bank;
  const float a[2] = {1, 4}, b[2] = {-1, 4}, c[2] = {0, 4};
  bank.push_back(20, a);
  bank.push_back(7, b);
  FeatureBank q;
  q.push_back(99, c);
  auto r = match_eval(q, bank, Vec{3.0, 8.0});
  EXPECT_EQ(r.predictions[0], 8.0);
  EXPECT_EQ(r.dropped_dims, (std::vector<std::size_t>{1}));
}

TEST(Matching, ZScoringMakesScaleIrrelevant) {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> z;
  FeatureBank bank, scaled, q, qs;
  Vec scores;
  for (std::uint64_t i = 0; i < 30; ++i) {
    float v[2] = {z(rng), z(rng)}, w[2] = {v[0] * 1000.0f, v[1]};
    bank.push_back(i, v);
    scaled.push_back(i, w);
    scores.push_back(static_cast<double>(i));
  }
  for (std::uint64_t i = 0; i < 10; ++i) {
    float v[2] = {z(rng), z(rng)}, w[2] = {v[0] * 1000.0f, v[1]};
    q.push_back(100 + i, v);
    qs.push_back(100 + i, w);
  }
  EXPECT_EQ(match_eval(q, bank, scores).predictions, match_eval(qs, scaled, scores).predictions);
}

TEST(Segmentation, RampKeepsTheTopThirtyPercent) {
  std::vector<float> ramp(100);
  for (std::size_t i = 0; i < 100; ++i) ramp[i] = static_cast<float>(i);
  auto mask = percentile_threshold(span_of(ramp), 70.0);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(mask[i], i >= 70 ? 1 : 0);
  EXPECT_THROW(percentile_threshold(span_of(ramp), 0.0), std::invalid_argument);
  EXPECT_THROW(percentile_threshold(span_of(ramp), 100.0), std::invalid_argument);
}

TEST(Segmentation, MaskSizeTracksThePercentile) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 10 + rng() % 500;
    std::vector<float> m(n);
    for (auto& v : m) v = u(rng);
    for (double p = 5; p <= 95; p += 5) {
      auto mask = percentile_threshold(span_of(m), p);
      const double kept = std::count(mask.begin(), mask.end(), 1);
      ASSERT_LE(std::abs(kept - std::ceil((1.0 - p / 100.0) * static_cast<double>(n))), 1.0);
    }
  }
}

TEST(Segmentation, IouProperties) {
  std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 0, 1, 1}, c{1, 0, 1, 0}, z{0, 0, 0, 0};
  using S = std::span<const std::uint8_t>;
  EXPECT_EQ(iou(S(a), S(a)), 1.0);
  EXPECT_EQ(iou(S(a), S(b)), 0.0);
  EXPECT_EQ(iou(S(a), S(c)), iou(S(c), S(a)));
  EXPECT_NEAR(*iou(S(a), S(c)), 1.0 / 3.0, 1e-15);
  EXPECT_FALSE(iou(S(z), S(z)).has_value());
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::uint8_t> x(16), y(16);
    for (auto& v : x) v = rng() % 2;
    for (auto& v : y) v = rng() % 2;
    auto r = iou(S(x), S(y));
    if (!r) continue;
    ASSERT_GE(*r, 0.0);
    ASSERT_LE(*r, 1.0);
    ASSERT_EQ(*r == 1.0, x == y);
  }
}

TEST(Segmentation, MiouCurveAndSkippedPairs) {
  Tensor<float> maps(Shape{2, 10, 10}), masks(Shape{2, 10, 10});
  for (std::size_t i = 0; i < 100; ++i) {
    maps[i] = static_cast<float>(i);
    masks[i] = i >= 70 ? 1.0f : 0.0f;
    maps[100 + i] = 0.0f;
  }
  // Second map is flat, so it keeps every pixel and meets an empty mask.
  auto r = miou_eval(maps, masks, 70.0);
  EXPECT_EQ(r.pairs, 2u);
  EXPECT_NEAR(r.miou, 0.5, 1e-12);
  ASSERT_EQ(r.curve.size(), 19u);
  EXPECT_EQ(r.curve.front().first, 5.0);
  EXPECT_EQ(r.curve.back().first, 95.0);
  Tensor<float> empty_masks(Shape{1, 2, 2}), zero_maps(Shape{1, 2, 2});
  auto s = miou_eval(zero_maps, empty_masks, 50.0);
  EXPECT_EQ(s.pairs + s.skipped, 1u);
  EXPECT_NE(curve_csv(r.curve).find("\n70,0.5\n"), std::string::npos);
}

TEST(Variance, Examples) {
  auto r = variance_decomposition(Vec{0.700, 0.701, 0.703}, Vec{0.69, 0.71, 0.70});
  EXPECT_NEAR(r.delta_training, 0.003, 1e-12);
  EXPECT_NEAR(r.delta_exp, 0.02, 1e-12);
  EXPECT_NEAR(r.delta_split, 0.017, 1e-12);
  EXPECT_FALSE(r.split_negative);
  EXPECT_TRUE(r.significant(0.004));
  EXPECT_FALSE(r.significant(0.003));
  auto same = variance_decomposition(Vec{0.5, 0.5}, Vec{0.5, 0.5});
  EXPECT_EQ(same.delta_training, 0.0);
  auto neg = variance_decomposition(Vec{0.1, 0.3}, Vec{0.2, 0.25});
  EXPECT_EQ(neg.delta_split, 0.0);
  EXPECT_TRUE(neg.split_negative);
  EXPECT_THROW(variance_decomposition(Vec{0.5}, Vec{0.5, 0.6}), std::invalid_argument);
}

TEST(Cost, LinearLayerAndComposition) {
  ParameterSet<float> ps;
  Rng rng(1);
  auto a = Linear::create(ps, "a", 12, 5, rng);
  auto b = Linear::create(ps, "b", 5, 3, rng);
  auto ca = cost_estimate([&](Tape<float>& t, Var<float> x) { a(t, ps, x); }, {4, 12});
  EXPECT_EQ(ca.inference_per_input, 60.0);
  EXPECT_EQ(ca.training_per_input / ca.inference_per_input, 3.0);
  auto cb = cost_estimate([&](Tape<float>& t, Var<float> x) { b(t, ps, x); }, {4, 5});
  auto both = cost_estimate([&](Tape<float>& t, Var<float> x) { b(t, ps, a(t, ps, x)); }, {4, 12});
  EXPECT_EQ(both.inference_per_input, (ca + cb).inference_per_input);
  EXPECT_EQ(both.training_per_input, (ca + cb).training_per_input);
  EXPECT_THROW(cost_estimate([](Tape<float>&, Var<float>) {}, {0, 3}), std::invalid_argument);
  EXPECT_THROW(cost_estimate([](Tape<float>&, Var<float>) {}, {}), std::invalid_argument);
}

TEST(Cost, PipelineTotalIsTheSumOfStages) {
  auto p = pipeline_cost({{"A", make_cost(10)}, {"B", make_cost(20)}}, make_cost(4), 30);
  ASSERT_EQ(p.stages.size(), 4u);
  EXPECT_EQ(p.total(), 10 + 20 + 12.0 * 30 + 4);
  EXPECT_THROW(make_cost(0.0), std::invalid_argument);
}
