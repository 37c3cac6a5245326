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

#include "aeskd/gradcheck.hpp"
#include "aeskd/losses.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace aeskd;
using oracle::Mat;
using oracle::Vec;
using testing_util::random_distributions;
using testing_util::to_tensor;

namespace {

using Td = Tensor<double>;
using LossFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

double eval(const std::vector<Mat>& args, const LossFn& f) {
  Tape<double> t;
  std::vector<Var<double>> vs;
  for (const auto& m : args) vs.push_back(t.constant(to_tensor(m)));
  return f(vs).value().item();
}

Mat delta_rows(std::size_t level, std::size_t n = 10) {
  Vec v(n, 0.0);
  v[level - 1] = 1.0;
  return {v};
}

Mat constant(std::size_t rows, std::size_t cols, double v) { return Mat(rows, Vec(cols, v)); }

Mat blend(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k) out[i][k] = 0.5 * a[i][k] + 0.5 * b[i][k];
  return out;
}

// Relative error of backward() against central differences for every input.
double grad_error(std::vector<Td> inputs, const LossFn& f) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (auto& x : inputs) leaves.push_back(tape.leaf(x));
  tape.backward(f(leaves));
  std::vector<Td*> ptrs;
  for (auto& x : inputs) ptrs.push_back(&x);
  auto numeric = finite_difference_gradient<double>(
      [&] {
        Tape<double> t;
        std::vector<Var<double>> vs;
        for (auto& x : inputs) vs.push_back(t.constant(x));
        return f(vs).value().item();
      },
      ptrs, 1e-6);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    worst = std::max(worst, max_relative_error(leaves[i].grad(), numeric[i], 1e-4));
  return worst;
}

}  // namespace

TEST(Emd, Examples) {
  std::mt19937_64 rng(1);
  auto y = random_distributions(rng, 3, 10);
  EXPECT_NEAR(eval({y, y}, [](auto& v) { return emd_loss(v[0], v[1]); }), 0.0, 1e-12);
  EXPECT_NEAR(eval({delta_rows(1), delta_rows(2)}, [](auto& v) { return emd_loss(v[0], v[1]); }),
              0.316228, 1e-6);
  Mat a = {{0.5, 0.5, 0, 0, 0, 0, 0, 0, 0, 0}};
  Mat b = {{0, 0.5, 0.5, 0, 0, 0, 0, 0, 0, 0}};
  EXPECT_NEAR(eval({a, b}, [](auto& v) { return emd_loss(v[0], v[1]); }), 0.223607, 1e-6);
}

TEST(Emd, MismatchedLevelsAreRejected) {
  Tape<double> t;
  auto a = t.constant(Td(Shape{1, 10}, 0.1));
  auto b = t.constant(Td(Shape{1, 5}, 0.2));
  EXPECT_THROW(emd_loss(a, b), ShapeError);
}

TEST(Emd, PropertiesOverRandomPairs) {
  std::mt19937_64 rng(2);
  const double bound = std::sqrt(9.0 / 10.0);
  for (int trial = 0; trial < 500; ++trial) {
    auto y = random_distributions(rng, 4, 10), h = random_distributions(rng, 4, 10);
    const double ab = eval({y, h}, [](auto& v) { return emd_loss(v[0], v[1]); });
    const double ba = eval({h, y}, [](auto& v) { return emd_loss(v[0], v[1]); });
    ASSERT_NEAR(ab, oracle::emd(y, h), 1e-12);
    ASSERT_NEAR(ab, ba, 1e-12);
    ASSERT_GE(ab, 0.0);
    ASSERT_LE(ab, bound + 1e-12);
  }
  EXPECT_NEAR(eval({delta_rows(1), delta_rows(10)}, [](auto& v) { return emd_loss(v[0], v[1]); }),
              bound, 1e-12);
}

TEST(EmdDistance, AgreesWithGraphLoss) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto y = oracle::random_distribution(rng, 10), h = oracle::random_distribution(rng, 10);
    EXPECT_NEAR(emd_distance(RatingDistribution::normalized(std::span<const double>(y)),
                             RatingDistribution::normalized(std::span<const double>(h))),
                oracle::emd_row(y, h), 1e-12);
  }
}

TEST(Kd, Examples) {
  std::mt19937_64 rng(4);
  auto d = random_distributions(rng, 2, 10);
  auto f = oracle::random_matrix(rng, 2, 6);
  auto kd = [](auto& v) { return kd_loss(v[0], v[1], v[2], v[3]); };
  EXPECT_NEAR(eval({d, d, f, f}, kd), 0.0, 1e-12);
  auto shifted = f;
  for (auto& r : shifted)
    for (auto& x : r) x += 0.3;
  EXPECT_NEAR(eval({d, d, f, shifted}, kd), 0.09, 1e-12);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_distributions(rng, 3, 10), s = random_distributions(rng, 3, 10);
    auto ft = oracle::random_matrix(rng, 3, 8), fs = oracle::random_matrix(rng, 3, 8);
    ASSERT_NEAR(eval({t, s, ft, fs}, kd), oracle::emd(t, s) + oracle::mse(ft, fs), 1e-12);
  }
}

TEST(Kd, FeatureWidthMismatchIsRejected) {
  Tape<double> t;
  auto d = t.constant(Td(Shape{1, 10}, 0.1));
  EXPECT_THROW(kd_loss(d, d, t.constant(Td(Shape{1, 4})), t.constant(Td(Shape{1, 5}))), ShapeError);
}

TEST(Mixed, ExamplesAndIdentities) {
  std::mt19937_64 rng(5);
  auto mixed = [](auto& v) { return mixed_loss(v[0], v[1], v[2], v[3], v[4]); };
  auto label = [](auto& v) { return mixed_label_loss(v[0], v[1], v[2], v[3], v[4]); };
  auto kd = [](auto& v) { return kd_loss(v[0], v[1], v[3], v[4]); };
  for (int trial = 0; trial < 200; ++trial) {
    auto t = random_distributions(rng, 3, 10), s = random_distributions(rng, 3, 10),
         gt = random_distributions(rng, 3, 10);
    auto ft = oracle::random_matrix(rng, 3, 5), fs = oracle::random_matrix(rng, 3, 5);
    ASSERT_NEAR(eval({t, s, t, ft, fs}, mixed), eval({t, s, t, ft, fs}, kd), 1e-12);
    ASSERT_NEAR(eval({t, s, t, ft, fs}, label), eval({t, s, t, ft, fs}, kd), 1e-12);
    ASSERT_NEAR(eval({t, s, gt, ft, fs}, mixed),
                0.5 * oracle::emd(t, s) + 0.5 * oracle::emd(gt, s) + oracle::mse(ft, fs), 1e-12);
    ASSERT_NEAR(eval({t, s, gt, ft, fs}, label), oracle::emd(blend(gt, t), s) + oracle::mse(ft, fs),
                1e-12);
    ASSERT_NO_THROW(RatingDistribution(blend(gt, t)[0]));
  }
  auto d = random_distributions(rng, 2, 10);
  auto f = oracle::random_matrix(rng, 2, 4);
  EXPECT_NEAR(eval({d, d, d, f, f}, mixed), 0.0, 1e-12);
}

TEST(Mixed, BlendOfTwoDeltas) {
  auto b = blend(delta_rows(1), delta_rows(3));
  Vec expected(10, 0.0);
  expected[0] = expected[2] = 0.5;
  EXPECT_EQ(b[0], expected);
  // Loss against a student equal to the blend leaves only the feature term.
  auto f = constant(1, 3, 0.0);
  EXPECT_NEAR(eval({delta_rows(3), b, delta_rows(1), f, f},
                   [](auto& v) { return mixed_label_loss(v[0], v[1], v[2], v[3], v[4]); }),
              0.0, 1e-12);
}

TEST(Multitask, Examples) {
  std::mt19937_64 rng(6);
  auto mt = [](auto& v) { return multitask_loss(v[0], v[1], v[2], v[3]); };
  auto d = random_distributions(rng, 2, 10);
  Mat sem = constant(2, 22, 0.0);
  sem[0][1] = sem[0][20] = sem[1][4] = sem[1][21] = 1.0;
  EXPECT_LT(eval({d, d, sem, sem}, mt), 1e-5);
  EXPECT_NEAR(eval({d, d, constant(2, 22, 0.5), sem}, mt), std::log(2.0), 1e-12);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_distributions(rng, 3, 10), g = random_distributions(rng, 3, 10);
    auto sp = oracle::random_matrix(rng, 3, 22, 0.01, 0.99);
    Mat sg = constant(3, 22, 0.0);
    for (auto& r : sg) r[rng() % 11] = r[11 + rng() % 11] = 1.0;
    ASSERT_NEAR(eval({p, g, sp, sg}, mt), oracle::emd(p, g) + oracle::bce(sp, sg), 1e-12);
  }
}

TEST(BceKd, Examples) {
  auto bkd = [](auto& v) { return bce_kd_loss(v[0], v[1], v[2], v[3]); };
  auto half = constant(4, 1, 0.5);
  auto f = constant(4, 6, 0.2), g = constant(4, 6, 0.7);
  EXPECT_NEAR(eval({half, half, f, f}, bkd), std::log(2.0), 1e-12);
  EXPECT_NEAR(eval({half, half, f, g}, bkd), std::log(2.0) + 0.25, 1e-12);
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = oracle::random_matrix(rng, 5, 1, 0.0, 1.0), s = oracle::random_matrix(rng, 5, 1, 0.0, 1.0);
    auto ft = oracle::random_matrix(rng, 5, 4), fs = oracle::random_matrix(rng, 5, 4);
    ASSERT_NEAR(eval({t, s, ft, fs}, bkd), oracle::bce(s, t) + oracle::mse(ft, fs), 1e-12);
  }
}

TEST(BceKd, SaturatedProbabilitiesStayFinite) {
  auto bkd = [](auto& v) { return bce_kd_loss(v[0], v[1], v[2], v[3]); };
  Mat t = {{1.0}, {0.0}}, s = {{0.0}, {1.0}};
  auto f = constant(2, 2, 0.0);
  const double v = eval({t, s, f, f}, bkd);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -std::log(1e-7), 1e-6);
}

TEST(MseKd, Examples) {
  auto mkd = [](auto& v) { return mse_kd_loss(v[0], v[1], v[2], v[3]); };
  std::mt19937_64 rng(8);
  auto sc = oracle::random_matrix(rng, 3, 1, 1.0, 10.0);
  auto f = oracle::random_matrix(rng, 3, 4);
  EXPECT_NEAR(eval({sc, sc, f, f}, mkd), 0.0, 1e-12);
  auto off = sc;
  for (auto& r : off) r[0] += 0.5;
  EXPECT_NEAR(eval({sc, off, f, f}, mkd), 0.25, 1e-12);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = oracle::random_matrix(rng, 4, 1, 1.0, 10.0), s = oracle::random_matrix(rng, 4, 1, 1.0, 10.0);
    auto ft = oracle::random_matrix(rng, 4, 3), fs = oracle::random_matrix(rng, 4, 3);
    ASSERT_NEAR(eval({t, s, ft, fs}, mkd), oracle::mse(t, s) + oracle::mse(ft, fs), 1e-10);
  }
}

TEST(Gradients, EveryLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto dist = [&] { return to_tensor(random_distributions(rng, 3, 10)); };
  auto feat = [&] { return to_tensor(oracle::random_matrix(rng, 3, 5)); };
  auto prob = [&](std::size_t w) { return to_tensor(oracle::random_matrix(rng, 3, w, 0.05, 0.95)); };
  for (int trial = 0; trial < 10; ++trial) {
    EXPECT_LT(grad_error({dist(), dist()}, [](auto& v) { return emd_loss(v[0], v[1]); }), 1e-4);
    EXPECT_LT(grad_error({feat(), feat()}, [](auto& v) { return mse_loss(v[0], v[1]); }), 1e-4);
    EXPECT_LT(grad_error({prob(4), prob(4)}, [](auto& v) { return bce_loss(v[0], v[1]); }), 1e-4);
    EXPECT_LT(grad_error({dist(), dist(), feat(), feat()},
                         [](auto& v) { return kd_loss(v[0], v[1], v[2], v[3]); }),
              1e-4);
    EXPECT_LT(grad_error({dist(), dist(), dist(), feat(), feat()},
                         [](auto& v) { return mixed_loss(v[0], v[1], v[2], v[3], v[4]); }),
              1e-4);
    EXPECT_LT(grad_error({dist(), dist(), dist(), feat(), feat()},
                         [](auto& v) { return mixed_label_loss(v[0], v[1], v[2], v[3], v[4]); }),
              1e-4);
    EXPECT_LT(grad_error({dist(), dist(), prob(22), prob(22)},
                         [](auto& v) { return multitask_loss(v[0], v[1], v[2], v[3]); }),
              1e-4);
    EXPECT_LT(grad_error({prob(1), prob(1), feat(), feat()},
                         [](auto& v) { return bce_kd_loss(v[0], v[1], v[2], v[3]); }),
              1e-4);
    EXPECT_LT(grad_error({prob(1), prob(1), feat(), feat()},
                         [](auto& v) { return mse_kd_loss(v[0], v[1], v[2], v[3]); }),
              1e-4);
  }
}

TEST(LossSpecs, EvaluateDispatchesEveryKind) {
  std::mt19937_64 rng(10);
  Tape<double> t;
  auto td = random_distributions(rng, 2, 10), sd = random_distributions(rng, 2, 10),
       gd = random_distributions(rng, 2, 10);
  auto tf = oracle::random_matrix(rng, 2, 4), sf = oracle::random_matrix(rng, 2, 4);
  LossInputs<double> in;
  in.teacher_out = t.constant(to_tensor(td));
  in.student_out = t.constant(to_tensor(sd));
  in.gt = t.constant(to_tensor(gd));
  in.teacher_feat = t.constant(to_tensor(tf));
  in.student_feat = t.constant(to_tensor(sf));

  EXPECT_NEAR(evaluate(LossSpec{LossKind::kd}, in).value().item(), oracle::emd(td, sd) + oracle::mse(tf, sf),
              1e-12);
  EXPECT_NEAR(evaluate(LossSpec{LossKind::kd, 0.0, 1.0, 1.0}, in).value().item(),
              oracle::emd(gd, sd) + oracle::mse(tf, sf), 1e-12);
  EXPECT_NEAR(evaluate(LossSpec{LossKind::kd, 1.0, 0.0, 0.0}, in).value().item(), oracle::emd(td, sd), 1e-12);
  EXPECT_NEAR(evaluate(LossSpec{LossKind::mixed_loss}, in).value().item(),
              0.5 * oracle::emd(td, sd) + 0.5 * oracle::emd(gd, sd) + oracle::mse(tf, sf), 1e-12);
  EXPECT_NEAR(evaluate(LossSpec{LossKind::emd}, in).value().item(), oracle::emd(gd, sd), 1e-12);

  EXPECT_THROW(evaluate(LossSpec{LossKind::multitask}, in), std::invalid_argument);
  EXPECT_THROW(evaluate(LossSpec{LossKind::kd, -1.0}, in), std::invalid_argument);
  EXPECT_THROW(evaluate(LossSpec{LossKind::kd, 0.0, 0.0, 0.0}, in), std::invalid_argument);
}

TEST(LossSpecs, KindNamesRoundTrip) {
  for (auto k : {LossKind::emd, LossKind::kd, LossKind::mixed_loss, LossKind::mixed_label, LossKind::multitask,
                 LossKind::bce_kd, LossKind::mse_kd, LossKind::bce, LossKind::mse})
    EXPECT_EQ(parse_loss_kind(to_string(k)), k);
  EXPECT_THROW(parse_loss_kind("hinge"), std::invalid_argument);
}
