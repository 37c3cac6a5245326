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

// Training objectives, all batched: distributions are [N, n], features [N, d],
// scalar predictions [N, 1]. Every loss averages over the batch.

#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "aeskd/autograd.hpp"
#include "aeskd/ratings.hpp"

namespace aeskd {

inline constexpr double kBceClamp = 1e-7;

namespace detail {
template <typename T>
void require_shape_match(const Var<T>& a, const Var<T>& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what), "operands " + to_string(a.shape()) +
                                            " vs " + to_string(b.shape()));
  }
}
}  // namespace detail

// Per-row sqrt(mean_k (CDF_y(k) - CDF_yhat(k))^2), averaged over rows.
template <typename T>
Var<T> emd_loss(Var<T> target, Var<T> pred) {
  detail::require_shape_match(target, pred, "emd_loss");
  auto diff = sub(cumsum(target), cumsum(pred));
  return mean(sqrt(row_mean(square(diff))));
}

// Mean of squared elementwise differences over all entries.
template <typename T>
Var<T> mse_loss(Var<T> a, Var<T> b) {
  detail::require_shape_match(a, b, "mse_loss");
  return mean(square(sub(a, b)));
}

// Mean binary cross-entropy of predicted probabilities against (possibly
// soft) targets. Predictions are clamped to [1e-7, 1 - 1e-7] before the log.
template <typename T>
Var<T> bce_loss(Var<T> pred, Var<T> target) {
  detail::require_shape_match(pred, target, "bce_loss");
  const T lo = static_cast<T>(kBceClamp);
  auto p = clamp(pred, lo, T{1} - lo);
  auto pos = mul(target, log(p));
  auto neg = mul(affine(target, T{-1}, T{1}), log(affine(p, T{-1}, T{1})));
  return affine(mean(add(pos, neg)), T{-1}, T{0});
}

template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<double, Var<T>>>& terms) {
  std::optional<Var<T>> acc;
  for (const auto& [w, v] : terms) {
    if (w == 0.0) continue;
    auto term = w == 1.0 ? v : affine(v, static_cast<T>(w), T{0});
    acc = acc ? add(*acc, term) : term;
  }
  if (!acc) throw std::invalid_argument("loss has no active terms");
  return *acc;
}

// EMD(teacher, student) + MSE(f_t, f_s)
template <typename T>
Var<T> kd_loss(Var<T> teacher_dist, Var<T> student_dist, Var<T> teacher_feat,
               Var<T> student_feat) {
  return add(emd_loss(teacher_dist, student_dist),
             mse_loss(teacher_feat, student_feat));
}

// 1/2 EMD(teacher, student) + 1/2 EMD(gt, student) + MSE(f_t, f_s)
template <typename T>
Var<T> mixed_loss(Var<T> teacher_dist, Var<T> student_dist, Var<T> gt_dist,
                  Var<T> teacher_feat, Var<T> student_feat) {
  return weighted_sum<T>({{0.5, emd_loss(teacher_dist, student_dist)},
                          {0.5, emd_loss(gt_dist, student_dist)},
                          {1.0, mse_loss(teacher_feat, student_feat)}});
}

// Target blended before the loss: EMD(1/2 gt + 1/2 teacher, student) + MSE.
template <typename T>
Var<T> mixed_label_loss(Var<T> teacher_dist, Var<T> student_dist, Var<T> gt_dist,
                        Var<T> teacher_feat, Var<T> student_feat) {
  detail::require_shape_match(teacher_dist, gt_dist, "mixed_label_loss");
  auto blended = add(affine(gt_dist, T{0.5}, T{0}), affine(teacher_dist, T{0.5}, T{0}));
  return add(emd_loss(blended, student_dist), mse_loss(teacher_feat, student_feat));
}

// EMD(pred, gt) + mean BCE(semantic prediction, two-hot label)
template <typename T>
Var<T> multitask_loss(Var<T> pred_dist, Var<T> gt_dist, Var<T> pred_semantic,
                      Var<T> semantic) {
  return add(emd_loss(pred_dist, gt_dist), bce_loss(pred_semantic, semantic));
}

// BCE with the teacher probability as soft target, plus feature MSE.
template <typename T>
Var<T> bce_kd_loss(Var<T> teacher_prob, Var<T> student_prob, Var<T> teacher_feat,
                   Var<T> student_feat) {
  return add(bce_loss(student_prob, teacher_prob),
             mse_loss(teacher_feat, student_feat));
}

// (y_t - y_s)^2 averaged over the batch, plus feature MSE.
template <typename T>
Var<T> mse_kd_loss(Var<T> teacher_score, Var<T> student_score, Var<T> teacher_feat,
                   Var<T> student_feat) {
  return add(mse_loss(teacher_score, student_score),
             mse_loss(teacher_feat, student_feat));
}

enum class LossKind { emd, kd, mixed_loss, mixed_label, multitask, bce_kd, mse_kd, bce, mse };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::emd: return "emd";
    case LossKind::kd: return "kd";
    case LossKind::mixed_loss: return "mixed_loss";
    case LossKind::mixed_label: return "mixed_label";
    case LossKind::multitask: return "multitask";
    case LossKind::bce_kd: return "bce_kd";
    case LossKind::mse_kd: return "mse_kd";
    case LossKind::bce: return "bce";
    case LossKind::mse: return "mse";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  for (auto k : {LossKind::emd, LossKind::kd, LossKind::mixed_loss, LossKind::mixed_label,
                 LossKind::multitask, LossKind::bce_kd, LossKind::mse_kd, LossKind::bce,
                 LossKind::mse})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown loss kind '" + std::string(s) + "'");
}

// Term weights for the kd family. The defaults give the plain KD loss;
// output_weight = 0 with gt_weight = 1 is feature-only supervision (the
// student is then driven by ground truth on its output), feature_weight = 0
// is output-only supervision. Mixed variants ignore these weights and always
// use 1/2, 1/2.
struct LossSpec {
  LossKind kind = LossKind::emd;
  double output_weight = 1.0;
  double feature_weight = 1.0;
  double gt_weight = 0.0;

  void validate() const {
    if (output_weight < 0.0 || feature_weight < 0.0 || gt_weight < 0.0) {
      throw std::invalid_argument("loss weights must be non-negative");
    }
    if (output_weight + feature_weight + gt_weight == 0.0) {
      throw std::invalid_argument("loss weights are all zero");
    }
  }
};

// Inputs for evaluate(); unused slots may stay empty.
template <typename T>
struct LossInputs {
  std::optional<Var<T>> student_out;   // distribution, probability or score
  std::optional<Var<T>> student_feat;
  std::optional<Var<T>> teacher_out;
  std::optional<Var<T>> teacher_feat;
  std::optional<Var<T>> gt;            // distribution, class or score
  std::optional<Var<T>> semantic_pred;
  std::optional<Var<T>> semantic;
};

template <typename T>
Var<T> evaluate(const LossSpec& spec, const LossInputs<T>& in) {
  spec.validate();
  auto need = [&](const std::optional<Var<T>>& v, std::string_view what) {
    if (!v) {
      throw std::invalid_argument("loss '" + std::string(to_string(spec.kind)) +
                                  "' requires " + std::string(what));
    }
    return *v;
  };
  switch (spec.kind) {
    case LossKind::emd:
      return emd_loss(need(in.gt, "ground truth"), need(in.student_out, "student output"));
    case LossKind::bce:
      return bce_loss(need(in.student_out, "student output"), need(in.gt, "ground truth"));
    case LossKind::mse:
      return mse_loss(need(in.gt, "ground truth"), need(in.student_out, "student output"));
    case LossKind::kd: {
      std::vector<std::pair<double, Var<T>>> terms;
      auto s = need(in.student_out, "student output");
      if (spec.output_weight > 0.0)
        terms.emplace_back(spec.output_weight, emd_loss(need(in.teacher_out, "teacher output"), s));
      if (spec.gt_weight > 0.0)
        terms.emplace_back(spec.gt_weight, emd_loss(need(in.gt, "ground truth"), s));
      if (spec.feature_weight > 0.0)
        terms.emplace_back(spec.feature_weight,
                           mse_loss(need(in.teacher_feat, "teacher feature"),
                                    need(in.student_feat, "student feature")));
      return weighted_sum<T>(terms);
    }
    case LossKind::mixed_loss:
      return mixed_loss(need(in.teacher_out, "teacher output"), need(in.student_out, "student output"),
                        need(in.gt, "ground truth"), need(in.teacher_feat, "teacher feature"),
                        need(in.student_feat, "student feature"));
    case LossKind::mixed_label:
      return mixed_label_loss(need(in.teacher_out, "teacher output"),
                              need(in.student_out, "student output"), need(in.gt, "ground truth"),
                              need(in.teacher_feat, "teacher feature"),
                              need(in.student_feat, "student feature"));
    case LossKind::multitask:
      return multitask_loss(need(in.student_out, "student output"), need(in.gt, "ground truth"),
                            need(in.semantic_pred, "semantic prediction"),
                            need(in.semantic, "semantic label"));
    case LossKind::bce_kd:
      return bce_kd_loss(need(in.teacher_out, "teacher output"), need(in.student_out, "student output"),
                         need(in.teacher_feat, "teacher feature"),
                         need(in.student_feat, "student feature"));
    case LossKind::mse_kd:
      return mse_kd_loss(need(in.teacher_out, "teacher output"), need(in.student_out, "student output"),
                         need(in.teacher_feat, "teacher feature"),
                         need(in.student_feat, "student feature"));
  }
  throw std::logic_error("unhandled loss kind");
}

// Plain EMD between two rating distributions (no graph).
inline double emd_distance(const RatingDistribution& y, const RatingDistribution& yhat) {
  if (y.levels() != yhat.levels()) {
    throw std::invalid_argument("emd of distributions with " + std::to_string(y.levels()) +
                                " and " + std::to_string(yhat.levels()) + " levels");
  }
  double a = 0.0, b = 0.0, s = 0.0;
  for (std::size_t k = 0; k < y.levels(); ++k) {
    a += y[k];
    b += yhat[k];
    s += (a - b) * (a - b);
  }
  return std::sqrt(s / static_cast<double>(y.levels()));
}

}  // namespace aeskd
