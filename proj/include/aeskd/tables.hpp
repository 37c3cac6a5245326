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

// Directional ablation tables on the synthetic corpus. Each check returns a
// pass/fail verdict with the numbers behind it; significance uses the
// teacher's same-split spread.

#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "aeskd/experiment.hpp"

namespace aeskd {

struct CriterionResult {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

inline std::string format_line(const CriterionResult& c) {
  char head[96];
  std::snprintf(head, sizeof head, "[%s] criterion %2d  %-34s", c.pass ? "PASS" : "FAIL", c.id,
                c.title.c_str());
  return std::string(head) + " " + c.detail;
}

namespace tables {

inline StudentCell cell(TrainingMode m, bool frozen = false) {
  StudentCell c;
  c.mode = m;
  c.frozen = frozen;
  return c;
}

inline std::string f4(double v) { return Lab::fmt(v, 4); }

struct VarianceStudy {
  VarianceReport report;
  std::vector<double> fold_srcc;
  double delta_accuracy = 0.0;  // same spread, measured on binary accuracy
};

// Repeated teacher trainings on the fixed split and one teacher per
// cross-validation fold.
inline VarianceStudy variance_study(Lab& lab) {
  const auto& cfg = lab.config();
  VarianceStudy v;
  std::vector<double> same, acc;
  for (std::size_t r = 0; r < cfg.teacher_repeats; ++r) {
    const auto& t = lab.teacher(HeadKind::distribution, mix_seed(lab.teacher_seed(), r + 1)).test;
    same.push_back(t.srcc);
    acc.push_back(t.acc);
  }
  const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
  v.delta_accuracy = *hi - *lo;
  std::vector<std::uint64_t> ids;
  for (const auto& s : lab.samples()) ids.push_back(s.id);
  const auto folds =
      make_splits(ids, {SplitSpec::Scheme::cross_validation, cfg.folds, 0, cfg.corpus_seed});
  const auto& g = lab.gsf("combined");
  for (const auto& f : folds)
    v.fold_srcc.push_back(lab.train_teacher(HeadKind::distribution, g, f.train, f.test, lab.teacher_seed()).test.srcc);
  v.report = variance_decomposition(same, v.fold_srcc);
  lab.note("variance: delta_training " + f4(v.report.delta_training) + ", delta_exp " +
           f4(v.report.delta_exp) + ", delta_split " + f4(v.report.delta_split) + ", accuracy spread " +
           f4(v.delta_accuracy));
  return v;
}

inline nlohmann::json variance_json(const VarianceStudy& v, const Lab& lab) {
  std::vector<MetricRecord> recs;
  for (std::size_t i = 0; i < v.report.same_split_runs.size(); ++i)
    recs.push_back({"srcc", v.report.same_split_runs[i], lab.test_ids().size(), "teacher", "fixed", i});
  for (std::size_t i = 0; i < v.fold_srcc.size(); ++i)
    recs.push_back({"srcc", v.fold_srcc[i], lab.samples().size() / v.fold_srcc.size(), "teacher",
                    "fold" + std::to_string(i), std::nullopt});
  recs.push_back({"delta_training", v.report.delta_training, v.report.same_split_runs.size(), {}, {}, {}});
  recs.push_back({"delta_exp", v.report.delta_exp, v.fold_srcc.size(), {}, {}, {}});
  recs.push_back({"delta_split", v.report.delta_split, v.fold_srcc.size(), {}, {}, {}});
  std::vector<std::uint64_t> seeds{lab.config().corpus_seed, lab.teacher_seed()};
  return make_report(recs, config_hash(lab.config()), seeds);
}

// KD x trainable backbone.
inline CriterionResult table_vi(Lab& lab, double delta) {
  auto m = [&](TrainingMode mode, bool frozen) {
    return lab.mean_metric(cell(mode, frozen), &EvalScores::srcc);
  };
  const double base = m(TrainingMode::baseline, false), base_fz = m(TrainingMode::baseline, true);
  const double kd = m(TrainingMode::kd, false), kd_fz = m(TrainingMode::kd, true);
  const bool margin = kd - base > delta;
  const bool order = kd > kd_fz && kd_fz > std::max(base, base_fz);
  const bool tie = std::abs(base - base_fz) <= delta;
  CriterionResult r{4, "KD x trainable backbone", margin && order && tie, ""};
  r.detail = "kd " + f4(kd) + ", kd/frozen " + f4(kd_fz) + ", baseline " + f4(base) +
             ", baseline/frozen " + f4(base_fz) + "; margin " + f4(kd - base) + (margin ? " > " : " <= ") +
             "delta " + f4(delta) + "; ordering " + (order ? "holds" : "violated") +
             "; no-KD gap " + f4(std::abs(base - base_fz)) + (tie ? " within" : " exceeds") + " delta";
  return r;
}

inline StudentCell kd_weighted(double out, double feat, double gt) {
  StudentCell c = cell(TrainingMode::kd);
  c.output_weight = out;
  c.feature_weight = feat;
  c.gt_weight = gt;
  return c;
}

// Which knowledge terms matter. Without the output term the
// student output is supervised by ground truth.
inline CriterionResult table_vii(Lab& lab, double delta) {
  const double base = lab.mean_metric(cell(TrainingMode::baseline), &EvalScores::srcc);
  const double both = lab.mean_metric(cell(TrainingMode::kd), &EvalScores::srcc);
  const double feat = lab.mean_metric(kd_weighted(0.0, 1.0, 1.0), &EvalScores::srcc);
  const double out = lab.mean_metric(kd_weighted(1.0, 0.0, 0.0), &EvalScores::srcc);
  const bool pass = feat - base > delta && out - base > delta && both >= feat && both >= out;
  CriterionResult r{5, "knowledge terms", pass, ""};
  r.detail = "feature-only " + f4(feat) + ", output-only " + f4(out) + ", both " + f4(both) +
             ", baseline " + f4(base) + " (delta " + f4(delta) + ")";
  return r;
}

// Single vs combined features, and teacher adequacy.
inline CriterionResult teachers(Lab& lab, double delta) {
  const auto seed = lab.teacher_seed();
  double best = -1.0;
  std::string singles;
  for (const auto& p : lab.config().pocs) {
    const double s = lab.teacher(HeadKind::distribution, seed, p.name).test.srcc;
    best = std::max(best, s);
    singles += p.name + " " + f4(s) + ", ";
  }
  const double combined = lab.reference_teacher(HeadKind::distribution).test.srcc;
  const double base = lab.mean_metric(cell(TrainingMode::baseline), &EvalScores::srcc);
  const bool pass = combined >= best - delta && combined > base + delta;
  CriterionResult r{6, "combined teacher / adequacy", pass, ""};
  r.detail = singles + "combined " + f4(combined) + "; student baseline " + f4(base) + " (delta " +
             f4(delta) + ")";
  return r;
}

// Nearest-neighbour matching on teacher features vs raw stacked
// features, bank = training split.
inline CriterionResult matching(Lab& lab, double delta, MetricReport* aesthetic_out = nullptr) {
  const auto& train = lab.train_ids();
  const auto& test = lab.test_ids();
  const auto bank_scores = lab.gt_scores(train);
  const auto gt = lab.gt_scores(test);
  std::vector<std::string> cats;
  for (auto id : test) cats.emplace_back(family_name(lab.sample(id).category()));

  const auto& g = lab.gsf("combined");
  const auto raw = match_eval(g.select(test), g.select(train), bank_scores);
  const auto& cache = lab.reference_teacher(HeadKind::distribution).cache;
  FeatureBank ft;
  ft.dim = cache.feature_dim;
  ft.ids = cache.ids;
  ft.values = cache.features;
  const auto aes = match_eval(ft.select(test), ft.select(train), bank_scores);
  const auto raw_r = metric_report(raw.predictions, gt, cats);
  const auto aes_r = metric_report(aes.predictions, gt, cats);
  if (aesthetic_out) *aesthetic_out = aes_r;
  CriterionResult r{7, "feature matching", aes_r.srcc - raw_r.srcc > delta, ""};
  r.detail = "aesthetic features " + f4(aes_r.srcc) + " vs stacked generic features " + f4(raw_r.srcc) +
             " (delta " + f4(delta) + ")";
  return r;
}

// Resolution drop with and without KD.
inline CriterionResult resolution(Lab& lab) {
  const std::size_t n = lab.config().full_res_seeds;
  auto full = [](TrainingMode m) {
    StudentCell c = cell(m);
    c.full_resolution = true;
    return c;
  };
  const double kd_full = lab.mean_metric(full(TrainingMode::kd), &EvalScores::srcc, n);
  const double kd_small = lab.mean_metric(cell(TrainingMode::kd), &EvalScores::srcc, n);
  const double base_full = lab.mean_metric(full(TrainingMode::baseline), &EvalScores::srcc, n);
  const double base_small = lab.mean_metric(cell(TrainingMode::baseline), &EvalScores::srcc, n);
  const double drop_kd = kd_full - kd_small, drop_base = base_full - base_small;
  CriterionResult r{8, "full -> small resolution drop", drop_kd < drop_base, ""};
  r.detail = "KD " + f4(kd_full) + " -> " + f4(kd_small) + " (drop " + f4(drop_kd) + "), no KD " +
             f4(base_full) + " -> " + f4(base_small) + " (drop " + f4(drop_base) + ")";
  return r;
}

struct AttentionStudy {
  MiouReport kd, baseline;
  std::size_t subset = 0;
};

// Activation maps of the last student stage against subject masks
// on pleasant test images, averaged over student repeats.
inline AttentionStudy attention(Lab& lab) {
  const auto& cc = lab.config().corpus;
  const auto ids = pleasant_subset(lab.samples(), lab.test_ids(), cc);
  if (ids.empty()) throw std::runtime_error("no pleasant test images for the attention study");
  const std::size_t R = cc.resolution;
  Tensor<float> masks(Shape{ids.size(), R, R});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& m = lab.sample(ids[i]).mask;
    std::copy(m.data().begin(), m.data().end(), masks.ptr() + i * R * R);
  }
  const auto images = lab.subset(lab.images(false), ids);
  std::vector<std::size_t> rows(ids.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const auto batch = images.batch(rows);
  auto study = [&](TrainingMode mode) {
    MiouReport avg;
    const std::size_t n = lab.config().seeds;
    for (std::size_t r = 0; r < n; ++r) {
      auto& run = lab.student(cell(mode), r);
      const auto maps = activation_map(run.model->backbone, run.model->params, batch, R);
      const auto rep = miou_eval(maps, masks, 70.0);
      avg.miou += rep.miou / static_cast<double>(n);
      avg.pairs = rep.pairs;
      avg.skipped = rep.skipped;
      if (avg.curve.empty()) avg.curve.assign(rep.curve.size(), {0.0, 0.0});
      for (std::size_t k = 0; k < rep.curve.size(); ++k) {
        avg.curve[k].first = rep.curve[k].first;
        avg.curve[k].second += rep.curve[k].second / static_cast<double>(n);
      }
    }
    return avg;
  };
  AttentionStudy a;
  a.subset = ids.size();
  a.kd = study(TrainingMode::kd);
  a.baseline = study(TrainingMode::baseline);
  return a;
}

inline CriterionResult attention_criterion(const AttentionStudy& a) {
  CriterionResult r{9, "activation-map mIoU at p=70", a.kd.miou > a.baseline.miou && a.kd.curve.size() == 19, ""};
  r.detail = "KD " + f4(a.kd.miou) + " vs no KD " + f4(a.baseline.miou) + " on " + std::to_string(a.subset) +
             " pleasant images; curve p=5..95 with " + std::to_string(a.kd.curve.size()) + " points";
  return r;
}

inline CriterionResult variance_criterion(const VarianceStudy& v, const nlohmann::json& report,
                                          double table_vi_margin) {
  const auto errs = validate_report(report);
  const bool pass = v.report.same_split_runs.size() >= 10 && v.fold_srcc.size() == 12 && errs.empty() &&
                    table_vi_margin > v.report.delta_training;
  CriterionResult r{10, "variance protocol", pass, ""};
  r.detail = "delta_training " + f4(v.report.delta_training) + " over " +
             std::to_string(v.report.same_split_runs.size()) + " runs, delta_exp " + f4(v.report.delta_exp) +
             " over " + std::to_string(v.fold_srcc.size()) + " folds, delta_split " + f4(v.report.delta_split) +
             (v.report.split_negative ? " (floored)" : "") + "; schema " +
             (errs.empty() ? "valid" : "invalid: " + errs.front()) + "; KD margin " + f4(table_vi_margin);
  return r;
}

// Mixing GT into the KD objective.
inline CriterionResult mixed(Lab& lab, double delta) {
  const double kd = lab.mean_metric(cell(TrainingMode::kd), &EvalScores::srcc);
  const double ml = lab.mean_metric(cell(TrainingMode::mixed_loss), &EvalScores::srcc);
  const double mb = lab.mean_metric(cell(TrainingMode::mixed_label), &EvalScores::srcc);
  const bool pass = std::abs(ml - kd) <= delta && std::abs(mb - kd) <= delta;
  CriterionResult r{11, "mixed GT variants", pass, ""};
  r.detail = "mixed-loss " + f4(ml) + ", mixed-label " + f4(mb) + ", kd " + f4(kd) + " (delta " + f4(delta) + ")";
  return r;
}

// Binary classification and score regression students.
// Accuracy gains are judged against the accuracy spread of the repeated
// teacher runs, SRCC gains against the SRCC spread.
inline CriterionResult task_variants(Lab& lab, double delta, double delta_acc) {
  const double bb = lab.mean_metric(cell(TrainingMode::binary_baseline), &EvalScores::acc);
  const double bk = lab.mean_metric(cell(TrainingMode::binary_kd), &EvalScores::acc);
  const double rb = lab.mean_metric(cell(TrainingMode::regress_baseline), &EvalScores::srcc);
  const double rk = lab.mean_metric(cell(TrainingMode::regress_kd), &EvalScores::srcc);
  const bool pass = bk - bb > delta_acc && rk - rb > delta;
  CriterionResult r{12, "binary / regression KD", pass, ""};
  r.detail = "binary acc " + f4(bb) + " -> " + f4(bk) + " (accuracy delta " + f4(delta_acc) +
             "), regression srcc " + f4(rb) + " -> " + f4(rk) + " (delta " + f4(delta) + ")";
  return r;
}

// KD against multi-task learning with semantic labels.
inline CriterionResult multitask(Lab& lab, double delta) {
  const double kd = lab.mean_metric(cell(TrainingMode::kd), &EvalScores::srcc);
  const double mt = lab.mean_metric(cell(TrainingMode::multitask), &EvalScores::srcc);
  const double base = lab.mean_metric(cell(TrainingMode::baseline), &EvalScores::srcc);
  const bool pass = kd >= mt - delta && mt >= base - delta;
  CriterionResult r{13, "KD vs multi-task", pass, ""};
  r.detail = "kd " + f4(kd) + ", multitask " + f4(mt) + ", baseline " + f4(base) + "; margins " +
             f4(kd - mt) + ", " + f4(mt - base) + " (delta " + f4(delta) + ")";
  return r;
}

struct SuiteResult {
  VarianceStudy variance;
  AttentionStudy attention;
  std::vector<CriterionResult> criteria;
  nlohmann::json report;
};

// Every student run as a report record.
inline std::vector<MetricRecord> student_records(Lab& lab, const std::vector<StudentCell>& cells,
                                                 std::size_t repeats) {
  std::vector<MetricRecord> recs;
  for (const auto& c : cells)
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto& run = lab.student(c, r);
      const bool binary = mode_head(c.mode) == HeadKind::probability;
      recs.push_back({binary ? "acc" : "srcc", binary ? run.test.acc : run.test.srcc,
                      lab.test_ids().size(), c.label(), "fixed", r});
    }
  return recs;
}

// Runs the directional criteria (4-13). `on_result` fires as each verdict
// becomes available.
inline SuiteResult run_suite(Lab& lab, const std::function<void(const CriterionResult&)>& on_result = {}) {
  SuiteResult out;
  auto timed = [&](auto&& fn, double budget = 0.0) {
    const double t0 = Lab::clock();
    CriterionResult r = fn();
    r.seconds = Lab::clock() - t0;
    if (budget > 0.0) {
      r.pass = r.pass && r.seconds <= budget;
      r.detail += "; " + Lab::fmt(r.seconds, 0) + " s of " + Lab::fmt(budget, 0) + " s budget";
    }
    if (on_result) on_result(r);
    out.criteria.push_back(r);
    return r;
  };
  out.variance = variance_study(lab);
  const double delta = out.variance.report.delta_training;
  timed([&] { return table_vi(lab, delta); }, 900.0);
  const double margin = lab.mean_metric(cell(TrainingMode::kd), &EvalScores::srcc) -
                        lab.mean_metric(cell(TrainingMode::baseline), &EvalScores::srcc);
  timed([&] { return table_vii(lab, delta); });
  timed([&] { return teachers(lab, delta); });
  timed([&] { return matching(lab, delta); });
  timed([&] { return resolution(lab); });
  timed([&] {
    out.attention = attention(lab);
    return attention_criterion(out.attention);
  });
  const auto vjson = variance_json(out.variance, lab);
  timed([&] { return variance_criterion(out.variance, vjson, margin); });
  timed([&] { return mixed(lab, delta); });
  timed([&] { return task_variants(lab, delta, out.variance.delta_accuracy); });
  timed([&] { return multitask(lab, delta); });

  const std::vector<StudentCell> cells = {
      cell(TrainingMode::baseline), cell(TrainingMode::baseline, true), cell(TrainingMode::kd),
      cell(TrainingMode::kd, true), kd_weighted(0.0, 1.0, 1.0), kd_weighted(1.0, 0.0, 0.0),
      cell(TrainingMode::mixed_loss), cell(TrainingMode::mixed_label), cell(TrainingMode::multitask),
      cell(TrainingMode::binary_baseline), cell(TrainingMode::binary_kd),
      cell(TrainingMode::regress_baseline), cell(TrainingMode::regress_kd)};
  auto recs = student_records(lab, cells, lab.config().seeds);
  for (const auto& r : vjson["records"])
    recs.push_back({r["metric"], r["value"], r["n"], r.contains("category") ? std::optional<std::string>(r["category"]) : std::nullopt,
                    r.contains("split") ? std::optional<std::string>(r["split"]) : std::nullopt,
                    r.contains("run") ? std::optional<std::size_t>(r["run"]) : std::nullopt});
  std::vector<std::uint64_t> seeds{lab.config().corpus_seed, lab.teacher_seed()};
  for (std::size_t r = 0; r < lab.config().seeds; ++r) seeds.push_back(lab.student_seed(r));
  out.report = make_report(recs, config_hash(lab.config()), seeds);
  return out;
}

}  // namespace tables
}  // namespace aeskd
