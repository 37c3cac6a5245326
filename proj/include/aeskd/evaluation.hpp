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
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aeskd/autograd.hpp"
#include "aeskd/ratings.hpp"
#include "aeskd/synthcorpus.hpp"

namespace aeskd {

// Raised when a metric is undefined for its inputs (constant vectors,
// mismatched lengths, too few samples).
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {
inline void check_pair(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size())
    throw MetricError(std::string(what) + ": lengths " + std::to_string(a.size()) + " and " +
                      std::to_string(b.size()) + " differ");
  if (a.size() < 2) throw MetricError(std::string(what) + ": needs at least two samples");
}
}  // namespace detail

// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = rank;
    i = j + 1;
  }
  return r;
}

inline double plcc(std::span<const double> pred, std::span<const double> gt) {
  detail::check_pair(pred, gt, "plcc");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mg = std::accumulate(gt.begin(), gt.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i] - mp, dy = gt[i] - mg;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw MetricError("correlation undefined for a constant vector");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double srcc(std::span<const double> pred, std::span<const double> gt) {
  detail::check_pair(pred, gt, "srcc");
  const auto rp = fractional_ranks(pred);
  const auto rg = fractional_ranks(gt);
  return plcc(rp, rg);
}

// Fraction of samples whose binarized scores agree.
inline double accuracy(std::span<const double> pred, std::span<const double> gt,
                       double threshold = 5.0) {
  if (pred.size() != gt.size() || pred.empty())
    throw MetricError("accuracy: lengths must match and be non-zero");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    hit += binarize(pred[i], threshold) == binarize(gt[i], threshold);
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct MetricReport {
  double srcc = 0.0, plcc = 0.0, acc = 0.0;
  std::optional<double> mean_emd;
  std::size_t n = 0;
  std::map<std::string, MetricReport> categories;
};

inline MetricReport metric_report(std::span<const double> pred, std::span<const double> gt,
                                  std::span<const std::string> categories = {}) {
  MetricReport r;
  r.srcc = srcc(pred, gt);
  r.plcc = plcc(pred, gt);
  r.acc = accuracy(pred, gt);
  r.n = pred.size();
  if (!categories.empty()) {
    if (categories.size() != pred.size()) throw MetricError("category list length mismatch");
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      groups[categories[i]].first.push_back(pred[i]);
      groups[categories[i]].second.push_back(gt[i]);
    }
    for (const auto& [name, g] : groups) {
      MetricReport c;
      c.n = g.first.size();
      // Categories too small or constant keep only their count.
      try {
        c.srcc = srcc(g.first, g.second);
        c.plcc = plcc(g.first, g.second);
      } catch (const MetricError&) {
        c.srcc = c.plcc = std::numeric_limits<double>::quiet_NaN();
      }
      c.acc = accuracy(g.first, g.second);
      r.categories.emplace(name, c);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Matching-based evaluation.

struct MatchResult {
  std::vector<std::uint64_t> ids;
  std::vector<double> predictions;
  std::vector<std::size_t> dropped_dims;  // zero variance over the bank
};

// Each query takes the score of its nearest bank row under L2 on features
// z-scored with the bank's per-dimension statistics. Equal distances go to
// the lowest bank id.
inline MatchResult match_eval(const FeatureBank& queries, const FeatureBank& bank,
                              std::span<const double> bank_scores) {
  if (bank.size() == 0) throw std::invalid_argument("match_eval: empty bank");
  if (bank_scores.size() != bank.size())
    throw std::invalid_argument("match_eval: bank scores do not align with bank rows");
  if (queries.size() > 0 && queries.dim != bank.dim)
    throw std::invalid_argument("match_eval: query width " + std::to_string(queries.dim) +
                                " differs from bank width " + std::to_string(bank.dim));
  const std::size_t D = bank.dim, B = bank.size();
  std::vector<double> mu(D, 0.0), sd(D, 0.0);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t d = 0; d < D; ++d) mu[d] += bank.row(i)[d];
  for (auto& m : mu) m /= static_cast<double>(B);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t d = 0; d < D; ++d) sd[d] += std::pow(bank.row(i)[d] - mu[d], 2);
  MatchResult out;
  std::vector<std::size_t> keep;
  for (std::size_t d = 0; d < D; ++d) {
    sd[d] = std::sqrt(sd[d] / static_cast<double>(B));
    if (sd[d] > 0.0) keep.push_back(d);
    else out.dropped_dims.push_back(d);
  }
  const std::size_t K = keep.size();
  std::vector<double> zb(B * K);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < K; ++k)
      zb[i * K + k] = (bank.row(i)[keep[k]] - mu[keep[k]]) / sd[keep[k]];
  std::vector<double> zq(K);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t k = 0; k < K; ++k)
      zq[k] = (queries.row(q)[keep[k]] - mu[keep[k]]) / sd[keep[k]];
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < B; ++i) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < K; ++k) d2 += (zq[k] - zb[i * K + k]) * (zq[k] - zb[i * K + k]);
      if (d2 < best_d || (d2 == best_d && bank.ids[i] < bank.ids[best])) {
        best_d = d2;
        best = i;
      }
    }
    out.ids.push_back(queries.ids[q]);
    out.predictions.push_back(bank_scores[best]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Percentile-threshold segmentation.

// Threshold is the sorted value at 0-based index ceil(p N / 100), clamped to
// N - 1; pixels at or above it are kept. A distinct-valued map keeps
// N - ceil(p N / 100) pixels.
inline double percentile_value(std::span<const float> map, double p) {
  if (!(p > 0.0 && p < 100.0)) throw std::invalid_argument("percentile must lie in (0, 100)");
  if (map.empty()) throw std::invalid_argument("percentile of an empty map");
  std::vector<float> v(map.begin(), map.end());
  const auto idx = std::min(
      v.size() - 1, static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size()) / 100.0)));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
  return v[idx];
}

inline std::vector<std::uint8_t> percentile_threshold(std::span<const float> map, double p) {
  const double t = percentile_value(map, p);
  std::vector<std::uint8_t> mask(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) mask[i] = map[i] >= t;
  return mask;
}

// nullopt when both masks are empty.
template <typename A, typename B>
std::optional<double> iou(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw std::invalid_argument("iou of masks with different extents");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != A{0}, y = b[i] != B{0};
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) return std::nullopt;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct MiouReport {
  double percentile = 70.0;
  double miou = 0.0;
  std::size_t pairs = 0;
  std::size_t skipped = 0;  // empty unions
  std::vector<std::pair<double, double>> curve;  // (p, mIoU), p = 5..95
};

inline double miou_at(const Tensor<float>& maps, const Tensor<float>& masks, double p,
                      std::size_t* used = nullptr, std::size_t* skipped = nullptr) {
  if (maps.shape() != masks.shape() || maps.rank() != 3)
    throw std::invalid_argument("maps " + to_string(maps.shape()) + " and masks " +
                                to_string(masks.shape()) + " must both be [N, H, W]");
  const std::size_t N = maps.dim(0), P = maps.dim(1) * maps.dim(2);
  double sum = 0.0;
  std::size_t n = 0, skip = 0;
  for (std::size_t i = 0; i < N; ++i) {
    std::span<const float> m(maps.ptr() + i * P, P), g(masks.ptr() + i * P, P);
    const auto seg = percentile_threshold(m, p);
    const auto v = iou(std::span<const std::uint8_t>(seg), g);
    if (!v) {
      ++skip;
      continue;
    }
    sum += *v;
    ++n;
  }
  if (used) *used = n;
  if (skipped) *skipped = skip;
  return n ? sum / static_cast<double>(n) : 0.0;
}

inline MiouReport miou_eval(const Tensor<float>& maps, const Tensor<float>& masks, double p = 70.0) {
  MiouReport r;
  r.percentile = p;
  r.miou = miou_at(maps, masks, p, &r.pairs, &r.skipped);
  for (int q = 5; q <= 95; q += 5) r.curve.emplace_back(q, miou_at(maps, masks, q));
  return r;
}

inline std::string curve_csv(const std::vector<std::pair<double, double>>& curve,
                             const std::string& value_name = "miou") {
  std::ostringstream os;
  os.precision(10);
  os << "p," << value_name << '\n';
  for (const auto& [p, v] : curve) os << p << ',' << v << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Variance decomposition (max - min spreads).

struct VarianceReport {
  double delta_training = 0.0;
  double delta_exp = 0.0;
  double delta_split = 0.0;
  bool split_negative = false;  // repeats spread wider than splits
  std::vector<double> same_split_runs, cross_split_runs;

  bool significant(double improvement) const { return improvement > delta_training; }
};

inline double spread(std::span<const double> v) {
  if (v.size() < 2) throw std::invalid_argument("spread needs at least two runs");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

inline VarianceReport variance_decomposition(std::span<const double> same_split,
                                             std::span<const double> cross_split) {
  VarianceReport r;
  r.delta_training = spread(same_split);
  r.delta_exp = spread(cross_split);
  const double split = r.delta_exp - r.delta_training;
  r.split_negative = split < 0.0;
  r.delta_split = std::max(0.0, split);
  r.same_split_runs.assign(same_split.begin(), same_split.end());
  r.cross_split_runs.assign(cross_split.begin(), cross_split.end());
  return r;
}

// ---------------------------------------------------------------------------
// Cost accounting in multiply-accumulates.

inline constexpr double kTrainingCostFactor = 3.0;

struct CostReport {
  double inference_per_input = 0.0;
  double training_per_input = 0.0;
};

inline CostReport make_cost(double inference_per_input) {
  if (!(inference_per_input > 0.0)) throw std::invalid_argument("cost must be positive");
  return {inference_per_input, kTrainingCostFactor * inference_per_input};
}

// Runs `forward` on a tape in inference mode for an input of the given
// static shape and divides the recorded MACs by the batch extent.
inline CostReport cost_estimate(const std::function<void(Tape<float>&, Var<float>)>& forward,
                                const Shape& input_shape) {
  if (input_shape.empty()) throw std::invalid_argument("cost estimate needs a static batch shape");
  for (auto e : input_shape)
    if (e == 0) throw std::invalid_argument("cost estimate needs positive static extents");
  Tape<float> tape(Mode::inference);
  forward(tape, tape.constant(Tensor<float>(input_shape)));
  return make_cost(tape.total_macs() / static_cast<double>(input_shape[0]));
}

inline CostReport operator+(const CostReport& a, const CostReport& b) {
  return {a.inference_per_input + b.inference_per_input,
          a.training_per_input + b.training_per_input};
}

// Extra per-input cost of the distillation pipeline: each feature extractor
// runs once, the distiller trains for `epochs`, knowledge export runs once.
struct PipelineStage {
  std::string name;
  double per_input = 0.0;
  double repeats = 1.0;
  double total() const { return per_input * repeats; }
};

struct PipelineCost {
  std::vector<PipelineStage> stages;
  double total() const {
    double s = 0.0;
    for (const auto& st : stages) s += st.total();
    return s;
  }
};

inline PipelineCost pipeline_cost(const std::vector<std::pair<std::string, CostReport>>& extractors,
                                  const CostReport& distiller, std::size_t distiller_epochs) {
  PipelineCost p;
  for (const auto& [name, c] : extractors)
    p.stages.push_back({"extract:" + name, c.inference_per_input, 1.0});
  p.stages.push_back({"distiller-training", distiller.training_per_input,
                      static_cast<double>(distiller_epochs)});
  p.stages.push_back({"knowledge-export", distiller.inference_per_input, 1.0});
  return p;
}

// ---------------------------------------------------------------------------
// Reports.

struct MetricRecord {
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::optional<std::string> category, split;
  std::optional<std::size_t> run;
};

inline nlohmann::json to_json(const MetricRecord& r) {
  nlohmann::json j{{"metric", r.metric}, {"value", r.value}, {"n", r.n}};
  if (r.category) j["category"] = *r.category;
  if (r.split) j["split"] = *r.split;
  if (r.run) j["run"] = *r.run;
  return j;
}

inline std::vector<MetricRecord> records_from(const MetricReport& m,
                                              std::optional<std::string> split = std::nullopt,
                                              std::optional<std::size_t> run = std::nullopt) {
  std::vector<MetricRecord> out;
  auto push = [&](const MetricReport& r, std::optional<std::string> cat) {
    for (auto [name, v] : {std::pair{"srcc", r.srcc}, {"plcc", r.plcc}, {"acc", r.acc}})
      if (std::isfinite(v)) out.push_back({name, v, r.n, cat, split, run});
    if (r.mean_emd) out.push_back({"emd", *r.mean_emd, r.n, cat, split, run});
  };
  push(m, std::nullopt);
  for (const auto& [cat, r] : m.categories) push(r, cat);
  return out;
}

// {"config_hash", "seeds", "records": [...]}
inline nlohmann::json make_report(const std::vector<MetricRecord>& records,
                                  const std::string& config_hash,
                                  const std::vector<std::uint64_t>& seeds) {
  nlohmann::json j;
  j["config_hash"] = config_hash;
  j["seeds"] = seeds;
  j["records"] = nlohmann::json::array();
  for (const auto& r : records) j["records"].push_back(to_json(r));
  return j;
}

// Empty result means valid; otherwise one message per violation.
inline std::vector<std::string> validate_report(const nlohmann::json& j) {
  std::vector<std::string> errs;
  if (!j.is_object()) return {"report is not an object"};
  if (!j.contains("config_hash") || !j["config_hash"].is_string()) errs.push_back("missing config_hash");
  if (!j.contains("seeds") || !j["seeds"].is_array()) errs.push_back("missing seeds");
  if (!j.contains("records") || !j["records"].is_array()) {
    errs.push_back("missing records");
    return errs;
  }
  std::size_t i = 0;
  for (const auto& r : j["records"]) {
    const auto at = "record " + std::to_string(i++) + ": ";
    if (!r.is_object()) {
      errs.push_back(at + "not an object");
      continue;
    }
    if (!r.contains("metric") || !r["metric"].is_string()) errs.push_back(at + "metric must be a string");
    if (!r.contains("value") || !r["value"].is_number()) errs.push_back(at + "value must be a number");
    if (!r.contains("n") || !r["n"].is_number_unsigned()) errs.push_back(at + "n must be a count");
    if (r.contains("category") && !r["category"].is_string()) errs.push_back(at + "category must be a string");
    if (r.contains("split") && !r["split"].is_string()) errs.push_back(at + "split must be a string");
    if (r.contains("run") && !r["run"].is_number_unsigned()) errs.push_back(at + "run must be a count");
    for (const auto& [k, v] : r.items())
      if (k != "metric" && k != "value" && k != "n" && k != "category" && k != "split" && k != "run")
        errs.push_back(at + "unknown key '" + k + "'");
  }
  return errs;
}

}  // namespace aeskd
