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

// Experiment configuration and an in-memory pipeline (corpus, pattern
// backbones, feature banks, teachers, students) that memoises every stage.

#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "aeskd/distillation.hpp"
#include "aeskd/evaluation.hpp"

namespace aeskd {

struct PocRecipe {
  std::string name;
  std::vector<std::size_t> widths;
  std::vector<Family> families;
  double noise_scale = 1.0;  // multiplies the corpus render noise
  std::size_t count = 1200;  // pre-training images
};

inline std::vector<PocRecipe> default_pocs() {
  using enum Family;
  return {
      {"A", {8, 16, 32}, {circle, cross}, 1.0, 800},
      {"B", {16, 32, 64}, {circle, cross, stripes, checkerboard}, 1.0, 1200},
      {"C", {24, 48, 96}, {circle, cross, stripes, checkerboard, gradient_blob, ring}, 2.0, 1200},
  };
}

struct ExperimentConfig {
  CorpusConfig corpus;
  std::uint64_t corpus_seed = 7;
  std::size_t test_size = 400;
  std::size_t folds = 12;

  std::vector<PocRecipe> pocs = default_pocs();
  std::size_t poc_resolution = 32;
  Schedule poc_schedule{4, 16, 1e-3, 0.1, 3};

  std::size_t distiller_hidden = 128;
  std::size_t feature_width = 64;
  Schedule distiller_schedule{30, 32, 3e-3, 0.1, 10};

  std::string student_init = "A";  // pattern backbone whose weights seed the student
  std::size_t student_hidden = 64;
  Schedule student_schedule{12, 16, 3e-3, 0.1, 6};

  std::size_t seeds = 5;            // student repeats per cell
  std::size_t teacher_repeats = 10;  // same-split teacher trainings
  std::size_t full_res_seeds = 3;    // repeats for full-resolution students

  void validate() const {
    corpus.validate();
    if (test_size == 0 || test_size >= corpus.count)
      throw std::invalid_argument("test size must be in (0, corpus count)");
    if (folds < 2) throw std::invalid_argument("cross-validation needs at least two folds");
    if (pocs.empty()) throw std::invalid_argument("at least one pattern backbone is required");
    for (const auto& p : pocs) {
      if (p.name.empty()) throw std::invalid_argument("pattern backbone needs a name");
      BackboneSpec{p.widths, 3, poc_resolution}.validate();
      if (p.families.size() < 2) throw std::invalid_argument(p.name + ": needs at least two families");
    }
    if (seeds == 0 || teacher_repeats < 2) throw std::invalid_argument("repeat counts too small");
    if (!student_init.empty() && !poc(student_init))
      throw std::invalid_argument("student_init names unknown backbone '" + student_init + "'");
  }

  const PocRecipe* poc(const std::string& name) const {
    for (const auto& p : pocs)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::vector<std::size_t> student_widths() const {
    if (const auto* p = poc(student_init)) return p->widths;
    return BackboneSpec{}.widths;
  }
};

// Reference full-scale hyper-parameters: rate 3e-5, distiller batch 512,
// student batch 16, divided by 10 every 3 epochs.
inline ExperimentConfig full_scale_preset() {
  ExperimentConfig c;
  c.distiller_schedule = Schedule{12, 512, 3e-5, 0.1, 3};
  c.student_schedule = Schedule{12, 16, 3e-5, 0.1, 3};
  c.poc_schedule = Schedule{12, 16, 3e-5, 0.1, 3};
  return c;
}

inline void to_json(nlohmann::json& j, const Schedule& s) {
  j = {{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"rate", s.rate},
       {"decay", s.decay}, {"decay_interval", s.decay_interval}};
}
inline void from_json(const nlohmann::json& j, Schedule& s) {
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.rate = j.value("rate", s.rate);
  s.decay = j.value("decay", s.decay);
  s.decay_interval = j.value("decay_interval", s.decay_interval);
  if (s.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(s.rate > 0.0)) throw std::invalid_argument("rate must be positive");
}

inline void to_json(nlohmann::json& j, const PocRecipe& p) {
  std::vector<std::string> fams;
  for (auto f : p.families) fams.emplace_back(family_name(f));
  j = {{"name", p.name}, {"widths", p.widths}, {"families", fams},
       {"noise_scale", p.noise_scale}, {"count", p.count}};
}
inline void from_json(const nlohmann::json& j, PocRecipe& p) {
  p.name = j.at("name").get<std::string>();
  p.widths = j.at("widths").get<std::vector<std::size_t>>();
  p.families.clear();
  for (const auto& f : j.at("families")) p.families.push_back(parse_family(f.get<std::string>()));
  p.noise_scale = j.value("noise_scale", 1.0);
  p.count = j.value("count", std::size_t{1200});
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> fams;
  for (auto f : c.corpus.families) fams.emplace_back(family_name(f));
  j = {{"corpus",
        {{"count", c.corpus.count}, {"resolution", c.corpus.resolution},
         {"small_resolution", c.corpus.small_resolution},
         {"min_mask_fraction", c.corpus.min_mask_fraction},
         {"max_mask_fraction", c.corpus.max_mask_fraction},
         {"ideal_mask_fraction", c.corpus.ideal_mask_fraction},
         {"max_distractors", c.corpus.max_distractors}, {"sigma", c.corpus.sigma},
         {"levels", c.corpus.levels}, {"noise", c.corpus.noise},
         {"focus_blur", c.corpus.focus_blur}, {"max_mean_error", c.corpus.max_mean_error},
         {"families", fams}, {"seed", c.corpus_seed}}},
       {"split", {{"test_size", c.test_size}, {"folds", c.folds}}},
       {"pocs", c.pocs},
       {"poc_resolution", c.poc_resolution},
       {"poc_schedule", c.poc_schedule},
       {"distiller", {{"hidden", c.distiller_hidden}, {"feature_width", c.feature_width},
                      {"schedule", c.distiller_schedule}}},
       {"student", {{"init", c.student_init}, {"hidden", c.student_hidden},
                    {"schedule", c.student_schedule}}},
       {"repeats", {{"seeds", c.seeds}, {"teacher", c.teacher_repeats},
                    {"full_resolution", c.full_res_seeds}}}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (j.contains("preset")) {
    const auto name = j["preset"].get<std::string>();
    if (name == "full-scale") c = full_scale_preset();
    else if (name != "desk") throw std::invalid_argument("unknown preset '" + name + "'");
  }
  if (j.contains("corpus")) {
    const auto& k = j["corpus"];
    auto& cc = c.corpus;
    cc.count = k.value("count", cc.count);
    cc.resolution = k.value("resolution", cc.resolution);
    cc.small_resolution = k.value("small_resolution", cc.small_resolution);
    cc.min_mask_fraction = k.value("min_mask_fraction", cc.min_mask_fraction);
    cc.max_mask_fraction = k.value("max_mask_fraction", cc.max_mask_fraction);
    cc.ideal_mask_fraction = k.value("ideal_mask_fraction", cc.ideal_mask_fraction);
    cc.max_distractors = k.value("max_distractors", cc.max_distractors);
    cc.sigma = k.value("sigma", cc.sigma);
    cc.levels = k.value("levels", cc.levels);
    cc.noise = k.value("noise", cc.noise);
    cc.focus_blur = k.value("focus_blur", cc.focus_blur);
    cc.max_mean_error = k.value("max_mean_error", cc.max_mean_error);
    if (k.contains("families")) {
      cc.families.clear();
      for (const auto& f : k["families"]) cc.families.push_back(parse_family(f.get<std::string>()));
    }
    c.corpus_seed = k.value("seed", c.corpus_seed);
  }
  if (j.contains("split")) {
    c.test_size = j["split"].value("test_size", c.test_size);
    c.folds = j["split"].value("folds", c.folds);
  }
  if (j.contains("pocs")) c.pocs = j["pocs"].get<std::vector<PocRecipe>>();
  c.poc_resolution = j.value("poc_resolution", c.poc_resolution);
  if (j.contains("poc_schedule")) from_json(j["poc_schedule"], c.poc_schedule);
  if (j.contains("distiller")) {
    const auto& d = j["distiller"];
    c.distiller_hidden = d.value("hidden", c.distiller_hidden);
    c.feature_width = d.value("feature_width", c.feature_width);
    if (d.contains("schedule")) from_json(d["schedule"], c.distiller_schedule);
  }
  if (j.contains("student")) {
    const auto& s = j["student"];
    c.student_init = s.value("init", c.student_init);
    c.student_hidden = s.value("hidden", c.student_hidden);
    if (s.contains("schedule")) from_json(s["schedule"], c.student_schedule);
  }
  if (j.contains("repeats")) {
    const auto& r = j["repeats"];
    c.seeds = r.value("seeds", c.seeds);
    c.teacher_repeats = r.value("teacher", c.teacher_repeats);
    c.full_res_seeds = r.value("full_resolution", c.full_res_seeds);
  }
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(nlohmann::json(c).dump())));
  return buf;
}

// Pre-trains one backbone of the roster on its own pattern-classification
// corpus, drawn from the corpus generator restricted to the recipe families.
inline PocModel pretrain_recipe(const ExperimentConfig& cfg, const PocRecipe& r) {
  CorpusConfig cc = cfg.corpus;
  cc.families = r.families;
  cc.count = r.count;
  cc.noise = cfg.corpus.noise * r.noise_scale;
  auto pre = generate_samples(cc, mix_seed(cfg.corpus_seed, fnv1a(r.name)));
  auto data = make_class_corpus(pre, cfg.poc_resolution);
  return pretrain_poc(r.name, BackboneSpec{r.widths, 3, cfg.poc_resolution}, data, cfg.poc_schedule,
                      mix_seed(cfg.corpus_seed, 0xB0 + fnv1a(r.name)));
}

// Test images rated pleasant (score above 6.5) whose subject covers the
// configured mask-fraction band.
inline std::vector<std::uint64_t> pleasant_subset(const std::vector<SynthSample>& samples,
                                                  std::span<const std::uint64_t> test,
                                                  const CorpusConfig& cc) {
  std::map<std::uint64_t, const SynthSample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<std::uint64_t> ids;
  for (auto id : test) {
    const auto& s = *by_id.at(id);
    if (s.score > 6.5 && s.mask_fraction >= cc.min_mask_fraction && s.mask_fraction <= cc.max_mask_fraction)
      ids.push_back(id);
  }
  return ids;
}

// ---------------------------------------------------------------------------

struct EvalScores {
  double srcc = 0.0, plcc = 0.0, acc = 0.0;
};

// Probability heads are judged by p >= 0.5 against GT class; SRCC/PLCC use
// the raw prediction.
inline EvalScores score_predictions(HeadKind head, std::span<const double> pred,
                                    std::span<const double> gt) {
  EvalScores e;
  e.srcc = srcc(pred, gt);
  e.plcc = plcc(pred, gt);
  if (head == HeadKind::probability) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      hit += (pred[i] >= 0.5) == (binarize(gt[i]) == AestheticClass::high);
    e.acc = static_cast<double>(hit) / static_cast<double>(pred.size());
  } else {
    e.acc = accuracy(pred, gt);
  }
  return e;
}

struct TeacherRun {
  Distiller distiller;
  KnowledgeCache cache;  // every sample of the corpus
  EvalScores test;
};

// One cell of a student table.
struct StudentCell {
  TrainingMode mode = TrainingMode::baseline;
  bool frozen = false;
  bool full_resolution = false;
  double output_weight = 1.0, feature_weight = 1.0, gt_weight = 0.0;

  auto key() const {
    return std::tuple{static_cast<int>(mode), frozen, full_resolution, output_weight,
                      feature_weight, gt_weight};
  }
  std::string label() const {
    std::string s(to_string(mode));
    if (mode == TrainingMode::kd && (output_weight != 1.0 || feature_weight != 1.0 || gt_weight != 0.0))
      s += feature_weight == 0.0 ? "/output-only" : output_weight == 0.0 ? "/feature-only" : "/weighted";
    if (frozen) s += "/frozen";
    if (full_resolution) s += "/full-res";
    return s;
  }
};

struct StudentRun {
  StudentCell cell;
  std::uint64_t seed = 0;
  EvalScores test;
  std::vector<double> predictions;
  std::shared_ptr<Student> model;
  double seconds = 0.0;
};

// Trains a distiller on the train ids, exports knowledge for every row of
// the bank and scores the test ids. Touches no shared state.
inline TeacherRun train_teacher_run(const ExperimentConfig& cfg, const std::vector<SynthSample>& samples,
                                    HeadKind head, const FeatureBank& g,
                                    std::span<const std::uint64_t> train,
                                    std::span<const std::uint64_t> test, std::uint64_t seed) {
  DistillerSpec ds{g.dim, cfg.distiller_hidden, cfg.feature_width, cfg.corpus.levels, head};
  TeacherRun run;
  run.distiller = train_distiller(ds, g.select(train), make_targets(samples, train, head),
                                  cfg.distiller_schedule, seed);
  run.cache = distill_knowledge(run.distiller, g);
  std::map<std::uint64_t, double> score;
  for (const auto& s : samples) score[s.id] = s.score;
  std::vector<double> gt;
  for (auto id : test) gt.push_back(score.at(id));
  const auto tc = select_knowledge(run.cache, test);
  run.test = score_predictions(head, cache_scores(tc, head, cfg.corpus.levels), gt);
  run.distiller.validation_srcc = run.test.srcc;
  return run;
}

using Logger = std::function<void(const std::string&)>;

// Lazily built, memoised pipeline over one corpus and its fixed split.
class Lab {
 public:
  explicit Lab(ExperimentConfig cfg, Logger log = {}) : cfg_(std::move(cfg)), log_(std::move(log)) {
    cfg_.validate();
    samples_ = generate_samples(cfg_.corpus, cfg_.corpus_seed);
    std::vector<std::uint64_t> ids;
    for (const auto& s : samples_) {
      ids.push_back(s.id);
      by_id_[s.id] = &s;
    }
    auto folds = make_splits(ids, {SplitSpec::Scheme::fixed, 1, cfg_.test_size, cfg_.corpus_seed});
    train_ = folds.front().train;
    test_ = folds.front().test;
    note("corpus: " + std::to_string(samples_.size()) + " samples, " + std::to_string(train_.size()) +
         " train / " + std::to_string(test_.size()) + " test");
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const std::vector<SynthSample>& samples() const noexcept { return samples_; }
  const std::vector<std::uint64_t>& train_ids() const noexcept { return train_; }
  const std::vector<std::uint64_t>& test_ids() const noexcept { return test_; }
  const SynthSample& sample(std::uint64_t id) const { return *by_id_.at(id); }

  std::vector<double> gt_scores(std::span<const std::uint64_t> ids) const {
    std::vector<double> out;
    for (auto id : ids) out.push_back(sample(id).score);
    return out;
  }

  PocModel& poc(const std::string& name) {
    if (auto it = pocs_.find(name); it != pocs_.end()) return it->second;
    const auto* r = cfg_.poc(name);
    if (!r) throw std::invalid_argument("unknown pattern backbone '" + name + "'");
    const auto t0 = clock();
    auto m = pretrain_recipe(cfg_, *r);
    note("pattern backbone " + r->name + ": " + std::to_string(m.classes) +
         " classes, train accuracy " + fmt(m.train_accuracy) + " (" + fmt(clock() - t0, 1) + " s)");
    return pocs_.emplace(name, std::move(m)).first->second;
  }

  const ImageSet& images(bool full) {
    auto& slot = full ? full_images_ : small_images_;
    if (!slot) {
      const auto res = full ? cfg_.corpus.resolution : cfg_.corpus.small_resolution;
      slot = make_image_set(samples_, res);
    }
    return *slot;
  }

  // Pooled features of every sample at full resolution; "combined" stacks
  // all backbones in roster order.
  const FeatureBank& gsf(const std::string& name) {
    if (auto it = gsf_.find(name); it != gsf_.end()) return it->second;
    if (name == "combined") {
      std::vector<FeatureBank> parts;
      for (const auto& r : cfg_.pocs) parts.push_back(gsf(r.name));
      return gsf_.emplace(name, combine_gsf(parts)).first->second;
    }
    auto& m = poc(name);
    return gsf_.emplace(name, extract_gsf_bank(m.backbone, m.params, images(true))).first->second;
  }

  TeacherRun& teacher(HeadKind head, std::uint64_t seed, const std::string& bank = "combined") {
    const auto key = std::tuple{static_cast<int>(head), seed, bank};
    if (auto it = teachers_.find(key); it != teachers_.end()) return it->second;
    const auto& g = gsf(bank);
    auto run = train_teacher(head, g, train_, test_, seed);
    note("teacher " + bank + "/" + head_name(head) + " seed " + std::to_string(seed) + ": test srcc " +
         fmt(run.test.srcc) + " acc " + fmt(run.test.acc));
    return teachers_.emplace(key, std::move(run)).first->second;
  }

  TeacherRun train_teacher(HeadKind head, const FeatureBank& g, std::span<const std::uint64_t> train,
                           std::span<const std::uint64_t> test, std::uint64_t seed) const {
    return train_teacher_run(cfg_, samples_, head, g, train, test, seed);
  }

  // Teacher used to supervise students of the given head.
  TeacherRun& reference_teacher(HeadKind head) { return teacher(head, teacher_seed()); }
  std::uint64_t teacher_seed() const { return mix_seed(cfg_.corpus_seed, 0x7EAC); }

  std::uint64_t student_seed(std::size_t repeat) const {
    return mix_seed(cfg_.corpus_seed, 0x5EED + repeat);
  }

  StudentRun& student(const StudentCell& cell, std::size_t repeat) {
    const auto key = std::tuple{cell.key(), repeat};
    if (auto it = students_.find(key); it != students_.end()) return it->second;
    const auto t0 = clock();
    const std::uint64_t seed = student_seed(repeat);
    const HeadKind head = mode_head(cell.mode);
    StudentSpec sp;
    sp.backbone = BackboneSpec{cfg_.student_widths(), 3,
                               cell.full_resolution ? cfg_.corpus.resolution : cfg_.corpus.small_resolution};
    sp.hidden = cfg_.student_hidden;
    sp.feature_width = cfg_.feature_width;
    sp.levels = cfg_.corpus.levels;
    sp.mode = cell.mode;
    sp.frozen_backbone = cell.frozen;
    auto model = std::make_shared<Student>(make_student(sp, seed));
    if (!cfg_.student_init.empty()) load_backbone(*model, poc(cfg_.student_init));

    const ImageSet& all = images(cell.full_resolution);
    StudentData data = student_data(all, train_, cell.mode);
    StudentTraining tr;
    tr.schedule = cfg_.student_schedule;
    tr.kd_weights = LossSpec{LossKind::kd, cell.output_weight, cell.feature_weight, cell.gt_weight};
    const KnowledgeCache* cache = mode_uses_cache(cell.mode) ? &reference_teacher(head).cache : nullptr;
    train_student(*model, data, cache, tr, seed);

    StudentRun run;
    run.cell = cell;
    run.seed = seed;
    const auto test_images = subset(all, test_);
    std::optional<TargetTable> sem;
    if (mode_semantic_input(cell.mode)) sem = semantic_table(test_);
    auto pred = predict_student(*model, test_images, sem);
    run.predictions = pred.scores;
    run.test = score_predictions(head, pred.scores, gt_scores(test_));
    run.model = std::move(model);
    run.seconds = clock() - t0;
    note("student " + cell.label() + " #" + std::to_string(repeat) + ": srcc " + fmt(run.test.srcc) +
         " acc " + fmt(run.test.acc) + " (" + fmt(run.seconds, 1) + " s)");
    return students_.emplace(key, std::move(run)).first->second;
  }

  // Mean of a test metric over the configured number of repeats.
  double mean_metric(const StudentCell& cell, double EvalScores::*metric, std::size_t repeats = 0) {
    if (repeats == 0) repeats = cfg_.seeds;
    double s = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) s += student(cell, r).test.*metric;
    return s / static_cast<double>(repeats);
  }

  ImageSet subset(const ImageSet& all, std::span<const std::uint64_t> ids) const {
    std::map<std::uint64_t, std::size_t> row;
    for (std::size_t i = 0; i < all.size(); ++i) row[all.ids[i]] = i;
    ImageSet out;
    out.channels = all.channels;
    out.resolution = all.resolution;
    for (auto id : ids) {
      const auto r = row.at(id);
      out.ids.push_back(id);
      out.pixels.insert(out.pixels.end(), all.pixels.begin() + static_cast<std::ptrdiff_t>(r * all.stride()),
                        all.pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * all.stride()));
    }
    return out;
  }

  TargetTable semantic_table(std::span<const std::uint64_t> ids) const {
    TargetTable t;
    t.ids.assign(ids.begin(), ids.end());
    t.width = kSemanticWidth;
    for (auto id : ids) {
      auto v = semantic_label(sample(id));
      t.values.insert(t.values.end(), v.begin(), v.end());
    }
    return t;
  }

  StudentData student_data(const ImageSet& all, std::span<const std::uint64_t> ids, TrainingMode mode) const {
    StudentData d;
    d.images = subset(all, ids);
    d.targets = make_targets(samples_, ids, mode_head(mode));
    d.gt_distribution = make_targets(samples_, ids, HeadKind::distribution);
    d.semantic = semantic_table(ids);
    return d;
  }

  void note(const std::string& msg) const {
    if (log_) log_(msg);
  }

  static std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
  }

  static std::string head_name(HeadKind h) {
    switch (h) {
      case HeadKind::distribution: return "distribution";
      case HeadKind::probability: return "binary";
      case HeadKind::score: return "regression";
    }
    return "?";
  }

  static double clock() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
  }

 private:
  ExperimentConfig cfg_;
  Logger log_;
  std::vector<SynthSample> samples_;
  std::map<std::uint64_t, const SynthSample*> by_id_;
  std::vector<std::uint64_t> train_, test_;
  std::map<std::string, PocModel> pocs_;
  std::map<std::string, FeatureBank> gsf_;
  std::optional<ImageSet> full_images_, small_images_;
  std::map<std::tuple<int, std::uint64_t, std::string>, TeacherRun> teachers_;
  std::map<std::tuple<decltype(StudentCell{}.key()), std::size_t>, StudentRun> students_;
};

}  // namespace aeskd
