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

// aeskd: config-driven experiment runner.
//
// Every stage reads its inputs from and writes its artifacts under --out:
//
//   corpus/             gen-corpus
//   poc/<name>.ckpt     pretrain-poc
//   gsf/<name>.gsf      extract-gsf
//   distiller/<head>.*  train-distiller
//   knowledge/<head>.tk export-knowledge
//   students/<name>.*   train-student
//   reports/*.json      evaluate, match-eval, miou-eval, variance-study, cost,
//                       reproduce-tables

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "aeskd/aeskd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace aeskd;

namespace {

// Exit codes double as the error category.
enum class Failure { usage = 2, config = 3, missing_prerequisite = 4, format = 5, runtime = 6 };

const char* category_name(Failure f) {
  switch (f) {
    case Failure::usage: return "usage";
    case Failure::config: return "config";
    case Failure::missing_prerequisite: return "missing_prerequisite";
    case Failure::format: return "format";
    case Failure::runtime: return "runtime";
  }
  return "runtime";
}

struct CommandError : std::runtime_error {
  Failure kind;
  CommandError(Failure k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

[[noreturn]] void missing(const fs::path& path, const std::string& producer) {
  throw CommandError(Failure::missing_prerequisite,
                     "missing " + path.string() + "; run `aeskd " + producer + "` first");
}

HeadKind parse_head(const std::string& s) {
  if (s == "distribution") return HeadKind::distribution;
  if (s == "binary") return HeadKind::probability;
  if (s == "regression") return HeadKind::score;
  throw CommandError(Failure::usage, "unknown head '" + s + "' (distribution|binary|regression)");
}

std::string slug(std::string s) {
  std::replace(s.begin(), s.end(), '/', '-');
  return s;
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  write_file(path, j.dump(2) + "\n");
}

json read_json(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) missing(path, producer);
  return json::parse(read_file(path));
}

struct Options {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  fs::path out = "aeskd-out";
  bool quiet = false;
};

class Workspace {
 public:
  explicit Workspace(const Options& o) : out_(o.out), quiet_(o.quiet), seed_(o.seed) {
    json j = json::object();
    if (!o.config_path.empty()) {
      if (!fs::exists(o.config_path))
        throw CommandError(Failure::config, "config file " + o.config_path + " does not exist");
      try {
        j = json::parse(read_file(o.config_path));
      } catch (const json::exception& e) {
        throw CommandError(Failure::config, o.config_path + ": " + e.what());
      }
    }
    if (!o.preset.empty()) j["preset"] = o.preset;
    try {
      j.get_to(cfg_);
      cfg_.validate();
    } catch (const std::invalid_argument& e) {
      throw CommandError(Failure::config, e.what());
    } catch (const json::exception& e) {
      throw CommandError(Failure::config, e.what());
    }
    hash_ = config_hash(cfg_);
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  fs::path path(const fs::path& rel) const { return out_ / rel; }
  std::uint64_t seed_or(std::uint64_t fallback) const { return seed_.value_or(fallback); }

  void log(const std::string& msg) const {
    if (!quiet_) std::cerr << msg << "\n";
  }

  const std::vector<SynthSample>& samples() {
    if (!samples_) {
      const auto dir = path("corpus");
      if (!fs::exists(dir / "manifest.jsonl")) missing(dir / "manifest.jsonl", "gen-corpus");
      const auto meta = read_json(dir / "corpus.json", "gen-corpus");
      if (meta.value("config_hash", "") != corpus_hash())
        throw CommandError(Failure::missing_prerequisite,
                           "corpus under " + dir.string() +
                               " was generated from a different corpus config; rerun `aeskd gen-corpus`");
      samples_ = read_corpus(dir);
      for (const auto& s : *samples_) ids_.push_back(s.id);
      auto folds = make_splits(ids_, {SplitSpec::Scheme::fixed, 1, cfg_.test_size, cfg_.corpus_seed});
      train_ = folds.front().train;
      test_ = folds.front().test;
    }
    return *samples_;
  }
  const std::vector<std::uint64_t>& all_ids() { return samples(), ids_; }
  const std::vector<std::uint64_t>& train_ids() { return samples(), train_; }
  const std::vector<std::uint64_t>& test_ids() { return samples(), test_; }

  std::vector<double> gt_scores(std::span<const std::uint64_t> ids) {
    std::map<std::uint64_t, double> by;
    for (const auto& s : samples()) by[s.id] = s.score;
    std::vector<double> out;
    for (auto id : ids) out.push_back(by.at(id));
    return out;
  }

  std::vector<std::string> categories(std::span<const std::uint64_t> ids) {
    std::map<std::uint64_t, std::string> by;
    for (const auto& s : samples()) by[s.id] = std::string(family_name(s.category()));
    std::vector<std::string> out;
    for (auto id : ids) out.push_back(by.at(id));
    return out;
  }

  std::string corpus_hash() const {
    json c = json(cfg_)["corpus"];
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(c.dump())));
    return buf;
  }

  const PocRecipe& recipe(const std::string& name) const {
    const auto* r = cfg_.poc(name);
    if (!r) throw CommandError(Failure::usage, "no backbone named '" + name + "' in the roster");
    return *r;
  }

  PocModel load_poc(const std::string& name) {
    const auto& r = recipe(name);
    const auto ckpt = path("poc/" + name + ".ckpt");
    if (!fs::exists(ckpt)) missing(ckpt, "pretrain-poc --name " + name);
    const auto meta = read_json(path("poc/" + name + ".json"), "pretrain-poc --name " + name);
    auto m = make_poc(name, BackboneSpec{r.widths, 3, cfg_.poc_resolution},
                      meta.at("classes").get<std::size_t>(), 0);
    decode_checkpoint(read_file(ckpt), m.params);
    m.train_accuracy = meta.value("train_accuracy", 0.0);
    return m;
  }

  FeatureBank load_gsf(const std::string& name) {
    const auto p = path("gsf/" + name + ".gsf");
    if (!fs::exists(p)) missing(p, "extract-gsf --name " + name);
    return decode_gsf(read_file(p));
  }

  Distiller load_distiller(HeadKind head) {
    const auto name = Lab::head_name(head);
    const auto ckpt = path("distiller/" + name + ".ckpt");
    if (!fs::exists(ckpt)) missing(ckpt, "train-distiller --head " + name);
    const auto meta = read_json(path("distiller/" + name + ".json"), "train-distiller --head " + name);
    DistillerSpec ds{meta.at("input_width").get<std::size_t>(), cfg_.distiller_hidden, cfg_.feature_width,
                     cfg_.corpus.levels, head};
    auto d = make_distiller(ds, 0);
    decode_checkpoint(read_file(ckpt), d.params);
    d.validation_srcc = meta.value("test_srcc", 0.0);
    return d;
  }

  KnowledgeCache load_knowledge(HeadKind head) {
    const auto name = Lab::head_name(head);
    const auto p = path("knowledge/" + name + ".tk");
    if (!fs::exists(p)) missing(p, "export-knowledge --head " + name);
    return read_cache(p);
  }

  const ImageSet& images(bool full) {
    auto& slot = full ? full_ : small_;
    if (!slot) slot = make_image_set(samples(), full ? cfg_.corpus.resolution : cfg_.corpus.small_resolution);
    return *slot;
  }

  TargetTable semantic_table(std::span<const std::uint64_t> ids) {
    std::map<std::uint64_t, const SynthSample*> by;
    for (const auto& s : samples()) by[s.id] = &s;
    TargetTable t;
    t.ids.assign(ids.begin(), ids.end());
    t.width = kSemanticWidth;
    for (auto id : ids) {
      auto v = semantic_label(*by.at(id));
      t.values.insert(t.values.end(), v.begin(), v.end());
    }
    return t;
  }

  void report(const std::string& name, const json& j) {
    const auto errs = validate_report(j);
    if (!errs.empty()) throw CommandError(Failure::runtime, "report " + name + " is malformed: " + errs.front());
    write_json(path("reports/" + name + ".json"), j);
    log("wrote " + path("reports/" + name + ".json").string());
  }

 private:
  fs::path out_;
  bool quiet_;
  std::optional<std::uint64_t> seed_;
  ExperimentConfig cfg_;
  std::string hash_;
  std::optional<std::vector<SynthSample>> samples_;
  std::vector<std::uint64_t> ids_, train_, test_;
  std::optional<ImageSet> full_, small_;
};

// --- stages ----------------------------------------------------------------

void gen_corpus(Workspace& ws) {
  const auto& cfg = ws.cfg();
  auto samples = generate_samples(cfg.corpus, cfg.corpus_seed);
  std::vector<std::uint64_t> ids;
  for (const auto& s : samples) ids.push_back(s.id);
  tag_splits(samples, make_splits(ids, {SplitSpec::Scheme::fixed, 1, cfg.test_size, cfg.corpus_seed}));
  const auto dir = ws.path("corpus");
  if (fs::exists(dir)) fs::remove_all(dir);
  write_corpus(dir, samples);
  write_json(dir / "corpus.json",
             {{"config_hash", ws.corpus_hash()}, {"seed", cfg.corpus_seed}, {"count", samples.size()}});
  ws.log("wrote " + std::to_string(samples.size()) + " samples to " + dir.string());
}

void pretrain(Workspace& ws, const std::string& name) {
  const auto& r = ws.recipe(name);
  auto m = pretrain_recipe(ws.cfg(), r);
  fs::create_directories(ws.path("poc"));
  write_file(ws.path("poc/" + name + ".ckpt"), encode_checkpoint(m.params));
  write_json(ws.path("poc/" + name + ".json"),
             {{"name", name}, {"widths", r.widths}, {"classes", m.classes},
              {"resolution", ws.cfg().poc_resolution}, {"train_accuracy", m.train_accuracy},
              {"config_hash", ws.hash()}});
  ws.log("backbone " + name + ": " + std::to_string(m.classes) + " classes, train accuracy " +
         Lab::fmt(m.train_accuracy));
}

void extract(Workspace& ws, const std::string& name) {
  FeatureBank bank;
  if (name == "combined") {
    std::vector<FeatureBank> parts;
    for (const auto& r : ws.cfg().pocs) parts.push_back(ws.load_gsf(r.name));
    bank = combine_gsf(parts);
  } else {
    auto m = ws.load_poc(name);
    bank = extract_gsf_bank(m.backbone, m.params, ws.images(true));
  }
  fs::create_directories(ws.path("gsf"));
  write_file(ws.path("gsf/" + name + ".gsf"), encode_gsf(bank));
  ws.log("features " + name + ": " + std::to_string(bank.size()) + " x " + std::to_string(bank.dim));
}

void train_distiller_cmd(Workspace& ws, HeadKind head, const std::string& bank_name) {
  const auto bank = ws.load_gsf(bank_name);
  const auto seed = ws.seed_or(mix_seed(ws.cfg().corpus_seed, 0x7EAC));
  auto run = train_teacher_run(ws.cfg(), ws.samples(), head, bank, ws.train_ids(), ws.test_ids(), seed);
  const auto name = Lab::head_name(head);
  fs::create_directories(ws.path("distiller"));
  write_file(ws.path("distiller/" + name + ".ckpt"), encode_checkpoint(run.distiller.params));
  write_json(ws.path("distiller/" + name + ".json"),
             {{"head", name}, {"bank", bank_name}, {"input_width", bank.dim}, {"seed", seed},
              {"test_srcc", run.test.srcc}, {"config_hash", ws.hash()}});
  std::vector<MetricRecord> recs{{"srcc", run.test.srcc, ws.test_ids().size(), "teacher", "fixed", {}},
                                 {"plcc", run.test.plcc, ws.test_ids().size(), "teacher", "fixed", {}},
                                 {"acc", run.test.acc, ws.test_ids().size(), "teacher", "fixed", {}}};
  ws.report("distiller-" + name, make_report(recs, ws.hash(), {ws.cfg().corpus_seed, seed}));
  ws.log("distiller " + name + ": test srcc " + Lab::fmt(run.test.srcc) + " acc " + Lab::fmt(run.test.acc));
}

void export_knowledge(Workspace& ws, HeadKind head) {
  auto d = ws.load_distiller(head);
  const auto meta = read_json(ws.path("distiller/" + Lab::head_name(head) + ".json"), "train-distiller");
  const auto bank = ws.load_gsf(meta.value("bank", std::string("combined")));
  const auto cache = distill_knowledge(d, bank);
  fs::create_directories(ws.path("knowledge"));
  write_cache(ws.path("knowledge/" + Lab::head_name(head) + ".tk"), cache);
  ws.log("knowledge " + Lab::head_name(head) + ": " + std::to_string(cache.size()) + " records");
}

struct StudentArgs {
  std::string mode = "baseline";
  bool frozen = false, full_res = false;
  double output_weight = 1.0, feature_weight = 1.0, gt_weight = 0.0;
  std::optional<std::size_t> epochs;
  std::string name;
};

StudentCell student_cell(const StudentArgs& a) {
  StudentCell c;
  try {
    c.mode = parse_training_mode(a.mode);
  } catch (const std::invalid_argument& e) {
    throw CommandError(Failure::usage, e.what());
  }
  c.frozen = a.frozen;
  c.full_resolution = a.full_res;
  c.output_weight = a.output_weight;
  c.feature_weight = a.feature_weight;
  c.gt_weight = a.gt_weight;
  return c;
}

StudentSpec student_spec(const ExperimentConfig& cfg, const StudentCell& c) {
  StudentSpec sp;
  sp.backbone = BackboneSpec{cfg.student_widths(), 3,
                             c.full_resolution ? cfg.corpus.resolution : cfg.corpus.small_resolution};
  sp.hidden = cfg.student_hidden;
  sp.feature_width = cfg.feature_width;
  sp.levels = cfg.corpus.levels;
  sp.mode = c.mode;
  sp.frozen_backbone = c.frozen;
  return sp;
}

void train_student_cmd(Workspace& ws, const StudentArgs& a) {
  const auto& cfg = ws.cfg();
  const auto c = student_cell(a);
  const auto seed = ws.seed_or(mix_seed(cfg.corpus_seed, 0x5EED));
  const auto name = a.name.empty() ? slug(c.label()) + "-s" + std::to_string(seed) : a.name;
  Student s = make_student(student_spec(cfg, c), seed);
  if (!cfg.student_init.empty()) load_backbone(s, ws.load_poc(cfg.student_init));
  std::optional<KnowledgeCache> cache;
  if (mode_uses_cache(c.mode)) cache = ws.load_knowledge(mode_head(c.mode));
  const auto& all = ws.images(c.full_resolution);
  StudentData data;
  data.images = make_image_set(ws.samples(), all.resolution, ws.train_ids());
  data.targets = make_targets(ws.samples(), ws.train_ids(), mode_head(c.mode));
  data.gt_distribution = make_targets(ws.samples(), ws.train_ids(), HeadKind::distribution);
  data.semantic = ws.semantic_table(ws.train_ids());
  StudentTraining tr;
  tr.schedule = cfg.student_schedule;
  if (a.epochs) tr.schedule.epochs = *a.epochs;
  tr.kd_weights = LossSpec{LossKind::kd, c.output_weight, c.feature_weight, c.gt_weight};
  const auto hist = train_student(s, data, cache ? &*cache : nullptr, tr, seed);
  fs::create_directories(ws.path("students"));
  write_file(ws.path("students/" + name + ".ckpt"), encode_checkpoint(s.params));
  write_json(ws.path("students/" + name + ".json"),
             {{"name", name}, {"mode", std::string(to_string(c.mode))}, {"frozen", c.frozen},
              {"full_resolution", c.full_resolution}, {"output_weight", c.output_weight},
              {"feature_weight", c.feature_weight}, {"gt_weight", c.gt_weight}, {"seed", seed},
              {"epochs", tr.schedule.epochs}, {"epoch_loss", hist.epoch_loss},
              {"rejected_steps", hist.rejected_steps}, {"config_hash", ws.hash()}});
  ws.log("student " + name + ": " + std::to_string(hist.epoch_loss.size()) + " epochs" +
         (hist.epoch_loss.empty() ? "" : ", final loss " + Lab::fmt(hist.epoch_loss.back())));
}

struct LoadedStudent {
  Student model;
  StudentCell cell;
  std::uint64_t seed = 0;
};

LoadedStudent load_student(Workspace& ws, const std::string& name) {
  if (name.empty()) throw CommandError(Failure::usage, "--student is required");
  const auto ckpt = ws.path("students/" + name + ".ckpt");
  if (!fs::exists(ckpt)) missing(ckpt, "train-student");
  const auto meta = read_json(ws.path("students/" + name + ".json"), "train-student");
  StudentArgs a;
  a.mode = meta.at("mode").get<std::string>();
  a.frozen = meta.at("frozen").get<bool>();
  a.full_res = meta.at("full_resolution").get<bool>();
  a.output_weight = meta.at("output_weight").get<double>();
  a.feature_weight = meta.at("feature_weight").get<double>();
  a.gt_weight = meta.at("gt_weight").get<double>();
  const auto c = student_cell(a);
  LoadedStudent out{make_student(student_spec(ws.cfg(), c), 0), c, meta.at("seed").get<std::uint64_t>()};
  decode_checkpoint(read_file(ckpt), out.model.params);
  return out;
}

void evaluate(Workspace& ws, const std::string& name) {
  auto st = load_student(ws, name);
  const auto& test = ws.test_ids();
  const auto images = make_image_set(ws.samples(), st.model.spec.backbone.resolution, test);
  std::optional<TargetTable> sem;
  if (mode_semantic_input(st.cell.mode)) sem = ws.semantic_table(test);
  const auto pred = predict_student(st.model, images, sem);
  const auto gt = ws.gt_scores(test);
  const auto head = mode_head(st.cell.mode);
  auto rep = metric_report(pred.scores, gt, ws.categories(test));
  if (head == HeadKind::probability) rep.acc = score_predictions(head, pred.scores, gt).acc;
  ws.report("evaluate-" + name, make_report(records_from(rep, "test"), ws.hash(), {ws.cfg().corpus_seed, st.seed}));
  std::cout << "srcc " << Lab::fmt(rep.srcc) << "  plcc " << Lab::fmt(rep.plcc) << "  acc "
            << Lab::fmt(rep.acc) << "  n " << rep.n << "\n";
}

void match(Workspace& ws, HeadKind head) {
  const auto& train = ws.train_ids();
  const auto& test = ws.test_ids();
  const auto bank_scores = ws.gt_scores(train);
  const auto gt = ws.gt_scores(test);
  const auto cats = ws.categories(test);
  const auto g = ws.load_gsf("combined");
  const auto cache = ws.load_knowledge(head);
  FeatureBank ft;
  ft.dim = cache.feature_dim;
  ft.ids = cache.ids;
  ft.values = cache.features;
  const auto raw = metric_report(match_eval(g.select(test), g.select(train), bank_scores).predictions, gt, cats);
  const auto aes = metric_report(match_eval(ft.select(test), ft.select(train), bank_scores).predictions, gt, cats);
  auto recs = records_from(raw, "generic");
  for (auto& r : records_from(aes, "aesthetic")) recs.push_back(r);
  ws.report("match-eval", make_report(recs, ws.hash(), {ws.cfg().corpus_seed}));
  std::cout << "generic srcc " << Lab::fmt(raw.srcc) << "  aesthetic srcc " << Lab::fmt(aes.srcc) << "\n";
}

void miou(Workspace& ws, const std::string& name, double percentile) {
  auto st = load_student(ws, name);
  const auto& cc = ws.cfg().corpus;
  const auto ids = pleasant_subset(ws.samples(), ws.test_ids(), cc);
  if (ids.empty()) throw CommandError(Failure::runtime, "no pleasant test images in the corpus");
  const std::size_t R = cc.resolution;
  std::map<std::uint64_t, const SynthSample*> by;
  for (const auto& s : ws.samples()) by[s.id] = &s;
  Tensor<float> masks(Shape{ids.size(), R, R});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(by.at(ids[i])->mask.data().begin(), by.at(ids[i])->mask.data().end(), masks.ptr() + i * R * R);
  const auto images = make_image_set(ws.samples(), st.model.spec.backbone.resolution, ids);
  std::vector<std::size_t> rows(ids.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const auto maps = activation_map(st.model.backbone, st.model.params, images.batch(rows), R);
  const auto rep = miou_eval(maps, masks, percentile);
  std::vector<MetricRecord> recs{{"miou", rep.miou, rep.pairs, name, "pleasant", {}}};
  for (const auto& [p, v] : rep.curve)
    recs.push_back({"miou@" + Lab::fmt(p, 0), v, rep.pairs, name, "pleasant", {}});
  ws.report("miou-" + name, make_report(recs, ws.hash(), {ws.cfg().corpus_seed, st.seed}));
  write_file(ws.path("reports/miou-" + name + ".csv"), curve_csv(rep.curve));
  std::cout << "miou@" << Lab::fmt(percentile, 0) << " " << Lab::fmt(rep.miou) << " over " << rep.pairs
            << " images (" << rep.skipped << " skipped)\n";
}

// Same-split repeats and cross-validation folds are independent; they run on
// a small worker pool.
void variance(Workspace& ws, std::size_t jobs) {
  const auto& cfg = ws.cfg();
  const auto g = ws.load_gsf("combined");
  const auto& samples = ws.samples();
  const auto teacher_seed = ws.seed_or(mix_seed(cfg.corpus_seed, 0x7EAC));
  const auto folds =
      make_splits(ws.all_ids(), {SplitSpec::Scheme::cross_validation, cfg.folds, 0, cfg.corpus_seed});
  struct Task {
    std::span<const std::uint64_t> train, test;
    std::uint64_t seed;
    double srcc = 0.0;
  };
  std::vector<Task> tasks;
  for (std::size_t r = 0; r < cfg.teacher_repeats; ++r)
    tasks.push_back({ws.train_ids(), ws.test_ids(), mix_seed(teacher_seed, r + 1)});
  for (const auto& f : folds) tasks.push_back({f.train, f.test, teacher_seed});

  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < tasks.size();) {
      try {
        auto& t = tasks[i];
        t.srcc = train_teacher_run(cfg, samples, HeadKind::distribution, g, t.train, t.test, t.seed).test.srcc;
        std::lock_guard lock(log_mu);
        ws.log("run " + std::to_string(i + 1) + "/" + std::to_string(tasks.size()) + ": srcc " +
               Lab::fmt(t.srcc));
      } catch (...) {
        std::lock_guard lock(log_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  for (std::size_t k = 1; k < std::max<std::size_t>(jobs, 1); ++k) pool.emplace_back(worker);
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);

  std::vector<double> same, cross;
  for (std::size_t i = 0; i < tasks.size(); ++i) (i < cfg.teacher_repeats ? same : cross).push_back(tasks[i].srcc);
  const auto v = variance_decomposition(same, cross);
  std::vector<MetricRecord> recs;
  for (std::size_t i = 0; i < same.size(); ++i)
    recs.push_back({"srcc", same[i], ws.test_ids().size(), "teacher", "fixed", i});
  for (std::size_t i = 0; i < cross.size(); ++i)
    recs.push_back({"srcc", cross[i], folds[i].test.size(), "teacher", "fold" + std::to_string(i), std::nullopt});
  recs.push_back({"delta_training", v.delta_training, same.size(), {}, {}, {}});
  recs.push_back({"delta_exp", v.delta_exp, cross.size(), {}, {}, {}});
  recs.push_back({"delta_split", v.delta_split, cross.size(), {}, {}, {}});
  ws.report("variance-study", make_report(recs, ws.hash(), {cfg.corpus_seed, teacher_seed}));
  std::cout << "delta_training " << Lab::fmt(v.delta_training) << "  delta_exp " << Lab::fmt(v.delta_exp)
            << "  delta_split " << Lab::fmt(v.delta_split) << (v.split_negative ? " (floored)" : "") << "\n";
}

// Per-input multiply-accumulates of every model in the pipeline.
void cost(Workspace& ws) {
  const auto& cfg = ws.cfg();
  const std::size_t R = cfg.corpus.resolution;
  std::vector<std::pair<std::string, CostReport>> extractors;
  std::size_t gsf_width = 0;
  for (const auto& r : cfg.pocs) {
    auto m = make_poc(r.name, BackboneSpec{r.widths, 3, R}, 2, 0);
    gsf_width += m.backbone.spec.pooled_width();
    extractors.emplace_back(r.name, cost_estimate([&](Tape<float>& t, Var<float> x) {
      mlsp_pool(m.backbone.forward(t, m.params, x));
    }, Shape{2, 3, R, R}));
  }
  auto d = make_distiller({gsf_width, cfg.distiller_hidden, cfg.feature_width, cfg.corpus.levels}, 0);
  const auto dc = cost_estimate([&](Tape<float>& t, Var<float> x) { distiller_forward(t, d, x); },
                                Shape{2, gsf_width});
  StudentCell sc;
  auto s = make_student(student_spec(cfg, sc), 0);
  const auto ss = s.spec.backbone.resolution;
  const auto sc_cost = cost_estimate([&](Tape<float>& t, Var<float> x) { student_forward(t, s, x); },
                                     Shape{2, 3, ss, ss});
  const auto pipe = pipeline_cost(extractors, dc, cfg.distiller_schedule.epochs);
  std::vector<MetricRecord> recs;
  for (const auto& [name, c] : extractors) {
    recs.push_back({"macs_inference", c.inference_per_input, 1, "extract:" + name, {}, {}});
    recs.push_back({"macs_training", c.training_per_input, 1, "extract:" + name, {}, {}});
  }
  recs.push_back({"macs_inference", dc.inference_per_input, 1, "distiller", {}, {}});
  recs.push_back({"macs_training", dc.training_per_input, 1, "distiller", {}, {}});
  recs.push_back({"macs_inference", sc_cost.inference_per_input, 1, "student", {}, {}});
  recs.push_back({"macs_training", sc_cost.training_per_input, 1, "student", {}, {}});
  for (const auto& st : pipe.stages) recs.push_back({"macs_pipeline", st.total(), 1, st.name, {}, {}});
  recs.push_back({"macs_pipeline_total", pipe.total(), 1, {}, {}, {}});
  ws.report("cost", make_report(recs, ws.hash(), {}));
  for (const auto& st : pipe.stages) std::cout << st.name << " " << st.total() << "\n";
  std::cout << "pipeline total " << pipe.total() << "  student training "
            << sc_cost.training_per_input * static_cast<double>(cfg.student_schedule.epochs) << "\n";
}

int reproduce(Workspace& ws) {
  Lab lab(ws.cfg(), [&](const std::string& m) { ws.log(m); });
  std::vector<json> verdicts;
  auto suite = tables::run_suite(lab, [&](const CriterionResult& r) {
    std::cout << format_line(r) << std::endl;
    verdicts.push_back({{"criterion", r.id}, {"title", r.title}, {"pass", r.pass}, {"detail", r.detail},
                        {"seconds", r.seconds}});
  });
  ws.report("reproduce-tables", suite.report);
  write_json(ws.path("reports/ledger.json"), {{"config_hash", ws.hash()}, {"criteria", verdicts}});
  write_file(ws.path("reports/attention-curve.csv"), curve_csv(suite.attention.kd.curve));
  const bool all = std::all_of(suite.criteria.begin(), suite.criteria.end(), [](auto& c) { return c.pass; });
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aeskd: distilling aesthetic knowledge into compact image raters"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--config", opt.config_path, "JSON experiment config (missing keys keep defaults)");
  app.add_option("--preset", opt.preset, "desk | full-scale")->check(CLI::IsMember({"desk", "full-scale"}));
  app.add_option("--seed", opt.seed, "run seed for training commands");
  app.add_option("--out", opt.out, "artifact directory")->capture_default_str();
  app.add_flag("--quiet", opt.quiet, "suppress progress on stderr");

  std::string name = "A", head = "distribution", bank = "combined", student;
  double percentile = 70.0;
  std::size_t jobs = 1;
  StudentArgs sa;

  auto* c_corpus = app.add_subcommand("gen-corpus", "render the synthetic corpus");
  auto* c_poc = app.add_subcommand("pretrain-poc", "pre-train one pattern backbone");
  c_poc->add_option("--name", name, "roster entry")->capture_default_str();
  auto* c_gsf = app.add_subcommand("extract-gsf", "pooled features of one backbone, or 'combined'");
  c_gsf->add_option("--name", name, "roster entry or 'combined'")->capture_default_str();
  auto* c_dist = app.add_subcommand("train-distiller", "train the knowledge distiller");
  c_dist->add_option("--head", head, "distribution | binary | regression")->capture_default_str();
  c_dist->add_option("--bank", bank, "feature bank to train on")->capture_default_str();
  auto* c_know = app.add_subcommand("export-knowledge", "write the teacher knowledge cache");
  c_know->add_option("--head", head, "distribution | binary | regression")->capture_default_str();
  auto* c_stu = app.add_subcommand("train-student", "train one student");
  c_stu->add_option("--mode", sa.mode, "training mode")->capture_default_str();
  c_stu->add_flag("--frozen", sa.frozen, "keep the backbone fixed");
  c_stu->add_flag("--full-res", sa.full_res, "train at the full corpus resolution");
  c_stu->add_option("--output-weight", sa.output_weight, "kd output term weight")->capture_default_str();
  c_stu->add_option("--feature-weight", sa.feature_weight, "kd feature term weight")->capture_default_str();
  c_stu->add_option("--gt-weight", sa.gt_weight, "ground-truth term weight")->capture_default_str();
  c_stu->add_option("--epochs", sa.epochs, "override the schedule's epoch count");
  c_stu->add_option("--name", sa.name, "artifact name (default: mode label and seed)");
  auto* c_eval = app.add_subcommand("evaluate", "score a student on the test split");
  c_eval->add_option("--student", student, "student artifact name")->required();
  auto* c_match = app.add_subcommand("match-eval", "nearest-neighbour rating transfer");
  c_match->add_option("--head", head, "knowledge cache to match with")->capture_default_str();
  auto* c_miou = app.add_subcommand("miou-eval", "activation-map mIoU on pleasant test images");
  c_miou->add_option("--student", student, "student artifact name")->required();
  c_miou->add_option("--percentile", percentile, "threshold percentile")->capture_default_str()->check(CLI::Range(0.0, 100.0));
  auto* c_var = app.add_subcommand("variance-study", "repeated and cross-validated teacher runs");
  c_var->add_option("--jobs", jobs, "concurrent runs")->capture_default_str()->check(CLI::PositiveNumber);
  auto* c_cost = app.add_subcommand("cost", "per-input compute of every stage");
  auto* c_tables = app.add_subcommand("reproduce-tables", "run every directional check and print the ledger");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc != 0)
      std::cerr << json{{"error", category_name(Failure::usage)}, {"message", e.what()}}.dump() << "\n";
    return rc == 0 ? 0 : static_cast<int>(Failure::usage);
  }

  try {
    Workspace ws(opt);
    if (*c_corpus) gen_corpus(ws);
    else if (*c_poc) pretrain(ws, name);
    else if (*c_gsf) extract(ws, name);
    else if (*c_dist) train_distiller_cmd(ws, parse_head(head), bank);
    else if (*c_know) export_knowledge(ws, parse_head(head));
    else if (*c_stu) train_student_cmd(ws, sa);
    else if (*c_eval) evaluate(ws, student);
    else if (*c_match) match(ws, parse_head(head));
    else if (*c_miou) miou(ws, student, percentile);
    else if (*c_var) variance(ws, jobs);
    else if (*c_cost) cost(ws);
    else if (*c_tables) return reproduce(ws);
    return 0;
  } catch (const CommandError& e) {
    std::cerr << json{{"error", category_name(e.kind)}, {"message", e.what()}}.dump() << "\n";
    return static_cast<int>(e.kind);
  } catch (const FormatError& e) {
    std::cerr << json{{"error", category_name(Failure::format)}, {"message", e.what()}}.dump() << "\n";
    return static_cast<int>(Failure::format);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", category_name(Failure::runtime)}, {"message", e.what()}}.dump() << "\n";
    return static_cast<int>(Failure::runtime);
  }
}
