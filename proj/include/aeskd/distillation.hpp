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

// Teacher (knowledge distiller over stacked pooled features), its knowledge
// cache, and the single-backbone student with every training mode.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "aeskd/backbones.hpp"
#include "aeskd/losses.hpp"

namespace aeskd {

// What a model's last layer emits.
enum class HeadKind : std::uint8_t {
  distribution,  // softmax over n levels
  probability,   // one sigmoid unit: P(high)
  score,         // one linear unit: score - (n + 1) / 2, in rating levels
};

inline std::size_t head_width(HeadKind h, std::size_t levels) {
  return h == HeadKind::distribution ? levels : 1;
}

inline Var<float> apply_head(HeadKind h, Var<float> logits) {
  switch (h) {
    case HeadKind::distribution: return softmax(logits);
    case HeadKind::probability: return sigmoid(logits);
    case HeadKind::score: return logits;
  }
  throw std::logic_error("unhandled head kind");
}

// Per-sample supervision targets in head units.
inline std::vector<float> head_target(HeadKind h, const RatingDistribution& d) {
  switch (h) {
    case HeadKind::distribution: return d.as_floats();
    case HeadKind::probability:
      return {binarize(mean_score(d)) == AestheticClass::high ? 1.0f : 0.0f};
    case HeadKind::score:
      return {static_cast<float>(mean_score(d) - 0.5 * static_cast<double>(d.levels() + 1))};
  }
  throw std::logic_error("unhandled head kind");
}

// Scalar prediction from one output row: mean score, probability, or the
// regressed score shifted back to the rating scale.
inline double head_score(HeadKind h, std::span<const float> row,
                         std::size_t levels = kDefaultLevels) {
  switch (h) {
    case HeadKind::distribution: {
      double s = 0.0, m = 0.0;
      for (std::size_t k = 0; k < row.size(); ++k) {
        s += static_cast<double>(k + 1) * row[k];
        m += row[k];
      }
      return s / m;
    }
    case HeadKind::probability: return row[0];
    case HeadKind::score: return 0.5 * static_cast<double>(levels + 1) + row[0];
  }
  throw std::logic_error("unhandled head kind");
}

// Targets aligned with sample ids: [N, width].
struct TargetTable {
  std::vector<std::uint64_t> ids;
  std::size_t width = 0;
  std::vector<float> values;

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(values).subspan(i * width, width);
  }
};

inline TargetTable make_targets(const std::vector<SynthSample>& samples,
                                std::span<const std::uint64_t> ids, HeadKind head) {
  std::map<std::uint64_t, const SynthSample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  TargetTable t;
  t.ids.assign(ids.begin(), ids.end());
  for (auto id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw std::invalid_argument("no sample with id " + std::to_string(id));
    auto v = head_target(head, it->second->distribution);
    t.width = v.size();
    t.values.insert(t.values.end(), v.begin(), v.end());
  }
  return t;
}

inline TargetTable make_targets(std::span<const std::uint64_t> ids,
                                const std::vector<RatingDistribution>& labels, HeadKind head) {
  if (ids.size() != labels.size()) throw std::invalid_argument("ids and labels disagree in length");
  TargetTable t;
  t.ids.assign(ids.begin(), ids.end());
  for (const auto& d : labels) {
    auto v = head_target(head, d);
    t.width = v.size();
    t.values.insert(t.values.end(), v.begin(), v.end());
  }
  return t;
}

inline Tensor<float> gather_rows(std::span<const float> values, std::size_t width,
                                 std::span<const std::size_t> rows) {
  Tensor<float> t(Shape{rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(values.data() + rows[i] * width, width, t.ptr() + i * width);
  return t;
}

// Loss on a model output against a GT table row-block.
inline Var<float> supervised_loss(HeadKind h, Var<float> pred, Var<float> target) {
  switch (h) {
    case HeadKind::distribution: return emd_loss(target, pred);
    case HeadKind::probability: return bce_loss(pred, target);
    case HeadKind::score: return mse_loss(target, pred);
  }
  throw std::logic_error("unhandled head kind");
}

// ---------------------------------------------------------------------------
// Knowledge distiller: BN -> linear -> relu -> linear -> relu (f_t) -> head.

struct DistillerSpec {
  std::size_t input_width = 0;
  std::size_t hidden = 128;
  std::size_t feature_width = 64;
  std::size_t levels = kDefaultLevels;
  HeadKind head = HeadKind::distribution;
};

struct Distiller {
  DistillerSpec spec;
  ParameterSet<float> params;
  BatchNorm norm;
  Linear hidden, feature, out;
  double validation_srcc = 0.0;
};

inline Distiller make_distiller(const DistillerSpec& spec, std::uint64_t seed) {
  if (spec.input_width == 0 || spec.hidden == 0 || spec.feature_width == 0)
    throw std::invalid_argument("distiller widths must be positive");
  Distiller d;
  d.spec = spec;
  Rng rng(mix_seed(seed, 0xD15));
  d.norm = BatchNorm::create(d.params, "distiller.bn", spec.input_width);
  d.hidden = Linear::create(d.params, "distiller.fc1", spec.input_width, spec.hidden, rng);
  d.feature = Linear::create(d.params, "distiller.fc2", spec.hidden, spec.feature_width, rng);
  d.out = Linear::create(d.params, "distiller.fc3", spec.feature_width,
                         head_width(spec.head, spec.levels), rng);
  return d;
}

struct ModelOutput {
  Var<float> feature;
  Var<float> out;
};

inline ModelOutput distiller_forward(Tape<float>& tape, Distiller& d, Var<float> x) {
  if (x.value().rank() != 2 || x.value().dim(1) != d.spec.input_width)
    throw ShapeError("distiller", "expected [N," + std::to_string(d.spec.input_width) +
                                      "] features, got " + to_string(x.shape()));
  auto h = d.norm(tape, d.params, x, tape.mode() == Mode::training);
  h = relu(d.hidden(tape, d.params, h));
  auto f = relu(d.feature(tape, d.params, h));
  return {f, apply_head(d.spec.head, d.out(tape, d.params, f))};
}

inline void require_same_ids(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
                             std::string_view what) {
  if (!std::equal(a.begin(), a.end(), b.begin(), b.end()))
    throw std::invalid_argument(std::string(what) + ": sample ids do not align");
}

// Trains on rows of `features` against `targets` (same ids, same order).
inline Distiller train_distiller(const DistillerSpec& spec, const FeatureBank& features,
                                 const TargetTable& targets, const Schedule& schedule,
                                 std::uint64_t seed) {
  require_same_ids(features.ids, targets.ids, "train_distiller");
  if (features.dim != spec.input_width)
    throw std::invalid_argument("feature width " + std::to_string(features.dim) +
                                " differs from distiller input " + std::to_string(spec.input_width));
  if (targets.width != head_width(spec.head, spec.levels))
    throw std::invalid_argument("target width does not match distiller head");
  Distiller d = make_distiller(spec, seed);
  Adam<float> opt(schedule);
  Rng rng(mix_seed(seed, 0x7EA));
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      std::span<const std::size_t> rows(order.data() + start,
                                        std::min(schedule.batch_size, order.size() - start));
      if (rows.size() < 2) continue;
      Tape<float> tape(Mode::training);
      auto x = tape.constant(gather_rows(features.values, features.dim, rows));
      auto y = tape.constant(gather_rows(targets.values, targets.width, rows));
      auto loss = supervised_loss(spec.head, distiller_forward(tape, d, x).out, y);
      d.params.zero_grad();
      tape.backward(loss);
      opt.step(d.params, epoch);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Teacher knowledge.

struct KnowledgeCache {
  std::size_t feature_dim = 0;
  std::size_t levels = 0;  // output width: n for distributions, 1 otherwise
  std::vector<std::uint64_t> ids;
  std::vector<float> features;
  std::vector<float> outputs;

  std::size_t size() const noexcept { return ids.size(); }
  std::span<const float> feature(std::size_t i) const {
    return std::span<const float>(features).subspan(i * feature_dim, feature_dim);
  }
  std::span<const float> output(std::size_t i) const {
    return std::span<const float>(outputs).subspan(i * levels, levels);
  }
  friend bool operator==(const KnowledgeCache&, const KnowledgeCache&) = default;
};

// Inference-mode pass over every row, in bank order.
inline KnowledgeCache distill_knowledge(Distiller& d, const FeatureBank& bank, std::size_t batch = 256) {
  if (bank.size() > 0 && bank.dim != d.spec.input_width)
    throw std::invalid_argument("feature width " + std::to_string(bank.dim) +
                                " differs from distiller input " + std::to_string(d.spec.input_width));
  KnowledgeCache c;
  c.feature_dim = d.spec.feature_width;
  c.levels = head_width(d.spec.head, d.spec.levels);
  c.ids = bank.ids;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < bank.size(); start += batch) {
    rows.clear();
    for (std::size_t i = start; i < std::min(start + batch, bank.size()); ++i) rows.push_back(i);
    Tape<float> tape(Mode::inference);
    auto o = distiller_forward(tape, d, tape.constant(gather_rows(bank.values, bank.dim, rows)));
    const auto& f = o.feature.value();
    const auto& y = o.out.value();
    c.features.insert(c.features.end(), f.data().begin(), f.data().end());
    c.outputs.insert(c.outputs.end(), y.data().begin(), y.data().end());
  }
  return c;
}

// Predicted scalar per row (mean score, probability or normalised score).
inline std::vector<double> cache_scores(const KnowledgeCache& c, HeadKind head,
                                        std::size_t levels = kDefaultLevels) {
  std::vector<double> out;
  for (std::size_t i = 0; i < c.size(); ++i) out.push_back(head_score(head, c.output(i), levels));
  return out;
}

inline KnowledgeCache select_knowledge(const KnowledgeCache& c, std::span<const std::uint64_t> ids) {
  std::map<std::uint64_t, std::size_t> pos;
  for (std::size_t i = 0; i < c.size(); ++i) pos[c.ids[i]] = i;
  KnowledgeCache out;
  out.feature_dim = c.feature_dim;
  out.levels = c.levels;
  for (auto id : ids) {
    auto it = pos.find(id);
    if (it == pos.end())
      throw std::invalid_argument("knowledge cache has no record for sample " + std::to_string(id));
    out.ids.push_back(id);
    auto f = c.feature(it->second);
    auto y = c.output(it->second);
    out.features.insert(out.features.end(), f.begin(), f.end());
    out.outputs.insert(out.outputs.end(), y.begin(), y.end());
  }
  return out;
}

// .tk: "ATKC" u16 version, u64 count, u32 feature dim, u8 n, then records
// (u64 id, feature dim f32, n f32).
inline constexpr std::string_view kKnowledgeMagic = "ATKC";
inline constexpr std::uint16_t kKnowledgeVersion = 1;

inline std::string encode_knowledge(const KnowledgeCache& c) {
  if (c.levels > 255) throw std::invalid_argument("knowledge output width exceeds 255");
  ByteWriter w;
  w.put_bytes(kKnowledgeMagic);
  w.put<std::uint16_t>(kKnowledgeVersion);
  w.put<std::uint64_t>(c.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.feature_dim));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.levels));
  for (std::size_t i = 0; i < c.size(); ++i) {
    w.put<std::uint64_t>(c.ids[i]);
    w.put_floats(c.feature(i));
    w.put_floats(c.output(i));
  }
  return w.take();
}

inline KnowledgeCache decode_knowledge(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect_magic(kKnowledgeMagic);
  const auto vpos = r.offset();
  if (auto v = r.get<std::uint16_t>("version"); v != kKnowledgeVersion)
    throw FormatError(vpos, "unsupported knowledge cache version " + std::to_string(v));
  const auto cpos = r.offset();
  const auto count = r.get<std::uint64_t>("count");
  KnowledgeCache c;
  c.feature_dim = r.get<std::uint32_t>("feature dim");
  const auto npos = r.offset();
  c.levels = r.get<std::uint8_t>("output width");
  if (c.levels == 0) throw FormatError(npos, "zero output width");
  const std::uint64_t record = 8 + 4ull * (c.feature_dim + c.levels);
  if (count > (bytes.size() - r.offset()) / record)
    throw FormatError(cpos, "record count " + std::to_string(count) + " exceeds file size");
  c.ids.resize(count);
  c.features.resize(count * c.feature_dim);
  c.outputs.resize(count * c.levels);
  for (std::uint64_t i = 0; i < count; ++i) {
    c.ids[i] = r.get<std::uint64_t>("sample id");
    r.get_floats(c.features.data() + i * c.feature_dim, c.feature_dim, "teacher feature");
    r.get_floats(c.outputs.data() + i * c.levels, c.levels, "teacher output");
  }
  if (!r.done()) throw FormatError(r.offset(), "trailing bytes after knowledge cache");
  return c;
}

inline void write_cache(const std::filesystem::path& path, const KnowledgeCache& c) {
  write_file(path, encode_knowledge(c));
}
inline KnowledgeCache read_cache(const std::filesystem::path& path) {
  return decode_knowledge(read_file(path));
}

// ---------------------------------------------------------------------------
// Student.

enum class TrainingMode : std::uint8_t {
  baseline, kd, mixed_loss, mixed_label, multitask, multimodal,
  binary_baseline, binary_kd, regress_baseline, regress_kd,
};

inline constexpr std::array<TrainingMode, 10> kAllModes = {
    TrainingMode::baseline,        TrainingMode::kd,
    TrainingMode::mixed_loss,      TrainingMode::mixed_label,
    TrainingMode::multitask,       TrainingMode::multimodal,
    TrainingMode::binary_baseline, TrainingMode::binary_kd,
    TrainingMode::regress_baseline, TrainingMode::regress_kd};

inline std::string_view to_string(TrainingMode m) {
  switch (m) {
    case TrainingMode::baseline: return "baseline";
    case TrainingMode::kd: return "kd";
    case TrainingMode::mixed_loss: return "mixed_loss";
    case TrainingMode::mixed_label: return "mixed_label";
    case TrainingMode::multitask: return "multitask";
    case TrainingMode::multimodal: return "multimodal";
    case TrainingMode::binary_baseline: return "binary_baseline";
    case TrainingMode::binary_kd: return "binary_kd";
    case TrainingMode::regress_baseline: return "regress_baseline";
    case TrainingMode::regress_kd: return "regress_kd";
  }
  return "?";
}

inline TrainingMode parse_training_mode(std::string_view s) {
  for (auto m : kAllModes)
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown training mode '" + std::string(s) + "'");
}

inline HeadKind mode_head(TrainingMode m) {
  switch (m) {
    case TrainingMode::binary_baseline:
    case TrainingMode::binary_kd: return HeadKind::probability;
    case TrainingMode::regress_baseline:
    case TrainingMode::regress_kd: return HeadKind::score;
    default: return HeadKind::distribution;
  }
}

inline bool mode_uses_cache(TrainingMode m) {
  return m == TrainingMode::kd || m == TrainingMode::mixed_loss || m == TrainingMode::mixed_label ||
         m == TrainingMode::binary_kd || m == TrainingMode::regress_kd;
}

inline bool mode_semantic_input(TrainingMode m) { return m == TrainingMode::multimodal; }
inline bool mode_semantic_output(TrainingMode m) { return m == TrainingMode::multitask; }

inline LossKind mode_loss(TrainingMode m) {
  switch (m) {
    case TrainingMode::baseline:
    case TrainingMode::multimodal: return LossKind::emd;
    case TrainingMode::kd: return LossKind::kd;
    case TrainingMode::mixed_loss: return LossKind::mixed_loss;
    case TrainingMode::mixed_label: return LossKind::mixed_label;
    case TrainingMode::multitask: return LossKind::multitask;
    case TrainingMode::binary_baseline: return LossKind::bce;
    case TrainingMode::binary_kd: return LossKind::bce_kd;
    case TrainingMode::regress_baseline: return LossKind::mse;
    case TrainingMode::regress_kd: return LossKind::mse_kd;
  }
  throw std::logic_error("unhandled training mode");
}

struct StudentSpec {
  BackboneSpec backbone;
  std::size_t hidden = 64;
  std::size_t feature_width = 64;
  std::size_t levels = kDefaultLevels;
  std::size_t semantic_width = kSemanticWidth;
  std::size_t semantic_hidden = 32;
  TrainingMode mode = TrainingMode::baseline;
  bool frozen_backbone = false;
};

// Backbone -> pooled -> [semantic encoder concat] -> fc -> relu -> fc -> relu
// (f_s) -> head; multitask adds a sigmoid semantic head on f_s.
struct Student {
  StudentSpec spec;
  ParameterSet<float> params;
  Backbone backbone;
  Linear align_hidden, align_out, head;
  std::optional<Linear> encoder_hidden, encoder_out, semantic_head;
};

inline Student make_student(const StudentSpec& spec, std::uint64_t seed) {
  Student s;
  s.spec = spec;
  Rng rng(mix_seed(seed, 0x57D));
  s.backbone = Backbone::create(s.params, "student.backbone", spec.backbone, rng);
  std::size_t in = spec.backbone.pooled_width();
  if (mode_semantic_input(spec.mode)) {
    s.encoder_hidden = Linear::create(s.params, "student.encoder.fc1", spec.semantic_width,
                                      spec.semantic_hidden, rng);
    s.encoder_out = Linear::create(s.params, "student.encoder.fc2", spec.semantic_hidden,
                                   spec.semantic_hidden, rng);
    in += spec.semantic_hidden;
  }
  s.align_hidden = Linear::create(s.params, "student.align.fc1", in, spec.hidden, rng);
  s.align_out = Linear::create(s.params, "student.align.fc2", spec.hidden, spec.feature_width, rng);
  s.head = Linear::create(s.params, "student.head", spec.feature_width,
                          head_width(mode_head(spec.mode), spec.levels), rng);
  if (mode_semantic_output(spec.mode))
    s.semantic_head = Linear::create(s.params, "student.semantic_head", spec.feature_width,
                                     spec.semantic_width, rng);
  if (spec.frozen_backbone) s.params.set_trainable("student.backbone.", false);
  return s;
}

// Copies backbone weights and statistics from a pre-trained model whose
// stages have the same widths.
inline void load_backbone(Student& s, const PocModel& poc) {
  if (poc.backbone.spec.widths != s.spec.backbone.widths)
    throw std::invalid_argument("pre-trained widths differ from student backbone");
  const std::string from = poc.backbone.prefix, to = s.backbone.prefix;
  for (const auto& p : poc.params) {
    if (p.name.rfind(from, 0) != 0) continue;
    auto idx = s.params.find(to + p.name.substr(from.size()));
    if (!idx) throw std::invalid_argument("student has no parameter for " + p.name);
    s.params[*idx].value = p.value;
  }
}

struct StudentOutput {
  Var<float> pooled, feature, out;
  std::optional<Var<float>> semantic;
};

inline StudentOutput student_head_forward(Tape<float>& tape, Student& s, Var<float> pooled,
                                          std::optional<Var<float>> semantic) {
  auto h = pooled;
  if (s.encoder_hidden) {
    if (!semantic) throw std::invalid_argument("multimodal student needs semantic labels");
    auto e = relu((*s.encoder_hidden)(tape, s.params, *semantic));
    e = relu((*s.encoder_out)(tape, s.params, e));
    h = concat(std::vector<Var<float>>{h, e}, "student.fuse");
  }
  h = relu(s.align_hidden(tape, s.params, h));
  auto f = relu(s.align_out(tape, s.params, h));
  StudentOutput o{pooled, f, apply_head(mode_head(s.spec.mode), s.head(tape, s.params, f)), {}};
  if (s.semantic_head) o.semantic = sigmoid((*s.semantic_head)(tape, s.params, f));
  return o;
}

inline Var<float> student_pool(Tape<float>& tape, Student& s, Var<float> images) {
  const auto& sh = images.shape();
  const auto r = s.spec.backbone.resolution;
  if (sh.size() != 4 || sh[2] != r || sh[3] != r)
    throw ShapeError("student", "expected " + std::to_string(r) + "x" + std::to_string(r) +
                                    " inputs, got " + to_string(sh));
  return mlsp_pool(s.backbone.forward(tape, s.params, images, !s.spec.frozen_backbone));
}

inline StudentOutput student_forward(Tape<float>& tape, Student& s, Var<float> images,
                                     std::optional<Var<float>> semantic = std::nullopt) {
  return student_head_forward(tape, s, student_pool(tape, s, images), semantic);
}

// Everything a training step may need, row-aligned with the image set.
struct StudentData {
  ImageSet images;
  TargetTable targets;                   // in the student's head units
  std::optional<TargetTable> gt_distribution;  // for mixed variants
  std::optional<TargetTable> semantic;   // two-hot labels
};

inline StudentData make_student_data(const std::vector<SynthSample>& samples,
                                     std::span<const std::uint64_t> ids, std::size_t resolution,
                                     TrainingMode mode) {
  StudentData d;
  d.images = make_image_set(samples, resolution, ids);
  d.targets = make_targets(samples, ids, mode_head(mode));
  d.gt_distribution = make_targets(samples, ids, HeadKind::distribution);
  std::map<std::uint64_t, const SynthSample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  TargetTable sem;
  sem.ids.assign(ids.begin(), ids.end());
  sem.width = kSemanticWidth;
  for (auto id : ids) {
    auto v = semantic_label(*by_id.at(id));
    sem.values.insert(sem.values.end(), v.begin(), v.end());
  }
  d.semantic = std::move(sem);
  return d;
}

// The training objective for one batch; exposed so the exact quantity being
// minimised can be inspected.
inline Var<float> student_loss(Tape<float>& tape, const StudentOutput& o, TrainingMode mode,
                               const LossSpec& kd_weights, Var<float> target,
                               std::optional<Var<float>> gt_distribution,
                               std::optional<Var<float>> semantic,
                               std::optional<Var<float>> teacher_feature,
                               std::optional<Var<float>> teacher_out) {
  (void)tape;
  LossSpec spec = kd_weights;
  spec.kind = mode_loss(mode);
  if (spec.kind != LossKind::kd) spec = LossSpec{spec.kind};
  LossInputs<float> in;
  in.student_out = o.out;
  in.student_feat = o.feature;
  in.teacher_out = teacher_out;
  in.teacher_feat = teacher_feature;
  in.gt = (spec.kind == LossKind::mixed_loss || spec.kind == LossKind::mixed_label ||
           spec.kind == LossKind::multitask || spec.kind == LossKind::kd)
              ? gt_distribution
              : std::optional<Var<float>>(target);
  in.semantic_pred = o.semantic;
  in.semantic = semantic;
  return evaluate(spec, in);
}

struct TrainingHistory {
  std::vector<double> epoch_loss;
  std::uint64_t rejected_steps = 0;
};

struct StudentTraining {
  Schedule schedule;
  LossSpec kd_weights;  // term weights for the kd mode
};

// Trains in place. kd-family modes need a cache covering every training id.
// With a frozen backbone the pooled features are computed once in inference
// mode, which is exactly what every step would recompute.
inline TrainingHistory train_student(Student& s, const StudentData& data,
                                     const KnowledgeCache* cache, const StudentTraining& cfg,
                                     std::uint64_t seed) {
  const TrainingMode mode = s.spec.mode;
  const std::size_t N = data.images.size();
  require_same_ids(data.images.ids, data.targets.ids, "train_student targets");
  if (data.images.resolution != s.spec.backbone.resolution)
    throw std::invalid_argument("student expects " + std::to_string(s.spec.backbone.resolution) +
                                " inputs, data is " + std::to_string(data.images.resolution));
  std::optional<KnowledgeCache> knowledge;
  if (mode_uses_cache(mode)) {
    if (!cache) throw std::invalid_argument(std::string(to_string(mode)) + " mode requires a knowledge cache");
    knowledge = select_knowledge(*cache, data.images.ids);
    if (knowledge->feature_dim != s.spec.feature_width)
      throw std::invalid_argument("cache feature width " + std::to_string(knowledge->feature_dim) +
                                  " differs from student feature width " +
                                  std::to_string(s.spec.feature_width));
    if (knowledge->levels != head_width(mode_head(mode), s.spec.levels))
      throw std::invalid_argument("cache output width does not match student head");
  }
  if ((mode_semantic_input(mode) || mode_semantic_output(mode)) && !data.semantic)
    throw std::invalid_argument(std::string(to_string(mode)) + " mode requires semantic labels");
  if ((mode == TrainingMode::mixed_loss || mode == TrainingMode::mixed_label ||
       mode == TrainingMode::multitask || mode == TrainingMode::kd) &&
      !data.gt_distribution)
    throw std::invalid_argument("mode requires ground-truth distributions");

  std::optional<Tensor<float>> frozen_pool;
  if (s.spec.frozen_backbone) {
    const std::size_t P = s.spec.backbone.pooled_width();
    Tensor<float> all(Shape{std::max<std::size_t>(N, 1), P});
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < N; start += 64) {
      rows.clear();
      for (std::size_t i = start; i < std::min(start + 64, N); ++i) rows.push_back(i);
      Tape<float> tape(Mode::inference);
      auto pooled = student_pool(tape, s, tape.constant(data.images.batch(rows))).value();
      std::copy(pooled.data().begin(), pooled.data().end(), all.ptr() + start * P);
    }
    frozen_pool = std::move(all);
  }

  Adam<float> opt(cfg.schedule);
  Rng rng(mix_seed(seed, 0x7A1));
  TrainingHistory hist;
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.schedule.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < N; start += cfg.schedule.batch_size) {
      std::span<const std::size_t> rows(order.data() + start,
                                        std::min(cfg.schedule.batch_size, N - start));
      if (rows.size() < 2) continue;
      Tape<float> tape(Mode::training);
      std::optional<Var<float>> sem, sem_in, tf, to, gt;
      if (data.semantic)
        sem = tape.constant(gather_rows(data.semantic->values, data.semantic->width, rows));
      if (mode_semantic_input(mode)) sem_in = sem;
      auto pooled = frozen_pool
                        ? tape.constant(gather_rows(frozen_pool->data(), frozen_pool->dim(1), rows))
                        : student_pool(tape, s, tape.constant(data.images.batch(rows)));
      auto o = student_head_forward(tape, s, pooled, sem_in);
      auto target = tape.constant(gather_rows(data.targets.values, data.targets.width, rows));
      if (data.gt_distribution)
        gt = tape.constant(gather_rows(data.gt_distribution->values, data.gt_distribution->width, rows));
      if (knowledge) {
        tf = tape.constant(gather_rows(knowledge->features, knowledge->feature_dim, rows));
        to = tape.constant(gather_rows(knowledge->outputs, knowledge->levels, rows));
      }
      auto loss = student_loss(tape, o, mode, cfg.kd_weights, target, gt,
                               mode_semantic_output(mode) ? sem : std::nullopt, tf, to);
      s.params.zero_grad();
      tape.backward(loss);
      if (!opt.step(s.params, epoch)) ++hist.rejected_steps;
      total += loss.value().item();
      ++batches;
    }
    hist.epoch_loss.push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  return hist;
}

struct StudentPrediction {
  std::vector<std::uint64_t> ids;
  std::size_t width = 0;
  std::vector<float> outputs;
  FeatureBank features;  // f_s
  std::vector<double> scores;
};

inline StudentPrediction predict_student(Student& s, const ImageSet& images,
                                         const std::optional<TargetTable>& semantic = std::nullopt,
                                         std::size_t batch = 64) {
  StudentPrediction p;
  p.ids = images.ids;
  const HeadKind head = mode_head(s.spec.mode);
  p.width = head_width(head, s.spec.levels);
  p.features.dim = s.spec.feature_width;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    rows.clear();
    for (std::size_t i = start; i < std::min(start + batch, images.size()); ++i) rows.push_back(i);
    Tape<float> tape(Mode::inference);
    std::optional<Var<float>> sem;
    if (mode_semantic_input(s.spec.mode)) {
      if (!semantic) throw std::invalid_argument("multimodal prediction needs semantic labels");
      sem = tape.constant(gather_rows(semantic->values, semantic->width, rows));
    }
    auto o = student_forward(tape, s, tape.constant(images.batch(rows)), sem);
    const auto& y = o.out.value();
    const auto& f = o.feature.value();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto yr = std::span<const float>(y.ptr() + i * p.width, p.width);
      p.outputs.insert(p.outputs.end(), yr.begin(), yr.end());
      p.scores.push_back(head_score(head, yr, s.spec.levels));
      p.features.push_back(images.ids[rows[i]],
                           std::span<const float>(f.ptr() + i * p.features.dim, p.features.dim));
    }
  }
  return p;
}

}  // namespace aeskd
