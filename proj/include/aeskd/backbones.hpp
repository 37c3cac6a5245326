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
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "aeskd/io.hpp"
#include "aeskd/nn.hpp"
#include "aeskd/optim.hpp"
#include "aeskd/synthcorpus.hpp"

namespace aeskd {

struct BackboneSpec {
  std::vector<std::size_t> widths{8, 16, 32};
  std::size_t in_channels = 3;
  std::size_t resolution = 64;

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("backbone needs at least two stages");
    for (auto w : widths)
      if (w == 0) throw std::invalid_argument("backbone stage widths must be positive");
    if (in_channels == 0) throw std::invalid_argument("backbone needs input channels");
    if (resolution == 0) throw std::invalid_argument("backbone resolution must be positive");
  }
  std::size_t pooled_width() const {
    return std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  }
};

// Stage k: conv3x3 -> batch norm -> relu -> conv3x3 stride 2 -> relu.
struct Backbone {
  struct Stage {
    Conv3x3 conv;
    BatchNorm norm;
    Conv3x3 down;
  };
  BackboneSpec spec;
  std::vector<Stage> stages;
  std::string prefix;

  template <typename T>
  static Backbone create(ParameterSet<T>& ps, const std::string& prefix,
                         const BackboneSpec& spec, Rng& rng) {
    spec.validate();
    Backbone b;
    b.spec = spec;
    b.prefix = prefix;
    std::size_t in = spec.in_channels;
    for (std::size_t k = 0; k < spec.widths.size(); ++k) {
      const auto w = spec.widths[k];
      const auto p = prefix + ".stage" + std::to_string(k);
      Stage s;
      s.conv = Conv3x3::create(ps, p + ".conv", in, w, 1, rng);
      s.norm = BatchNorm::create(ps, p + ".bn", w);
      s.down = Conv3x3::create(ps, p + ".down", w, w, 2, rng);
      b.stages.push_back(std::move(s));
      in = w;
    }
    return b;
  }

  // Returns one feature map per stage. Batch statistics are used only when
  // the tape is in training mode and batch_stats is set.
  template <typename T>
  std::vector<Var<T>> forward(Tape<T>& tape, ParameterSet<T>& ps, Var<T> x,
                              bool batch_stats = true) const {
    const auto& xs = x.value().shape();
    if (xs.size() != 4 || xs[1] != spec.in_channels) {
      throw ShapeError(prefix, "backbone expects [N," + std::to_string(spec.in_channels) +
                                   ",H,W], got " + to_string(xs));
    }
    const bool use_batch = batch_stats && tape.mode() == Mode::training;
    std::vector<Var<T>> maps;
    auto h = x;
    for (const auto& s : stages) {
      h = relu(s.norm(tape, ps, s.conv(tape, ps, h), use_batch));
      h = relu(s.down(tape, ps, h));
      maps.push_back(h);
    }
    return maps;
  }
};

// Global average pool of every stage, concatenated in stage order.
template <typename T>
Var<T> mlsp_pool(const std::vector<Var<T>>& maps) {
  if (maps.empty()) throw std::invalid_argument("mlsp_pool of an empty stage list");
  std::vector<Var<T>> pooled;
  for (const auto& m : maps) pooled.push_back(global_avg_pool(m));
  return pooled.size() == 1 ? pooled.front() : concat(pooled, "mlsp");
}

// Plain-tensor version over [N,C,H,W] maps; returns [N, sum C].
inline Tensor<float> mlsp_pool(const std::vector<Tensor<float>>& maps) {
  if (maps.empty()) throw std::invalid_argument("mlsp_pool of an empty stage list");
  const std::size_t N = maps.front().dim(0);
  std::size_t width = 0;
  for (const auto& m : maps) {
    if (m.rank() != 4 || m.dim(0) != N) throw std::invalid_argument("stage maps disagree on batch");
    width += m.dim(1);
  }
  Tensor<float> out(Shape{N, width});
  std::size_t off = 0;
  for (const auto& m : maps) {
    const std::size_t C = m.dim(1), P = m.dim(2) * m.dim(3);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        const float* p = m.ptr() + (i * C + c) * P;
        for (std::size_t k = 0; k < P; ++k) s += p[k];
        out[i * width + off + c] = static_cast<float>(s / static_cast<double>(P));
      }
    off += C;
  }
  return out;
}

// Concatenation of pooled vectors in the given backbone order.
inline std::vector<float> combine_gsf(const std::vector<std::vector<float>>& pooled) {
  if (pooled.empty()) throw std::invalid_argument("combine_gsf needs at least one vector");
  std::vector<float> out;
  for (const auto& p : pooled) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// Row-wise concatenation of banks that share ids in the same order.
inline FeatureBank combine_gsf(const std::vector<FeatureBank>& banks) {
  if (banks.empty()) throw std::invalid_argument("combine_gsf needs at least one bank");
  FeatureBank out;
  for (const auto& b : banks) {
    if (b.ids != banks.front().ids) throw std::invalid_argument("feature banks disagree on ids");
    out.dim += b.dim;
  }
  out.ids = banks.front().ids;
  out.values.reserve(out.ids.size() * out.dim);
  for (std::size_t i = 0; i < out.ids.size(); ++i)
    for (const auto& b : banks) {
      auto r = b.row(i);
      out.values.insert(out.values.end(), r.begin(), r.end());
    }
  return out;
}

// ---------------------------------------------------------------------------
// Image batches.

// Contiguous [N, C, R, R] image stack with ids.
struct ImageSet {
  std::vector<std::uint64_t> ids;
  std::size_t channels = 3, resolution = 0;
  std::vector<float> pixels;

  std::size_t size() const noexcept { return ids.size(); }
  std::size_t stride() const noexcept { return channels * resolution * resolution; }

  Tensor<float> batch(std::span<const std::size_t> rows) const {
    Tensor<float> t(Shape{rows.size(), channels, resolution, resolution});
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(pixels.data() + rows[i] * stride(), stride(), t.ptr() + i * stride());
    return t;
  }
  Tensor<float> image(std::size_t row) const {
    std::size_t r[1] = {row};
    return batch(r).reshaped({channels, resolution, resolution});
  }
};

// Resizes every sample to `resolution` (bilinear; identity at native size).
inline ImageSet make_image_set(const std::vector<SynthSample>& samples, std::size_t resolution,
                               std::span<const std::uint64_t> ids = {}) {
  std::map<std::uint64_t, const SynthSample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<std::uint64_t> order(ids.begin(), ids.end());
  if (order.empty())
    for (const auto& s : samples) order.push_back(s.id);
  ImageSet set;
  set.resolution = resolution;
  set.ids = order;
  set.pixels.reserve(order.size() * 3 * resolution * resolution);
  for (auto id : order) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw std::invalid_argument("no sample with id " + std::to_string(id));
    const auto img = resize_image(it->second->image, resolution, resolution);
    set.pixels.insert(set.pixels.end(), img.data().begin(), img.data().end());
  }
  return set;
}

// ---------------------------------------------------------------------------
// Classification pre-training of pattern backbones.

struct PocModel {
  std::string name;
  ParameterSet<float> params;
  Backbone backbone;
  Linear head;
  std::size_t classes = 0;
  double train_accuracy = 0.0;
};

// Classification batch: images plus integer labels in [0, classes).
struct ClassCorpus {
  ImageSet images;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
};

// Labels are subject classes remapped to a dense range.
inline ClassCorpus make_class_corpus(const std::vector<SynthSample>& samples,
                                     std::size_t resolution) {
  ClassCorpus c;
  c.images = make_image_set(samples, resolution);
  std::map<std::size_t, std::size_t> dense;
  for (const auto& s : samples) dense.emplace(s.subject_class(), 0);
  std::size_t k = 0;
  for (auto& [cls, idx] : dense) idx = k++;
  for (const auto& s : samples) c.labels.push_back(dense.at(s.subject_class()));
  c.classes = dense.size();
  return c;
}

inline PocModel make_poc(const std::string& name, const BackboneSpec& spec, std::size_t classes,
                         std::uint64_t seed) {
  PocModel m;
  m.name = name;
  m.classes = classes;
  Rng rng(mix_seed(seed, 0xB0C));
  m.backbone = Backbone::create(m.params, name + ".backbone", spec, rng);
  m.head = Linear::create(m.params, name + ".head", spec.widths.back(), classes, rng);
  return m;
}

// Logits [N, classes] from the last stage's global average pool.
inline Var<float> poc_logits(Tape<float>& tape, PocModel& m, Var<float> x) {
  auto maps = m.backbone.forward(tape, m.params, x);
  return m.head(tape, m.params, global_avg_pool(maps.back()));
}

inline double poc_accuracy(PocModel& m, const ClassCorpus& data, std::size_t batch = 64) {
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.images.size(); start += batch) {
    rows.clear();
    for (std::size_t i = start; i < std::min(start + batch, data.images.size()); ++i) rows.push_back(i);
    Tape<float> tape(Mode::inference);
    auto logits = poc_logits(tape, m, tape.constant(data.images.batch(rows))).value();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const float* row = logits.ptr() + i * m.classes;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + m.classes) - row);
      correct += best == data.labels[rows[i]];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.images.size());
}

// Softmax cross-entropy training of backbone + head. Zero epochs returns the
// initial model.
inline PocModel pretrain_poc(const std::string& name, const BackboneSpec& spec,
                             const ClassCorpus& data, const Schedule& schedule,
                             std::uint64_t seed) {
  if (data.classes < 2) throw std::invalid_argument("pre-training needs at least two classes");
  if (data.images.size() != data.labels.size() || data.images.size() == 0)
    throw std::invalid_argument("class corpus images and labels disagree");
  if (data.images.resolution != spec.resolution)
    throw std::invalid_argument("class corpus resolution " + std::to_string(data.images.resolution) +
                                " differs from backbone resolution " + std::to_string(spec.resolution));
  PocModel m = make_poc(name, spec, data.classes, seed);
  Adam<float> opt(schedule);
  Rng rng(mix_seed(seed, 0x5A1));
  std::vector<std::size_t> order(data.images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::size_t end = std::min(start + schedule.batch_size, order.size());
      std::span<const std::size_t> rows(order.data() + start, end - start);
      if (rows.size() < 2) continue;  // batch statistics need two samples
      Tensor<float> onehot(Shape{rows.size(), data.classes});
      for (std::size_t i = 0; i < rows.size(); ++i) onehot.at(i, data.labels[rows[i]]) = 1.0f;
      Tape<float> tape(Mode::training);
      auto probs = softmax(poc_logits(tape, m, tape.constant(data.images.batch(rows))));
      auto logp = log(clamp(probs, 1e-7f, 1.0f));
      auto loss = affine(mean(mul(tape.constant(onehot), logp)),
                         -static_cast<float>(data.classes), 0.0f);
      m.params.zero_grad();
      tape.backward(loss);
      opt.step(m.params, epoch);
    }
  }
  m.train_accuracy = poc_accuracy(m, data);
  return m;
}

// Inference-mode stage maps and pooled features for a batch [N,C,H,W].
struct GsfOutput {
  std::vector<Tensor<float>> maps;
  Tensor<float> pooled;
};

inline GsfOutput extract_gsf(Backbone& bb, ParameterSet<float>& ps, const Tensor<float>& images) {
  if (images.rank() != 4 || images.dim(1) != bb.spec.in_channels)
    throw ShapeError(bb.prefix, "expected [N," + std::to_string(bb.spec.in_channels) +
                                    ",H,W] images, got " + to_string(images.shape()));
  Tape<float> tape(Mode::inference);
  auto maps = bb.forward(tape, ps, tape.constant(images), false);
  GsfOutput out;
  for (const auto& m : maps) out.maps.push_back(m.value());
  out.pooled = mlsp_pool(out.maps);
  return out;
}

// Pooled features for every image in the set, batched.
inline FeatureBank extract_gsf_bank(Backbone& bb, ParameterSet<float>& ps, const ImageSet& images,
                                    std::size_t batch = 32) {
  FeatureBank bank;
  bank.dim = bb.spec.pooled_width();
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    rows.clear();
    for (std::size_t i = start; i < std::min(start + batch, images.size()); ++i) rows.push_back(i);
    auto out = extract_gsf(bb, ps, images.batch(rows));
    for (std::size_t i = 0; i < rows.size(); ++i)
      bank.push_back(images.ids[rows[i]],
                     std::span<const float>(out.pooled.ptr() + i * bank.dim, bank.dim));
  }
  return bank;
}

// Nearest-neighbour upsampling of an [N, h, w] map to [N, H, W].
inline Tensor<float> upsample_nearest(const Tensor<float>& m, std::size_t H, std::size_t W) {
  const std::size_t N = m.dim(0), h = m.dim(1), w = m.dim(2);
  Tensor<float> out(Shape{N, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        out[(n * H + y) * W + x] = m[(n * h + y * h / H) * w + x * w / W];
  return out;
}

// Channel mean of a [N, C, h, w] stage map, upsampled to [N, H, W].
inline Tensor<float> channel_mean_map(const Tensor<float>& stage, std::size_t H, std::size_t W) {
  const std::size_t N = stage.dim(0), C = stage.dim(1), h = stage.dim(2), w = stage.dim(3);
  Tensor<float> mean(Shape{N, h, w});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < h * w; ++p)
        mean[n * h * w + p] += stage[(n * C + c) * h * w + p] / static_cast<float>(C);
  return upsample_nearest(mean, H, W);
}

// Activation map of the last stage for every image, at the given extent
// (defaults to the input extent).
inline Tensor<float> activation_map(Backbone& bb, ParameterSet<float>& ps, const Tensor<float>& images,
                                    std::size_t extent = 0) {
  const std::size_t H = extent ? extent : images.dim(2);
  const std::size_t W = extent ? extent : images.dim(3);
  auto out = extract_gsf(bb, ps, images);
  return channel_mean_map(out.maps.back(), H, W);
}

// ---------------------------------------------------------------------------
// .gsf feature banks: "AGSF" u16 version, u64 count, u32 dim, then records
// (u64 id, dim f32).

inline constexpr std::string_view kGsfMagic = "AGSF";
inline constexpr std::uint16_t kGsfVersion = 1;

inline std::string encode_gsf(const FeatureBank& bank) {
  ByteWriter w;
  w.put_bytes(kGsfMagic);
  w.put<std::uint16_t>(kGsfVersion);
  w.put<std::uint64_t>(bank.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bank.dim));
  for (std::size_t i = 0; i < bank.size(); ++i) {
    w.put<std::uint64_t>(bank.ids[i]);
    w.put_floats(bank.row(i));
  }
  return w.take();
}

inline FeatureBank decode_gsf(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect_magic(kGsfMagic);
  const auto vpos = r.offset();
  if (auto v = r.get<std::uint16_t>("version"); v != kGsfVersion)
    throw FormatError(vpos, "unsupported feature bank version " + std::to_string(v));
  const auto cpos = r.offset();
  const auto count = r.get<std::uint64_t>("count");
  const auto dim = r.get<std::uint32_t>("dim");
  const std::uint64_t record = 8 + 4ull * dim;
  if (count > (bytes.size() - r.offset()) / record)
    throw FormatError(cpos, "record count " + std::to_string(count) + " exceeds file size");
  FeatureBank bank;
  bank.dim = dim;
  bank.ids.resize(count);
  bank.values.resize(count * dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    bank.ids[i] = r.get<std::uint64_t>("sample id");
    r.get_floats(bank.values.data() + i * dim, dim, "feature values");
  }
  if (!r.done()) throw FormatError(r.offset(), "trailing bytes after feature bank");
  return bank;
}

}  // namespace aeskd
