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

// Procedural pattern corpus. Every image holds one subject patch (a disk
// filled with one of 18 pattern classes) plus up to three small distractor
// patches over a textured background. The score is a fixed function of how
// the subject is composed, never of which pattern it shows.

#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "aeskd/io.hpp"
#include "aeskd/ratings.hpp"
#include "aeskd/tensor.hpp"

namespace aeskd {

enum class Family : std::uint8_t { circle, cross, stripes, checkerboard, gradient_blob, ring };

inline constexpr std::size_t kFamilies = 6;
inline constexpr std::size_t kStyles = 3;
inline constexpr std::size_t kPatternClasses = kFamilies * kStyles;
inline constexpr std::size_t kBackgrounds = 4;
// Two-hot semantic vocabulary: subject pattern class, then background texture.
inline constexpr std::size_t kSemanticWidth = kPatternClasses + kBackgrounds;

inline constexpr std::array<Family, kFamilies> kAllFamilies = {
    Family::circle, Family::cross, Family::stripes,
    Family::checkerboard, Family::gradient_blob, Family::ring};

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::circle: return "circle";
    case Family::cross: return "cross";
    case Family::stripes: return "stripes";
    case Family::checkerboard: return "checkerboard";
    case Family::gradient_blob: return "gradient_blob";
    case Family::ring: return "ring";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  for (auto f : kAllFamilies)
    if (family_name(f) == s) return f;
  throw std::invalid_argument("unknown pattern family '" + std::string(s) + "'");
}

inline std::size_t pattern_class(Family f, std::size_t style) {
  return static_cast<std::size_t>(f) * kStyles + style;
}
inline Family class_family(std::size_t cls) { return static_cast<Family>(cls / kStyles); }
inline std::size_t class_style(std::size_t cls) { return cls % kStyles; }

// Composition descriptors, each in [0, 1].
struct Descriptors {
  double centering = 0.0;
  double size = 0.0;
  double contrast = 0.0;
  double clutter = 0.0;
};

inline double aesthetic_rule(const Descriptors& d) {
  for (double v : {d.centering, d.size, d.contrast, d.clutter}) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument("composition descriptor " + std::to_string(v) +
                                  " outside [0, 1]");
    }
  }
  const double e = 0.4 * d.centering + 0.3 * d.size + 0.2 * d.contrast -
                   0.1 * d.clutter + 0.1;
  return 1.0 + 9.0 * std::clamp(e, 0.0, 1.0);
}

struct CorpusConfig {
  std::size_t count = 2400;
  std::size_t resolution = 64;
  std::size_t small_resolution = 32;
  double min_mask_fraction = 0.10;
  double max_mask_fraction = 0.30;
  double ideal_mask_fraction = 0.20;
  std::size_t max_distractors = 3;
  double sigma = 1.0;
  std::size_t levels = kDefaultLevels;
  double noise = 0.03;
  // Largest allowed |mean(distribution) - score|; layouts beyond it are redrawn.
  double max_mean_error = 0.1;
  // Pattern blur in pixels (at 64 px) for a patch at the frame corner; falls
  // off linearly to zero at the centre, like a shallow depth of field.
  double focus_blur = 3.0;
  std::vector<Family> families{kAllFamilies.begin(), kAllFamilies.end()};

  void validate() const {
    if (count == 0) throw std::invalid_argument("corpus count must be positive");
    if (resolution < 16) throw std::invalid_argument("resolution must be at least 16");
    if (small_resolution == 0 || small_resolution > resolution)
      throw std::invalid_argument("small resolution must be in (0, resolution]");
    if (!(min_mask_fraction > 0.0 && min_mask_fraction < max_mask_fraction &&
          max_mask_fraction < 0.7))
      throw std::invalid_argument("mask fraction bounds are empty or out of range");
    // The subject disk must hold at least one pixel count inside the bounds.
    const double px = static_cast<double>(resolution * resolution);
    if (std::floor(max_mask_fraction * px) < std::ceil(min_mask_fraction * px))
      throw std::invalid_argument("mask fraction bounds admit no pixel count");
    if (!(sigma > 0.0)) throw std::invalid_argument("rating spread must be positive");
    if (levels < 2) throw std::invalid_argument("need at least two score levels");
    if (noise < 0.0) throw std::invalid_argument("render noise must be non-negative");
    if (focus_blur < 0.0) throw std::invalid_argument("focus blur must be non-negative");
    if (families.empty()) throw std::invalid_argument("no pattern families enabled");
    if (max_distractors > 3) throw std::invalid_argument("at most 3 distractors");
  }
};

struct SynthSample {
  std::uint64_t id = 0;
  Tensor<float> image;  // [3, R, R] in [0, 1]
  Tensor<float> mask;   // [R, R], 1 on the subject
  std::vector<std::size_t> classes;  // subject class first, then distractors
  std::size_t background = 0;
  double score = 0.0;
  RatingDistribution distribution;
  Descriptors descriptors;
  double mask_fraction = 0.0;
  std::vector<std::string> split_tags;

  Family category() const { return class_family(classes.front()); }
  std::size_t subject_class() const { return classes.front(); }
};

// splitmix64 finaliser; derives independent per-sample streams from one seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace render {

// Pattern value in [-1, 1] at disk coordinates (u, v), |(u, v)| <= 1.
inline double pattern(Family f, std::size_t style, double u, double v) {
  const double rho = std::sqrt(u * u + v * v);
  const double s = static_cast<double>(style);
  constexpr double pi = std::numbers::pi;
  switch (f) {
    case Family::circle:
      return rho < 0.45 + 0.12 * s ? 1.0 : -1.0;
    case Family::cross: {
      const double a = s * pi / 6.0;
      const double x = u * std::cos(a) + v * std::sin(a);
      const double y = -u * std::sin(a) + v * std::cos(a);
      return (std::abs(x) < 0.25 || std::abs(y) < 0.25) ? 1.0 : -1.0;
    }
    case Family::stripes: {
      const double a = s * pi / 3.0;
      return std::cos(2.0 * pi * 2.5 * (u * std::cos(a) + v * std::sin(a)));
    }
    case Family::checkerboard: {
      const double f2 = 2.0 + s;
      return std::sin(pi * f2 * (u + 1.0)) * std::sin(pi * f2 * (v + 1.0)) >= 0.0 ? 1.0 : -1.0;
    }
    case Family::gradient_blob:
      return 1.0 - 2.0 * std::pow(rho, 0.6 + 0.6 * s);
    case Family::ring:
      return std::cos(2.0 * pi * (1.5 + 0.75 * s) * rho);
  }
  return 0.0;
}

// Style palettes, shared by all families so that colour alone does not
// identify a class.
inline std::array<double, 3> palette(std::size_t style) {
  static constexpr std::array<std::array<double, 3>, kStyles> p = {{
      {0.75, 0.45, 0.35}, {0.35, 0.60, 0.75}, {0.55, 0.70, 0.40}}};
  return p[style];
}

inline double background_texture(std::size_t type, double x, double y, double phase) {
  switch (type) {
    case 0: return (x + y) - 1.0;  // smooth diagonal ramp
    case 1: return std::sin(3.1 * x + phase) * std::cos(2.3 * y - phase);
    case 2: return std::sin(41.0 * x + phase) * std::sin(37.0 * y);
    default: return std::sin(17.0 * (x + y) + phase) * std::sin(9.0 * (x - y));
  }
}

struct Patch {
  double cx, cy, radius, amplitude;
  std::size_t cls;
  double blur = 0.0;  // box half-width in pixels
};

inline void paint_patch(Tensor<float>& img, const Patch& p, Tensor<float>* mask) {
  const std::size_t R = img.dim(1);
  const auto col = palette(class_style(p.cls));
  const Family fam = class_family(p.cls);
  const std::size_t st = class_style(p.cls);
  const long x0 = std::max(0L, static_cast<long>(std::floor(p.cx - p.radius)));
  const long x1 = std::min(static_cast<long>(R) - 1, static_cast<long>(std::ceil(p.cx + p.radius)));
  const long y0 = std::max(0L, static_cast<long>(std::floor(p.cy - p.radius)));
  const long y1 = std::min(static_cast<long>(R) - 1, static_cast<long>(std::ceil(p.cy + p.radius)));
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      const double u = (static_cast<double>(x) + 0.5 - p.cx) / p.radius;
      const double v = (static_cast<double>(y) + 0.5 - p.cy) / p.radius;
      if (u * u + v * v > 1.0) continue;
      double t = 0.0;
      if (p.blur > 0.0) {
        constexpr int taps = 5;
        for (int i = 0; i < taps; ++i)
          for (int j = 0; j < taps; ++j) {
            const double ox = p.blur * (2.0 * i / (taps - 1) - 1.0) / p.radius;
            const double oy = p.blur * (2.0 * j / (taps - 1) - 1.0) / p.radius;
            t += pattern(fam, st, u + ox, v + oy);
          }
        t /= taps * taps;
      } else {
        t = pattern(fam, st, u, v);
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double val = col[c] + p.amplitude * t;
        img[(c * R + static_cast<std::size_t>(y)) * R + static_cast<std::size_t>(x)] =
            static_cast<float>(val);
      }
      if (mask) mask->at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.0f;
    }
}

}  // namespace render

// Renders sample `id`. The layout is redrawn until the mask fraction lies in
// the configured bounds and the label distribution tracks the score.
inline SynthSample render_sample(const CorpusConfig& cfg, std::uint64_t id,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t R = cfg.resolution;
  const double Rd = static_cast<double>(R);
  constexpr double pi = std::numbers::pi;

  for (int attempt = 0; attempt < 1000; ++attempt) {
    SynthSample s;
    s.id = id;
    s.image = Tensor<float>(Shape{3, R, R});
    s.mask = Tensor<float>(Shape{R, R});

    // Background.
    s.background = static_cast<std::size_t>(rng() % kBackgrounds);
    const double phase = unit(rng) * 2.0 * pi;
    std::array<double, 3> base{};
    for (auto& b : base) b = 0.35 + 0.25 * unit(rng);
    for (std::size_t y = 0; y < R; ++y)
      for (std::size_t x = 0; x < R; ++x) {
        const double t = render::background_texture(
            s.background, (static_cast<double>(x) + 0.5) / Rd,
            (static_cast<double>(y) + 0.5) / Rd, phase);
        for (std::size_t c = 0; c < 3; ++c)
          s.image[(c * R + y) * R + x] = static_cast<float>(base[c] + 0.07 * t);
      }

    // Subject.
    const Family fam = cfg.families[rng() % cfg.families.size()];
    const std::size_t cls = pattern_class(fam, rng() % kStyles);
    const double frac_target = cfg.min_mask_fraction +
                               (cfg.max_mask_fraction - cfg.min_mask_fraction) * unit(rng);
    const double radius = Rd * std::sqrt(frac_target / pi);
    const double angle = unit(rng) * 2.0 * pi;
    const double reach = (Rd / 2.0 - radius) /
                         std::max(std::abs(std::cos(angle)), std::abs(std::sin(angle)));
    const double dist = unit(rng) * std::max(0.0, reach);
    const double cx = Rd / 2.0 + dist * std::cos(angle);
    const double cy = Rd / 2.0 + dist * std::sin(angle);
    const double contrast = unit(rng);
    const double centre = Rd / 2.0;
    const double blur_scale = cfg.focus_blur * Rd / 64.0;
    auto defocus = [&](double x, double y) {
      return blur_scale * std::clamp(std::hypot(x - centre, y - centre) / centre, 0.0, 1.0);
    };
    render::paint_patch(s.image, {cx, cy, radius, 0.08 + 0.37 * contrast, cls, defocus(cx, cy)},
                        &s.mask);
    double on = 0.0;
    for (float m : s.mask.data()) on += m;
    s.mask_fraction = on / (Rd * Rd);
    if (s.mask_fraction < cfg.min_mask_fraction || s.mask_fraction > cfg.max_mask_fraction)
      continue;
    s.classes.push_back(cls);

    // Distractors, kept clear of the subject disk.
    const std::size_t want = rng() % (cfg.max_distractors + 1);
    std::vector<std::array<double, 3>> placed;
    for (std::size_t k = 0; k < want; ++k) {
      const double rd = 4.0 + 3.0 * unit(rng);
      for (int tries = 0; tries < 100; ++tries) {
        const double dx = rd + (Rd - 2.0 * rd) * unit(rng);
        const double dy = rd + (Rd - 2.0 * rd) * unit(rng);
        if (std::hypot(dx - cx, dy - cy) < radius + rd + 1.5) continue;
        bool clear = true;
        for (const auto& [ox, oy, orad] : placed)
          if (std::hypot(dx - ox, dy - oy) < orad + rd + 1.0) clear = false;
        if (!clear) continue;
        placed.push_back({dx, dy, rd});
        const std::size_t dcls = static_cast<std::size_t>(rng() % kPatternClasses);
        render::paint_patch(s.image, {dx, dy, rd, 0.1 + 0.25 * unit(rng), dcls, defocus(dx, dy)},
                            nullptr);
        s.classes.push_back(dcls);
        break;
      }
    }

    if (cfg.noise > 0.0) {
      std::normal_distribution<double> g(0.0, cfg.noise);
      for (auto& v : s.image.data()) v = static_cast<float>(v + g(rng));
    }
    for (auto& v : s.image.data()) v = std::clamp(v, 0.0f, 1.0f);

    s.descriptors.centering =
        std::clamp(1.0 - std::hypot(cx - centre, cy - centre) / centre, 0.0, 1.0);
    s.descriptors.size = std::clamp(
        1.0 - std::abs(s.mask_fraction - cfg.ideal_mask_fraction) /
                  std::max(cfg.ideal_mask_fraction - cfg.min_mask_fraction,
                           cfg.max_mask_fraction - cfg.ideal_mask_fraction),
        0.0, 1.0);
    s.descriptors.contrast = contrast;
    s.descriptors.clutter =
        static_cast<double>(s.classes.size() - 1) / 3.0;
    s.score = aesthetic_rule(s.descriptors);
    s.score = std::clamp(s.score, 1.0, static_cast<double>(cfg.levels));
    s.distribution = discretized_gaussian(s.score, cfg.sigma, cfg.levels);
    if (std::abs(mean_score(s.distribution) - s.score) > cfg.max_mean_error) continue;
    return s;
  }
  throw std::runtime_error("could not satisfy corpus constraints for sample " +
                           std::to_string(id));
}

inline std::vector<SynthSample> generate_samples(const CorpusConfig& cfg, std::uint64_t seed,
                                                 std::uint64_t first_id = 0) {
  cfg.validate();
  std::vector<SynthSample> out;
  out.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) out.push_back(render_sample(cfg, first_id + i, seed));
  return out;
}

// Two-hot semantic label: subject class and background texture.
inline std::vector<float> semantic_label(const SynthSample& s) {
  std::vector<float> v(kSemanticWidth, 0.0f);
  v[s.subject_class()] = 1.0f;
  v[kPatternClasses + s.background] = 1.0f;
  return v;
}

// ---------------------------------------------------------------------------
// Resampling.

// Bilinear resize of a [C, H, W] image with half-pixel centres.
inline Tensor<float> resize_image(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3) throw std::invalid_argument("resize expects [C, H, W], got " + to_string(img.shape()));
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize target must be positive");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H == out_h && W == out_w) return img;
  Tensor<float> out(Shape{C, out_h, out_w});
  auto axis = [](std::size_t o, std::size_t in_n, std::size_t out_n) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in_n) /
                     static_cast<double>(out_n) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in_n - 1);
    return std::tuple{i0, i1, src - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = axis(y, H, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = axis(x, W, out_w);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = img.ptr() + c * H * W;
        const double top = (1.0 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1];
        const double bot = (1.0 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1];
        out[(c * out_h + y) * out_w + x] = static_cast<float>((1.0 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

// Zero-pads [C, H, W] symmetrically to pad_to x pad_to, then crops the
// centred crop_to x crop_to window.
inline Tensor<float> pad_center_crop(const Tensor<float>& img, std::size_t pad_to,
                                     std::size_t crop_to) {
  if (img.rank() != 3) throw std::invalid_argument("pad_center_crop expects [C, H, W]");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (pad_to < H || pad_to < W)
    throw std::invalid_argument("pad size " + std::to_string(pad_to) + " smaller than image");
  if (crop_to == 0 || crop_to > pad_to)
    throw std::invalid_argument("crop size " + std::to_string(crop_to) +
                                " larger than padded size " + std::to_string(pad_to));
  const std::size_t top = (pad_to - H) / 2, left = (pad_to - W) / 2;
  const std::size_t off = (pad_to - crop_to) / 2;
  Tensor<float> out(Shape{C, crop_to, crop_to});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < crop_to; ++y)
      for (std::size_t x = 0; x < crop_to; ++x) {
        const long sy = static_cast<long>(y + off) - static_cast<long>(top);
        const long sx = static_cast<long>(x + off) - static_cast<long>(left);
        if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
        out[(c * crop_to + y) * crop_to + x] =
            img[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
      }
  return out;
}

// ---------------------------------------------------------------------------
// Splits.

struct SplitSpec {
  enum class Scheme { fixed, cross_validation };
  Scheme scheme = Scheme::fixed;
  std::size_t folds = 1;
  std::size_t test_size = 400;
  std::uint64_t seed = 0;
};

struct Fold {
  std::vector<std::uint64_t> train, test;
};

// Shuffles ids under the seed; fold k tests on the k-th block of test_size
// ids and trains on everything else. For cross validation with
// test_size == 0 the ids are dealt into k near-equal folds.
inline std::vector<Fold> make_splits(std::vector<std::uint64_t> ids, const SplitSpec& spec) {
  const std::size_t k = spec.scheme == SplitSpec::Scheme::fixed ? 1 : spec.folds;
  if (k == 0) throw std::invalid_argument("need at least one fold");
  std::set<std::uint64_t> uniq(ids.begin(), ids.end());
  if (uniq.size() != ids.size()) throw std::invalid_argument("duplicate sample ids");
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(mix_seed(spec.seed, 0x5911));
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t n = ids.size();
  std::vector<std::size_t> sizes(k);
  if (spec.test_size == 0) {
    if (k < 2 || k > n) throw std::invalid_argument("infeasible fold count " + std::to_string(k));
    for (std::size_t f = 0; f < k; ++f) sizes[f] = n / k + (f < n % k ? 1 : 0);
  } else {
    if (k * spec.test_size > n || (k == 1 && spec.test_size >= n))
      throw std::invalid_argument(std::to_string(k) + " folds of " + std::to_string(spec.test_size) +
                                  " do not fit " + std::to_string(n) + " samples");
    std::fill(sizes.begin(), sizes.end(), spec.test_size);
  }
  std::vector<Fold> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<bool> in_test(n, false);
    for (std::size_t i = pos; i < pos + sizes[f]; ++i) in_test[i] = true;
    for (std::size_t i = 0; i < n; ++i) (in_test[i] ? folds[f].test : folds[f].train).push_back(ids[i]);
    pos += sizes[f];
    std::sort(folds[f].train.begin(), folds[f].train.end());
    std::sort(folds[f].test.begin(), folds[f].test.end());
  }
  return folds;
}

inline void tag_splits(std::vector<SynthSample>& samples, const std::vector<Fold>& folds) {
  std::map<std::uint64_t, SynthSample*> by_id;
  for (auto& s : samples) by_id[s.id] = &s;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::string prefix = folds.size() == 1 ? "" : "fold" + std::to_string(f) + ":";
    for (auto id : folds[f].train) by_id.at(id)->split_tags.push_back(prefix + "train");
    for (auto id : folds[f].test) by_id.at(id)->split_tags.push_back(prefix + "test");
  }
}

// ---------------------------------------------------------------------------
// Manifest (JSON lines) and on-disk corpus.

struct ManifestRecord {
  std::uint64_t id = 0;
  std::string image_path, mask_path;
  std::vector<std::size_t> classes;
  std::string category;
  double score = 0.0;
  std::vector<double> distribution;
  std::vector<std::string> split_tags;
  std::size_t background = 0;
};

inline nlohmann::json to_json(const ManifestRecord& r) {
  return {{"id", r.id},         {"image_path", r.image_path},
          {"mask_path", r.mask_path}, {"classes", r.classes},
          {"category", r.category},   {"score", r.score},
          {"distribution", r.distribution}, {"split_tags", r.split_tags},
          {"background", r.background}};
}

inline ManifestRecord manifest_record_from_json(const nlohmann::json& j) {
  ManifestRecord r;
  r.id = j.at("id").get<std::uint64_t>();
  r.image_path = j.at("image_path").get<std::string>();
  r.mask_path = j.at("mask_path").get<std::string>();
  r.classes = j.at("classes").get<std::vector<std::size_t>>();
  r.category = j.at("category").get<std::string>();
  r.score = j.at("score").get<double>();
  r.distribution = j.at("distribution").get<std::vector<double>>();
  r.split_tags = j.at("split_tags").get<std::vector<std::string>>();
  r.background = j.value("background", std::size_t{0});
  return r;
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::set<std::uint64_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(manifest_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen.insert(out.back().id).second)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": duplicate id " +
                               std::to_string(out.back().id));
  }
  return out;
}

// Writes images/<id>.ten, masks/<id>.ten and manifest.jsonl under dir.
inline void write_corpus(const std::filesystem::path& dir, const std::vector<SynthSample>& samples) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::ostringstream manifest;
  for (const auto& s : samples) {
    ManifestRecord r;
    r.id = s.id;
    r.image_path = "images/" + std::to_string(s.id) + ".ten";
    r.mask_path = "masks/" + std::to_string(s.id) + ".ten";
    save_tensor(dir / r.image_path, s.image);
    save_tensor(dir / r.mask_path, s.mask);
    r.classes = s.classes;
    r.category = std::string(family_name(s.category()));
    r.score = s.score;
    r.distribution = s.distribution.mass();
    r.split_tags = s.split_tags;
    r.background = s.background;
    manifest << to_json(r).dump() << '\n';
  }
  write_file(dir / "manifest.jsonl", manifest.str());
}

inline std::vector<SynthSample> read_corpus(const std::filesystem::path& dir) {
  const auto records = read_manifest(dir / "manifest.jsonl");
  std::vector<SynthSample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    for (const auto& rel : {r.image_path, r.mask_path})
      if (!std::filesystem::exists(dir / rel))
        throw std::runtime_error("manifest references missing file " + (dir / rel).string());
    SynthSample s;
    s.id = r.id;
    s.image = load_tensor(dir / r.image_path);
    s.mask = load_tensor(dir / r.mask_path);
    s.classes = r.classes;
    s.background = r.background;
    s.score = r.score;
    s.distribution = RatingDistribution::normalized(std::span<const double>(r.distribution));
    s.split_tags = r.split_tags;
    double on = 0.0;
    for (float m : s.mask.data()) on += m;
    s.mask_fraction = on / static_cast<double>(s.mask.size());
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// External features.

// Row-major feature bank keyed by sample id. May be empty.
struct FeatureBank {
  std::vector<std::uint64_t> ids;
  std::size_t dim = 0;
  std::vector<float> values;

  std::size_t size() const noexcept { return ids.size(); }
  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(values).subspan(i * dim, dim);
  }
  void push_back(std::uint64_t id, std::span<const float> v) {
    if (ids.empty() && dim == 0) dim = v.size();
    if (v.size() != dim)
      throw std::invalid_argument("feature width " + std::to_string(v.size()) +
                                  " differs from bank width " + std::to_string(dim));
    ids.push_back(id);
    values.insert(values.end(), v.begin(), v.end());
  }
  // Rows for the given ids in that order.
  FeatureBank select(std::span<const std::uint64_t> want) const {
    std::map<std::uint64_t, std::size_t> pos;
    for (std::size_t i = 0; i < ids.size(); ++i) pos[ids[i]] = i;
    FeatureBank out;
    out.dim = dim;
    for (auto id : want) {
      auto it = pos.find(id);
      if (it == pos.end()) throw std::invalid_argument("feature bank has no id " + std::to_string(id));
      out.push_back(id, row(it->second));
    }
    return out;
  }
  friend bool operator==(const FeatureBank&, const FeatureBank&) = default;
};

struct LabelledFeatures {
  FeatureBank features;
  std::vector<RatingDistribution> labels;
};

// Label table: header "id,<n columns>", then one row per id holding either
// vote counts or probabilities; both are normalised.
inline std::map<std::uint64_t, RatingDistribution> parse_label_table(std::string_view csv) {
  std::map<std::uint64_t, RatingDistribution> out;
  std::istringstream in{std::string(csv)};
  std::string line;
  std::size_t lineno = 0, width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (lineno == 1) {
      if (cells.empty() || cells[0] != "id")
        throw std::invalid_argument("label table header must start with 'id'");
      width = cells.size() - 1;
      if (width < 2) throw std::invalid_argument("label table needs at least two levels");
      continue;
    }
    if (cells.size() != width + 1)
      throw std::invalid_argument("label table line " + std::to_string(lineno) + " has " +
                                  std::to_string(cells.size()) + " cells, expected " +
                                  std::to_string(width + 1));
    std::uint64_t id = 0;
    auto [p, ec] = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), id);
    if (ec != std::errc{} || p != cells[0].data() + cells[0].size())
      throw std::invalid_argument("bad id on label table line " + std::to_string(lineno));
    std::vector<double> row;
    for (std::size_t k = 1; k < cells.size(); ++k) {
      try {
        row.push_back(std::stod(cells[k]));
      } catch (const std::exception&) {
        throw std::invalid_argument("bad value on label table line " + std::to_string(lineno));
      }
    }
    if (!out.emplace(id, RatingDistribution::normalized(std::span<const double>(row))).second)
      throw std::invalid_argument("duplicate id " + std::to_string(id) + " in label table");
  }
  return out;
}

// Aligns bank rows with label rows (output in ascending id order). Feature
// ids without a label row are reported together.
inline LabelledFeatures import_external_features(
    const FeatureBank& bank, const std::map<std::uint64_t, RatingDistribution>& labels) {
  std::vector<std::size_t> order(bank.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return bank.ids[a] < bank.ids[b]; });
  std::vector<std::uint64_t> orphans;
  for (auto id : bank.ids)
    if (!labels.count(id)) orphans.push_back(id);
  if (!orphans.empty()) {
    std::sort(orphans.begin(), orphans.end());
    std::string list;
    for (auto id : orphans) list += (list.empty() ? "" : ",") + std::to_string(id);
    throw std::invalid_argument("feature ids without labels: " + list);
  }
  LabelledFeatures out;
  out.features.dim = bank.dim;
  for (auto i : order) {
    out.features.push_back(bank.ids[i], bank.row(i));
    out.labels.push_back(labels.at(bank.ids[i]));
  }
  return out;
}

}  // namespace aeskd
