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

#include <filesystem>
#include <map>
#include <random>
#include <set>

#include <unistd.h>

#include "aeskd/io.hpp"
#include "aeskd/synthcorpus.hpp"
#include "test_util.hpp"

using namespace aeskd;
namespace fs = std::filesystem;

namespace {

const std::vector<SynthSample>& default_corpus() {
  static const auto samples = generate_samples(CorpusConfig{}, 7);
  return samples;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("aeskd_synth_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::vector<std::uint64_t> iota_ids(std::size_t n) {
  std::vector<std::uint64_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

TEST(AestheticRule, Examples) {
  EXPECT_DOUBLE_EQ(aesthetic_rule({1.0, 1.0, 1.0, 0.0}), 10.0);
  EXPECT_DOUBLE_EQ(aesthetic_rule({0.0, 0.0, 0.0, 1.0}), 1.0);
  EXPECT_NEAR(aesthetic_rule({0.5, 1.0, 0.5, 0.0}), 7.3, 1e-12);
}

TEST(AestheticRule, RejectsOutOfRangeDescriptors) {
  EXPECT_THROW(aesthetic_rule({1.1, 0.0, 0.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(aesthetic_rule({0.0, 0.0, 0.0, -0.2}), std::invalid_argument);
}

TEST(Config, InfeasibleSettingsAreRejected) {
  CorpusConfig c;
  c.min_mask_fraction = 0.3;
  c.max_mask_fraction = 0.2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.sigma = 0.0;
  EXPECT_THROW(generate_samples(c, 1), std::invalid_argument);
  c = {};
  c.families.clear();
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.small_resolution = 128;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Generate, SameSeedIsByteIdentical) {
  CorpusConfig c;
  c.count = 40;
  auto a = generate_samples(c, 3), b = generate_samples(c, 3);
  auto da = scratch("a"), db = scratch("b");
  write_corpus(da, a);
  write_corpus(db, b);
  EXPECT_EQ(read_file(da / "manifest.jsonl"), read_file(db / "manifest.jsonl"));
  for (const auto& s : a) {
    const auto rel = "images/" + std::to_string(s.id) + ".ten";
    ASSERT_EQ(read_file(da / rel), read_file(db / rel));
  }
  auto other = generate_samples(c, 4);
  EXPECT_NE(encode_tensor(a[0].image), encode_tensor(other[0].image));
  fs::remove_all(da);
  fs::remove_all(db);
}

TEST(Generate, ThousandSamplesSatisfyInvariants) {
  CorpusConfig c;
  c.count = 1000;
  auto samples = generate_samples(c, 11);
  ASSERT_EQ(samples.size(), 1000u);
  std::set<std::uint64_t> ids;
  for (const auto& s : samples) {
    ids.insert(s.id);
    ASSERT_EQ(s.image.shape(), (Shape{3, 64, 64}));
    ASSERT_EQ(s.mask.shape(), (Shape{64, 64}));
    double on = 0.0;
    for (float m : s.mask.data()) {
      ASSERT_TRUE(m == 0.0f || m == 1.0f);
      on += m;
    }
    const double frac = on / 4096.0;
    EXPECT_GE(frac, 0.10);
    EXPECT_LE(frac, 0.30);
    EXPECT_NEAR(frac, s.mask_fraction, 1e-12);
    EXPECT_GE(s.score, 1.0);
    EXPECT_LE(s.score, 10.0);
    EXPECT_LE(std::abs(mean_score(s.distribution) - s.score), 0.1);
    EXPECT_GE(s.classes.size(), 1u);
    EXPECT_LE(s.classes.size(), 4u);
    for (float v : s.image.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    auto sem = semantic_label(s);
    EXPECT_EQ(std::count(sem.begin(), sem.end(), 1.0f), 2);
    EXPECT_EQ(std::count(sem.begin(), sem.end(), 0.0f), static_cast<long>(kSemanticWidth - 2));
  }
  EXPECT_EQ(ids.size(), 1000u);
}

TEST(Generate, ScoresSpreadOverManyBins) {
  std::set<int> bins;
  for (const auto& s : default_corpus()) bins.insert(static_cast<int>(std::floor(s.score)));
  EXPECT_GE(bins.size(), 6u);
}

TEST(Generate, LabelsAreAbstractOverContent) {
  std::map<int, std::set<Family>> families;
  std::map<int, int> counts;
  for (const auto& s : default_corpus()) {
    const int bin = static_cast<int>(std::floor(s.score));
    families[bin].insert(s.category());
    ++counts[bin];
  }
  for (const auto& [bin, n] : counts)
    if (n >= 10) EXPECT_GE(families[bin].size(), 3u) << "score bin " << bin;
}

TEST(Generate, SubjectFamilySubsetIsRespected) {
  CorpusConfig c;
  c.count = 60;
  c.families = {Family::circle, Family::cross};
  for (const auto& s : generate_samples(c, 2))
    EXPECT_TRUE(s.category() == Family::circle || s.category() == Family::cross);
}

TEST(Resize, Examples) {
  std::mt19937_64 rng(1);
  auto img = testing_util::random_tensor<float>(rng, {3, 64, 64}, 0, 1);
  EXPECT_EQ(resize_image(img, 64, 64), img);
  auto padded = pad_center_crop(img, 80, 80);
  EXPECT_EQ(padded.shape(), (Shape{3, 80, 80}));
  EXPECT_EQ(pad_center_crop(padded, 80, 64), img);
  EXPECT_EQ(pad_center_crop(img, 80, 64), img);
  Tensor<float> flat(Shape{3, 64, 64}, 0.37f);
  const auto shrunk = resize_image(flat, 32, 32);
  for (float v : shrunk.data()) EXPECT_NEAR(v, 0.37f, 1e-6);
  EXPECT_THROW(pad_center_crop(img, 80, 96), std::invalid_argument);
  EXPECT_THROW(pad_center_crop(img, 48, 32), std::invalid_argument);
}

TEST(Splits, FixedSplit) {
  auto folds = make_splits(iota_ids(100), {SplitSpec::Scheme::fixed, 1, 20, 5});
  ASSERT_EQ(folds.size(), 1u);
  EXPECT_EQ(folds[0].test.size(), 20u);
  EXPECT_EQ(folds[0].train.size(), 80u);
}

TEST(Splits, TwelveDisjointFoldsCoverTheCorpus) {
  auto folds = make_splits(iota_ids(1200), {SplitSpec::Scheme::cross_validation, 12, 100, 9});
  ASSERT_EQ(folds.size(), 12u);
  std::multiset<std::uint64_t> all;
  for (const auto& f : folds) {
    EXPECT_EQ(f.test.size(), 100u);
    std::set<std::uint64_t> test(f.test.begin(), f.test.end());
    for (auto id : f.train) ASSERT_FALSE(test.count(id));
    all.insert(f.test.begin(), f.test.end());
  }
  EXPECT_EQ(all.size(), 1200u);
  EXPECT_EQ(std::set<std::uint64_t>(all.begin(), all.end()).size(), 1200u);
}

TEST(Splits, NearEqualFoldsAndDeterminism) {
  const SplitSpec spec{SplitSpec::Scheme::cross_validation, 7, 0, 3};
  auto folds = make_splits(iota_ids(100), spec);
  std::size_t lo = 1000, hi = 0;
  for (const auto& f : folds) {
    lo = std::min(lo, f.test.size());
    hi = std::max(hi, f.test.size());
  }
  EXPECT_LE(hi - lo, 1u);
  auto again = make_splits(iota_ids(100), spec);
  for (std::size_t k = 0; k < folds.size(); ++k) EXPECT_EQ(folds[k].test, again[k].test);
}

TEST(Splits, InfeasibleRequestsAreRejected) {
  EXPECT_THROW(make_splits(iota_ids(100), {SplitSpec::Scheme::cross_validation, 12, 10, 0}),
               std::invalid_argument);
  EXPECT_THROW(make_splits(iota_ids(5), {SplitSpec::Scheme::cross_validation, 6, 0, 0}), std::invalid_argument);
  EXPECT_THROW(make_splits({1, 1, 2}, {SplitSpec::Scheme::fixed, 1, 1, 0}), std::invalid_argument);
}

TEST(Manifest, RoundTripAndMissingFile) {
  CorpusConfig c;
  c.count = 12;
  auto samples = generate_samples(c, 21);
  tag_splits(samples, make_splits(iota_ids(12), {SplitSpec::Scheme::fixed, 1, 4, 0}));
  auto dir = scratch("manifest");
  write_corpus(dir, samples);
  auto back = read_corpus(dir);
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(back[i].id, samples[i].id);
    EXPECT_EQ(back[i].image, samples[i].image);
    EXPECT_EQ(back[i].mask, samples[i].mask);
    EXPECT_EQ(back[i].classes, samples[i].classes);
    EXPECT_EQ(back[i].split_tags, samples[i].split_tags);
    EXPECT_DOUBLE_EQ(back[i].score, samples[i].score);
  }
  fs::remove(dir / "masks" / (std::to_string(samples[3].id) + ".ten"));
  EXPECT_THROW(read_corpus(dir), std::runtime_error);
  fs::remove_all(dir);
}

TEST(ExternalFeatures, Examples) {
  const std::string csv = "id,c1,c2,c3\n5,1,1,2\n3,0.2,0.3,0.5\n9,0,0,4\n";
  auto labels = parse_label_table(csv);
  ASSERT_EQ(labels.size(), 3u);
  EXPECT_DOUBLE_EQ(labels.at(5)[2], 0.5);

  auto empty = import_external_features(FeatureBank{}, labels);
  EXPECT_EQ(empty.features.size(), 0u);

  FeatureBank bank;
  const float a[2] = {1, 2}, b[2] = {3, 4}, c[2] = {5, 6};
  bank.push_back(9, a);
  bank.push_back(3, b);
  bank.push_back(5, c);
  FeatureBank permuted;
  permuted.push_back(5, c);
  permuted.push_back(9, a);
  permuted.push_back(3, b);
  auto x = import_external_features(bank, labels), y = import_external_features(permuted, labels);
  EXPECT_EQ(x.features, y.features);
  EXPECT_EQ(x.labels, y.labels);
  EXPECT_EQ(x.features.ids, (std::vector<std::uint64_t>{3, 5, 9}));

  bank.push_back(11, a);
  bank.push_back(12, b);
  try {
    import_external_features(bank, labels);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("11,12"), std::string::npos);
  }
}

TEST(ExternalFeatures, MalformedTablesAreRejected) {
  EXPECT_THROW(parse_label_table("key,a,b\n1,1,1\n"), std::invalid_argument);
  EXPECT_THROW(parse_label_table("id,a,b\n1,1\n"), std::invalid_argument);
  EXPECT_THROW(parse_label_table("id,a,b\n1,1,1\n1,2,2\n"), std::invalid_argument);
  EXPECT_THROW(parse_label_table("id,a,b\n1,0,0\n"), std::invalid_argument);
}
