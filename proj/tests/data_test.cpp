#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "cfsl/data/episodes.hpp"
#include "test_util.hpp"

namespace cfsl::data {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("cfsl_data_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SynthSpec small_spec(double difficulty = 0.2) {
  SynthSpec s;
  s.n_classes = 4;
  s.per_class = 6;
  s.image_size = 12;
  s.difficulty = difficulty;
  s.seed = 3;
  return s;
}

// ---- synthetic data -------------------------------------------------------------

TEST(Synth, ZeroDifficultyMakesClassImagesIdentical) {
  auto split = synth_dataset(small_spec(0.0));
  auto groups = split.indices_by_class();
  for (const auto& g : groups) {
    for (auto i : g) {
      auto a = split.image(g[0]), b = split.image(i);
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST(Synth, SameSeedSameDataset) {
  auto a = synth_dataset(small_spec()), b = synth_dataset(small_spec());
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(Synth, PixelsInUnitRangeAndClassesDisjointAcrossSplits) {
  auto train = synth_dataset(small_spec());
  auto test_spec = small_spec();
  test_spec.first_class = 4;
  test_spec.role = "test";
  auto test = synth_dataset(test_spec);
  for (double v : train.pixels) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  EXPECT_NO_THROW(require_disjoint(train, test));
  EXPECT_THROW(require_disjoint(train, train), DataError);
}

// Nearest class mean in raw pixel space, fitted on half the images.
TEST(Synth, PixelCentroidClassifierSeparatesClasses) {
  SynthSpec spec;
  spec.n_classes = 8;
  spec.per_class = 60;
  spec.image_size = 32;
  spec.difficulty = 0.2;
  spec.seed = 11;
  auto split = synth_dataset(spec);
  const std::size_t dim = split.image_numel();
  std::vector<std::vector<double>> centroids(8, std::vector<double>(dim, 0.0));
  auto groups = split.indices_by_class();
  for (std::size_t k = 0; k < 8; ++k) {
    for (std::size_t j = 0; j < 30; ++j) {
      auto img = split.image(groups[k][j]);
      for (std::size_t d = 0; d < dim; ++d) centroids[k][d] += img[d] / 30.0;
    }
  }
  std::size_t correct = 0, total = 0;
  for (std::size_t k = 0; k < 8; ++k) {
    for (std::size_t j = 30; j < 60; ++j) {
      auto img = split.image(groups[k][j]);
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t c = 0; c < 8; ++c) {
        double dist = 0.0;
        for (std::size_t d = 0; d < dim; ++d) dist += (img[d] - centroids[c][d]) * (img[d] - centroids[c][d]);
        if (dist < best_d) best_d = dist, best = c;
      }
      correct += best == k;
      ++total;
    }
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(total), 0.95);
}

// ---- manifests ------------------------------------------------------------------

TEST(Manifest, RoundTripReproducesTensors) {
  auto dir = scratch_dir("roundtrip");
  auto split = synth_dataset(small_spec());
  save_split(split, dir / "train.json");
  auto loaded = load_split(dir / "train.json", 6);
  EXPECT_EQ(loaded.pixels, split.pixels);
  EXPECT_EQ(loaded.labels, split.labels);
  EXPECT_EQ(loaded.class_names, split.class_names);
  EXPECT_EQ(loaded.height, 12u);
}

TEST(Manifest, EmptySplitIsReported) {
  auto dir = scratch_dir("empty");
  std::ofstream(dir / "m.json") << R"({"role":"train","channels":3,"height":4,"width":4,"classes":[]})";
  try {
    load_split(dir / "m.json");
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kEmptySplit);
    EXPECT_NE(std::string(e.what()).find("empty split"), std::string::npos);
  }
}

TEST(Manifest, SmallClassIsNamed) {
  auto dir = scratch_dir("small");
  auto split = synth_dataset(small_spec());
  save_split(split, dir / "train.json");
  try {
    load_split(dir / "train.json", 7);  // K + Q = 7 > 6 images per class
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kClassTooSmall);
    EXPECT_NE(std::string(e.what()).find("class_0"), std::string::npos);
  }
}

TEST(Manifest, MissingFileAndLabelGapAreDistinct) {
  auto dir = scratch_dir("broken");
  auto split = synth_dataset(small_spec());
  save_split(split, dir / "train.json");
  fs::remove(dir / "train_class_2.epct");
  try {
    load_split(dir / "train.json");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kMissingFile);
  }
  std::ofstream(dir / "gap.json")
      << R"({"channels":3,"height":12,"width":12,"classes":[{"name":"a","label":0,"file":"x","count":1},)"
      << R"({"name":"b","label":2,"file":"y","count":1}]})";
  try {
    load_split(dir / "gap.json");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kLabelGap);
  }
  try {
    load_split(dir / "nope.json");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kMissingFile);
  }
}

// ---- augmentation ---------------------------------------------------------------

ImageView view_of(const DatasetSplit& s, std::size_t i) { return {s.image(i), s.channels, s.height, s.width}; }

TEST(Augment, IdentityPolicyIsExactIdentity) {
  auto split = synth_dataset(small_spec());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto out = augment(view_of(split, 3), AugmentPolicy::identity(), seed);
    auto in = split.image(3);
    EXPECT_TRUE(std::equal(out.begin(), out.end(), in.begin()));
  }
}

TEST(Augment, FlipTwiceRestoresImage) {
  auto split = synth_dataset(small_spec());
  auto in = split.image(1);
  std::vector<double> img(in.begin(), in.end());
  flip_horizontal(img, 3, 12, 12);
  EXPECT_FALSE(std::equal(img.begin(), img.end(), in.begin()));
  flip_horizontal(img, 3, 12, 12);
  EXPECT_TRUE(std::equal(img.begin(), img.end(), in.begin()));
}

TEST(Augment, PreservesShapeAndRangeAndIsDeterministic) {
  auto split = synth_dataset(small_spec());
  for (const auto& policy : {AugmentPolicy::standard(), AugmentPolicy::simclr()}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto a = augment(view_of(split, seed % split.size()), policy, seed);
      auto b = augment(view_of(split, seed % split.size()), policy, seed);
      ASSERT_EQ(a.size(), split.image_numel());
      EXPECT_EQ(a, b);
      for (double v : a) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
}

TEST(Augment, CropStaysInsideImage) {
  Rng rng(4);
  auto p = AugmentPolicy::simclr();
  for (int i = 0; i < 500; ++i) {
    auto box = sample_crop(12, 20, p, rng);
    ASSERT_GT(box.height, 0u);
    ASSERT_LE(box.top + box.height, 12u);
    ASSERT_LE(box.left + box.width, 20u);
  }
}

TEST(Augment, GrayscaleEqualizesChannels) {
  std::vector<double> img{0.1, 0.9, 0.5, 0.2, 0.3, 0.4};  // 3 channels × 2 pixels
  to_grayscale(img, 3);
  EXPECT_DOUBLE_EQ(img[0], img[2]);
  EXPECT_DOUBLE_EQ(img[0], img[4]);
  EXPECT_NEAR(img[0], 0.299 * 0.1 + 0.587 * 0.5 + 0.114 * 0.3, 1e-15);
}

// Bitwise regression against shipped outputs. Set CFSL_WRITE_GOLDENS=1 to
// regenerate after an intentional change to the augmentation pipeline.
TEST(Augment, MatchesGoldenOutputs) {
  auto split = synth_dataset(small_spec());
  std::vector<double> produced;
  for (const auto& policy : {AugmentPolicy::standard(), AugmentPolicy::simclr()}) {
    for (std::uint64_t seed : {1u, 7u, 42u}) {
      auto img = augment(view_of(split, seed % split.size()), policy, seed);
      produced.insert(produced.end(), img.begin(), img.end());
    }
  }
  const Tensor current({6, 3, 12, 12}, produced);
  const std::string path = std::string(CFSL_FIXTURE_DIR) + "/augment_golden.epct";
  if (std::getenv("CFSL_WRITE_GOLDENS")) save_tensor(path, current);
  Tensor golden = load_tensor(path);
  ASSERT_EQ(golden.shape(), current.shape());
  for (std::size_t i = 0; i < golden.numel(); ++i) ASSERT_EQ(golden.data()[i], current.data()[i]) << "index " << i;
}

// ---- episodes -------------------------------------------------------------------

TEST(Episodes, OnlyValidAssignmentOnTinySplit) {
  DatasetSplit split;
  split.channels = 1;
  split.height = split.width = 1;
  split.class_names = {"only"};
  split.append(std::vector<double>{0.1}, 0);
  split.append(std::vector<double>{0.2}, 0);
  EpisodeSampler sampler(split, {1, 1, 1});
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto e = sampler.sample(s);
    ASSERT_EQ(e.support.size(), 1u);
    ASSERT_EQ(e.query.size(), 1u);
    EXPECT_NE(e.support[0], e.query[0]);
    seen.insert({e.support[0], e.query[0]});
  }
  EXPECT_LE(seen.size(), 2u);
}

TEST(Episodes, SameSeedSameEpisode) {
  auto split = synth_dataset(small_spec());
  EpisodeSampler sampler(split, {3, 2, 2});
  auto a = sampler.sample(99), b = sampler.sample(99);
  EXPECT_EQ(a.support, b.support);
  EXPECT_EQ(a.query, b.query);
  EXPECT_EQ(a.classes, b.classes);
}

TEST(Episodes, InsufficientSamplesIsAnError) {
  auto split = synth_dataset(small_spec());
  EXPECT_THROW(EpisodeSampler(split, {3, 3, 4}), DataError);
  EXPECT_THROW(EpisodeSampler(split, {5, 1, 1}), DataError);
}

TEST(Episodes, SupportAndQueryDisjointWithExactCounts) {
  auto split = synth_dataset(small_spec());
  EpisodeSampler sampler(split, {3, 2, 3});
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto e = sampler.sample(s);
    std::set<std::size_t> all(e.support.begin(), e.support.end());
    all.insert(e.query.begin(), e.query.end());
    ASSERT_EQ(all.size(), 15u);
    for (std::size_t i = 0; i < e.support.size(); ++i) {
      ASSERT_EQ(e.support_labels[i], i / 2);
      ASSERT_EQ(split.labels[e.support[i]], e.classes[e.support_labels[i]]);
    }
    for (std::size_t i = 0; i < e.query.size(); ++i) {
      ASSERT_EQ(e.query_labels[i], i / 3);
      ASSERT_EQ(split.labels[e.query[i]], e.classes[e.query_labels[i]]);
    }
  }
}

// Each class is picked with probability M/num_classes per episode; counts over
// 10⁴ episodes must lie within 3σ of the binomial expectation.
TEST(Episodes, ClassSelectionIsUniform) {
  SynthSpec spec = small_spec();
  spec.n_classes = 8;
  spec.per_class = 2;
  auto split = synth_dataset(spec);
  EpisodeSampler sampler(split, {5, 1, 1});
  constexpr std::size_t kEpisodes = 10000;
  std::vector<std::size_t> counts(8, 0);
  for (std::uint64_t s = 0; s < kEpisodes; ++s) {
    for (auto c : sampler.sample(derive_seed({17, s})).classes) ++counts[c];
  }
  const double p = 5.0 / 8.0;
  const double mean = kEpisodes * p, sd = std::sqrt(kEpisodes * p * (1 - p));
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_LT(std::abs(static_cast<double>(counts[k]) - mean), 3 * sd) << "class " << k;
  }
}

TEST(ViewedEpisode, IdentityViewsEqualBaseEpisode) {
  auto split = synth_dataset(small_spec());
  EpisodeSampler sampler(split, {3, 1, 2});
  auto e = sampler.sample(5);
  auto v = make_viewed_episode(split, e, AugmentPolicy::identity(), AugmentPolicy::identity(), {1, 2});
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(testing::to_vector(v.support[r]), testing::to_vector(split.images(e.support)));
    EXPECT_EQ(testing::to_vector(v.query[r]), testing::to_vector(split.images(e.query)));
  }
}

TEST(ViewedEpisode, ViewsShareLabelsButDifferInPixels) {
  auto split = synth_dataset(small_spec());
  EpisodeSampler sampler(split, {3, 1, 2});
  auto e = sampler.sample(6);
  auto v = make_viewed_episode(split, e, AugmentPolicy::standard(), AugmentPolicy::simclr(), {10, 11});
  EXPECT_EQ(v.support[0].shape(), v.support[1].shape());
  EXPECT_NE(testing::to_vector(v.query[0]), testing::to_vector(v.query[1]));
  EXPECT_EQ(v.episode.support_labels, e.support_labels);
}

}  // namespace
}  // namespace cfsl::data
