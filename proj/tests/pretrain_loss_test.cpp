#include <gtest/gtest.h>

#include <cmath>

#include "cfsl/losses/pretrain.hpp"
#include "cfsl/tensor/gradcheck.hpp"
#include "oracle_bridge.hpp"
#include "test_util.hpp"

namespace cfsl::losses {
namespace {

using testing::random_tensor;

// Random heads for C-channel maps and D-dimensional projections.
struct Heads {
  model::SpatialHeads spatial;
  model::VecMapHead vecmap;
  model::ProjectionHead proj;

  Heads(std::size_t c, std::size_t d, Rng& rng) : spatial(c, d, rng), vecmap(c, d, rng), proj(c, 2 * c, d, rng) {}
  LocalHeads view() const { return {spatial, vecmap, proj}; }
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const model::Module* m : {static_cast<const model::Module*>(&spatial),
                                   static_cast<const model::Module*>(&vecmap),
                                   static_cast<const model::Module*>(&proj)}) {
      for (auto& p : m->parameters()) out.push_back(p);
    }
    return out;
  }
};

AugmentedBatch random_batch(std::size_t n, std::size_t c, std::size_t d, Rng& rng,
                            std::vector<std::size_t> sample_labels = {}) {
  AugmentedBatch b;
  b.z = random_tensor({2 * n, d}, rng, true);
  b.maps = random_tensor({2 * n, c, 2, 2}, rng, true);
  b.pair = AugmentedBatch::split_halves_pairing(n);
  if (sample_labels.empty()) sample_labels.assign(n, 0);
  for (int half = 0; half < 2; ++half) b.labels.insert(b.labels.end(), sample_labels.begin(), sample_labels.end());
  return b;
}

// Regular tetrahedron: every pairwise cosine is −1/3.
Tensor tetrahedron() { return Tensor({4, 3}, {1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1}); }

void set_identity(model::Linear& l) {
  auto w = l.weight.mutable_data();
  const std::size_t n = l.in_features();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (i / n == i % n) ? 1.0 : 0.0;
  if (l.bias.defined()) std::fill(l.bias.mutable_data().begin(), l.bias.mutable_data().end(), 0.0);
}

// Random orthogonal matrix by Gram–Schmidt.
Tensor random_orthogonal(std::size_t d, Rng& rng) {
  std::vector<std::vector<double>> q;
  while (q.size() < d) {
    std::vector<double> v(d);
    for (auto& x : v) x = normal(rng);
    for (const auto& u : q) {
      double p = 0.0;
      for (std::size_t i = 0; i < d; ++i) p += u[i] * v[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= p * u[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    q.push_back(v);
  }
  std::vector<double> flat;
  for (const auto& r : q) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor({d, d}, flat);
}

// ---- batch validation ----------------------------------------------------

TEST(AugmentedBatch, SplitHalvesIsFixedPointFreeInvolution) {
  auto p = AugmentedBatch::split_halves_pairing(3);
  EXPECT_EQ(p, (std::vector<std::size_t>{3, 4, 5, 0, 1, 2}));
}

TEST(AugmentedBatch, RejectsMalformedPairing) {
  Rng rng(1);
  auto b = random_batch(2, 3, 4, rng);
  b.pair = {0, 3, 2, 1};
  EXPECT_THROW(b.validate(), InvariantError);
  b = random_batch(2, 3, 4, rng, {0, 1});
  b.labels[2] = 1;
  EXPECT_THROW(b.validate(), InvariantError);
}

TEST(AugmentedBatch, DegenerateBatchIsRejected) {
  AugmentedBatch b;
  b.z = Tensor::zeros({0, 3});
  EXPECT_THROW(global_ss_loss(b, 0.1), InvariantError);
}

// ---- global self-supervised ----------------------------------------------

TEST(GlobalSS, SinglePairIsExactlyZero) {
  Rng rng(2);
  auto b = random_batch(1, 3, 4, rng);
  EXPECT_EQ(global_ss_loss(b, 0.1).item(), 0.0);
}

TEST(GlobalSS, EqualCosinesGiveFourLogThree) {
  AugmentedBatch b;
  b.z = tetrahedron();
  b.pair = AugmentedBatch::split_halves_pairing(2);
  b.labels = {0, 1, 0, 1};
  EXPECT_NEAR(global_ss_loss(b, 0.1).item(), 4.0 * std::log(3.0), 1e-9);
}

TEST(GlobalSS, MatchesDoubleSummationOracle) {
  Rng rng(3);
  auto b = random_batch(2, 3, 3, rng);
  const double expected = oracle::global_ss(testing::rows(b.z), b.pair, 0.1);
  EXPECT_NEAR(global_ss_loss(b, 0.1).item(), expected, 1e-9);
}

TEST(GlobalSS, MeanReductionDividesByViewCount) {
  Rng rng(4);
  auto b = random_batch(3, 3, 4, rng);
  EXPECT_NEAR(global_ss_loss(b, 0.2, LossReduction::kMean).item(), global_ss_loss(b, 0.2).item() / 6.0, 1e-12);
}

TEST(GlobalSS, LossDecreasesWithTemperatureWhenPositivesDominate) {
  AugmentedBatch b;
  // Pairs are near-identical; different pairs nearly orthogonal.
  b.z = Tensor({4, 3}, {1, 0, 0, 0, 1, 0.1, 1, 0.05, 0, 0.1, 1, 0});
  b.pair = AugmentedBatch::split_halves_pairing(2);
  b.labels = {0, 1, 0, 1};
  const double l1 = global_ss_loss(b, 1.0).item(), l2 = global_ss_loss(b, 0.5).item(),
               l3 = global_ss_loss(b, 0.1).item();
  EXPECT_GT(l1, l2);
  EXPECT_GT(l2, l3);
}

// ---- map-map --------------------------------------------------------------

TEST(MapMap, IdenticalMapsWithIdentityHeadsGiveOne) {
  Rng rng(5);
  model::SpatialHeads heads(3, 3, rng);
  for (auto* l : {&heads.fq, &heads.fk, &heads.fv}) set_identity(*l);
  auto x = random_tensor({3, 2, 2}, rng);
  EXPECT_NEAR(map_map_similarity(x, x, heads).item(), 1.0, 1e-12);
}

TEST(MapMap, SinglePositionReducesToCosineOfValues) {
  Rng rng(6);
  model::SpatialHeads heads(3, 4, rng);
  auto xa = random_tensor({3, 1, 1}, rng), xb = random_tensor({3, 1, 1}, rng);
  auto va = heads.fv(reshape(xa, {1, 3})), vb = heads.fv(reshape(xb, {1, 3}));
  EXPECT_NEAR(map_map_similarity(xa, xb, heads).item(), cosine_similarity(va, vb).item(), 1e-12);
}

TEST(MapMap, MatchesStepByStepOracle) {
  Rng rng(7);
  model::SpatialHeads heads(3, 4, rng);
  auto xa = random_tensor({3, 2, 2}, rng), xb = random_tensor({3, 2, 2}, rng);
  auto pa = oracle::map_positions(testing::to_vector(xa), 3, 4);
  auto pb = oracle::map_positions(testing::to_vector(xb), 3, 4);
  const double expected = oracle::sim1(pa, pb, testing::affine(heads.fq), testing::affine(heads.fk),
                                       testing::affine(heads.fv));
  EXPECT_NEAR(map_map_similarity(xa, xb, heads).item(), expected, 1e-9);
}

TEST(MapMap, RejectsShapeMismatch) {
  Rng rng(8);
  model::SpatialHeads heads(3, 4, rng);
  EXPECT_THROW(map_map_similarity(Tensor::zeros({3, 2, 2}), Tensor::zeros({3, 1, 4}), heads), DimensionError);
}

TEST(MapMapLoss, SinglePairIsZero) {
  Rng rng(9);
  Heads h(3, 4, rng);
  EXPECT_NEAR(map_map_loss(random_batch(1, 3, 4, rng), h.spatial, 0.1).item(), 0.0, 1e-12);
}

TEST(MapMapLoss, IdenticalMapsGiveSymmetricValue) {
  Rng rng(10);
  Heads h(3, 4, rng);
  auto b = random_batch(3, 3, 4, rng);
  auto one = random_tensor({1, 3, 2, 2}, rng);
  b.maps = concat(std::vector<Tensor>(6, one), 0);
  EXPECT_NEAR(map_map_loss(b, h.spatial, 0.1).item(), 6.0 * std::log(5.0), 1e-9);
}

TEST(MapMapLoss, MatchesComposedOracle) {
  Rng rng(11);
  Heads h(3, 4, rng);
  auto b = random_batch(2, 3, 4, rng);
  const double expected = oracle::map_map_loss(testing::map_positions(b.maps), b.pair, testing::affine(h.spatial.fq),
                                               testing::affine(h.spatial.fk), testing::affine(h.spatial.fv), 0.1);
  EXPECT_NEAR(map_map_loss(b, h.spatial, 0.1).item(), expected, 1e-9);
}

// ---- vec-map --------------------------------------------------------------

TEST(VecMap, ZeroWeightsGiveZero) {
  Rng rng(12);
  Heads h(3, 4, rng);
  std::fill(h.vecmap.fc.weight.mutable_data().begin(), h.vecmap.fc.weight.mutable_data().end(), 0.0);
  std::fill(h.vecmap.fc.bias.mutable_data().begin(), h.vecmap.fc.bias.mutable_data().end(), 0.0);
  auto xa = random_tensor({3, 2, 2}, rng), xb = random_tensor({3, 2, 2}, rng);
  EXPECT_EQ(vec_map_similarity(xa, xb, h.vecmap, h.proj).item(), 0.0);
}

TEST(VecMap, ColumnsEqualToProjectedVectorGiveOne) {
  Rng rng(13);
  model::VecMapHead g(3, 3, rng);
  model::ProjectionHead proj(3, 3, 3, rng);
  set_identity(g.fc);
  set_identity(proj.fc1);
  set_identity(proj.fc2);
  // Constant positive map: GAP, projection and every u column all equal v.
  Tensor x({3, 2, 2}, {0.2, 0.2, 0.2, 0.2, 0.7, 0.7, 0.7, 0.7, 1.3, 1.3, 1.3, 1.3});
  EXPECT_NEAR(vec_map_similarity(x, x, g, proj).item(), 1.0, 1e-12);
}

TEST(VecMap, MatchesPerPositionOracle) {
  Rng rng(14);
  Heads h(3, 4, rng);
  auto xa = random_tensor({3, 2, 2}, rng), xb = random_tensor({3, 2, 2}, rng);
  const double expected = oracle::sim2(oracle::map_positions(testing::to_vector(xa), 3, 4),
                                       oracle::map_positions(testing::to_vector(xb), 3, 4),
                                       testing::affine(h.vecmap.fc), testing::affine(h.proj.fc1),
                                       testing::affine(h.proj.fc2));
  EXPECT_NEAR(vec_map_similarity(xa, xb, h.vecmap, h.proj).item(), expected, 1e-9);
}

TEST(VecMapLoss, SinglePairIsZero) {
  Rng rng(15);
  Heads h(3, 4, rng);
  EXPECT_NEAR(vec_map_loss(random_batch(1, 3, 4, rng), h.vecmap, h.proj, 0.1).item(), 0.0, 1e-12);
}

TEST(VecMapLoss, IdenticalMapsGiveSymmetricValue) {
  Rng rng(16);
  Heads h(3, 4, rng);
  auto b = random_batch(2, 3, 4, rng);
  b.maps = concat(std::vector<Tensor>(4, random_tensor({1, 3, 2, 2}, rng)), 0);
  EXPECT_NEAR(vec_map_loss(b, h.vecmap, h.proj, 0.1).item(), 4.0 * std::log(3.0), 1e-9);
}

TEST(VecMapLoss, MatchesComposedOracle) {
  Rng rng(17);
  Heads h(3, 4, rng);
  auto b = random_batch(2, 3, 4, rng);
  const double expected =
      oracle::vec_map_loss(testing::map_positions(b.maps), b.pair, testing::affine(h.vecmap.fc),
                           testing::affine(h.proj.fc1), testing::affine(h.proj.fc2), 0.1);
  EXPECT_NEAR(vec_map_loss(b, h.vecmap, h.proj, 0.1).item(), expected, 1e-9);
}

// ---- local ------------------------------------------------------------------

TEST(LocalSS, SinglePairIsZero) {
  Rng rng(18);
  Heads h(3, 4, rng);
  EXPECT_NEAR(local_ss_loss(random_batch(1, 3, 4, rng), h.view(), 0.1, 0.1).item(), 0.0, 1e-12);
}

TEST(LocalSS, IsSumOfPartsAndMatchesOracles) {
  Rng rng(19);
  Heads h(3, 4, rng);
  auto b = random_batch(2, 3, 4, rng);
  const double local = local_ss_loss(b, h.view(), 0.2, 0.3).item();
  const double parts = map_map_loss(b, h.spatial, 0.2).item() + vec_map_loss(b, h.vecmap, h.proj, 0.3).item();
  EXPECT_NEAR(local, parts, 1e-12);
  auto pos = testing::map_positions(b.maps);
  const double expected = oracle::map_map_loss(pos, b.pair, testing::affine(h.spatial.fq),
                                               testing::affine(h.spatial.fk), testing::affine(h.spatial.fv), 0.2) +
                          oracle::vec_map_loss(pos, b.pair, testing::affine(h.vecmap.fc),
                                               testing::affine(h.proj.fc1), testing::affine(h.proj.fc2), 0.3);
  EXPECT_NEAR(local, expected, 1e-9);
}

// ---- supervised -------------------------------------------------------------

TEST(GlobalSup, OneLabelEqualCosinesGiveSymmetricValue) {
  AugmentedBatch b;
  b.z = tetrahedron();
  b.pair = AugmentedBatch::split_halves_pairing(2);
  b.labels = {0, 0, 0, 0};
  EXPECT_NEAR(global_sup_loss(b, 0.1).item(), 4.0 * std::log(3.0), 1e-9);
}

TEST(GlobalSup, SingleSampleMatchesGlobalSS) {
  Rng rng(20);
  auto b = random_batch(1, 3, 4, rng);
  EXPECT_EQ(global_sup_loss(b, 0.1).item(), 0.0);
  EXPECT_EQ(global_ss_loss(b, 0.1).item(), 0.0);
}

TEST(GlobalSup, MatchesBruteForceOracle) {
  Rng rng(21);
  auto b = random_batch(3, 3, 4, rng, {0, 1, 0});
  const double expected = oracle::supcon(testing::rows(b.z), b.labels, 0.1);
  EXPECT_NEAR(global_sup_loss(b, 0.1).item(), expected, 1e-9);
}

TEST(GlobalSup, EmptyPositiveSetIsAnInvariantError) {
  AugmentedBatch b;
  b.z = Tensor({2, 2}, {1, 0, 0, 1});
  b.pair = {1, 0};
  b.labels = {0, 0};
  b.validate();
  b.labels = {0, 1};  // bypasses validate() only through direct call
  EXPECT_THROW(global_sup_loss(b, 0.1), InvariantError);
}

// ---- total ------------------------------------------------------------------

struct TotalFixture {
  Rng rng{22};
  Heads heads{3, 4, rng};
  model::ClassifierHead cls{3, 2, rng};
  AugmentedBatch batch = random_batch(2, 3, 4, rng, {0, 1});
  Tensor logits() const { return cls.classify(global_avg_pool(batch.maps)); }
};

TEST(PretrainTotal, OnlyCrossEntropyEnabled) {
  TotalFixture f;
  PretrainLossWeights w;
  w.use_global_ss = w.use_local_ss = w.use_global_sup = false;
  auto out = pretrain_total(f.batch, f.logits(), f.heads.view(), w);
  EXPECT_EQ(out.total.item(), model::cross_entropy(f.logits(), f.batch.labels).item());
}

TEST(PretrainTotal, ZeroAlphasLeaveCrossEntropy) {
  TotalFixture f;
  PretrainLossWeights w;
  w.alpha1 = w.alpha2 = w.alpha3 = 0.0;
  auto out = pretrain_total(f.batch, f.logits(), f.heads.view(), w);
  EXPECT_NEAR(out.total.item(), model::cross_entropy(f.logits(), f.batch.labels).item(), 1e-15);
}

TEST(PretrainTotal, EqualsSumOfIndividuallyComputedTerms) {
  TotalFixture f;
  PretrainLossWeights w;
  w.alpha1 = 0.7;
  w.alpha2 = 1.3;
  w.alpha3 = 0.4;
  auto out = pretrain_total(f.batch, f.logits(), f.heads.view(), w);
  const double expected = model::cross_entropy(f.logits(), f.batch.labels).item() +
                          0.7 * global_ss_loss(f.batch, w.tau1).item() +
                          1.3 * local_ss_loss(f.batch, f.heads.view(), w.tau2, w.tau3).item() +
                          0.4 * global_sup_loss(f.batch, w.tau4).item();
  EXPECT_NEAR(out.total.item(), expected, 1e-12);
  const double weighted = out.terms.at("w_ce") + out.terms.at("w_global_ss") + out.terms.at("w_local_ss") +
                          out.terms.at("w_global_sup");
  EXPECT_NEAR(out.terms.at("total"), weighted, 1e-12);
}

TEST(PretrainTotal, LocalSubpartsToggleIndependently) {
  TotalFixture f;
  PretrainLossWeights w;
  w.use_map_map = false;
  auto vec_only = pretrain_total(f.batch, f.logits(), f.heads.view(), w);
  EXPECT_FALSE(vec_only.terms.count("map_map"));
  EXPECT_EQ(vec_only.terms.at("local_ss"), vec_only.terms.at("vec_map"));
  w.use_vec_map = false;
  auto neither = pretrain_total(f.batch, f.logits(), f.heads.view(), w);
  EXPECT_FALSE(neither.terms.count("local_ss"));
}

TEST(PretrainTotal, RejectsNonPositiveTemperature) {
  TotalFixture f;
  PretrainLossWeights w;
  w.tau3 = 0.0;
  EXPECT_THROW(pretrain_total(f.batch, f.logits(), f.heads.view(), w), ConfigError);
}

TEST(PretrainTotal, EveryHeadReceivesGradient) {
  TotalFixture f;
  auto out = pretrain_total(f.batch, f.logits(), f.heads.view(), PretrainLossWeights{});
  backward(out.total);
  for (auto& p : f.heads.parameters()) EXPECT_TRUE(p.has_grad());
  for (auto& p : f.cls.parameters()) EXPECT_TRUE(p.has_grad());
}

// ---- invariances --------------------------------------------------------------

// Evaluates all four families on a batch with shared heads.
std::vector<double> all_losses(const AugmentedBatch& b, const Heads& h) {
  return {global_ss_loss(b, 0.1).item(), map_map_loss(b, h.spatial, 0.1).item(),
          vec_map_loss(b, h.vecmap, h.proj, 0.1).item(), global_sup_loss(b, 0.1).item()};
}

AugmentedBatch reorder(const AugmentedBatch& b, const std::vector<std::size_t>& order) {
  // new index k holds old view order[k]
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) inverse[order[k]] = k;
  AugmentedBatch out;
  out.z = index_select(b.z, 0, order);
  out.maps = index_select(b.maps, 0, order);
  for (std::size_t k = 0; k < order.size(); ++k) {
    out.pair.push_back(inverse[b.pair[order[k]]]);
    out.labels.push_back(b.labels[order[k]]);
  }
  return out;
}

TEST(PretrainInvariance, BatchPermutation) {
  Rng rng(23);
  Heads h(3, 4, rng);
  auto b = random_batch(3, 3, 4, rng, {0, 1, 0});
  auto permuted = reorder(b, {4, 0, 5, 2, 1, 3});
  auto base = all_losses(b, h), moved = all_losses(permuted, h);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], moved[i], 1e-9) << "loss " << i;
}

TEST(PretrainInvariance, ViewSwap) {
  Rng rng(24);
  Heads h(3, 4, rng);
  auto b = random_batch(3, 3, 4, rng, {1, 1, 0});
  auto swapped = reorder(b, b.pair);
  auto base = all_losses(b, h), moved = all_losses(swapped, h);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], moved[i], 1e-9) << "loss " << i;
}

TEST(PretrainInvariance, OrthogonalTransformOfProjections) {
  Rng rng(25);
  for (int trial = 0; trial < 5; ++trial) {
    auto b = random_batch(3, 3, 5, rng, {0, 1, 1});
    AugmentedBatch rotated = b;
    rotated.z = matmul(b.z, random_orthogonal(5, rng));
    EXPECT_NEAR(global_ss_loss(b, 0.1).item(), global_ss_loss(rotated, 0.1).item(), 1e-9);
    EXPECT_NEAR(global_sup_loss(b, 0.1).item(), global_sup_loss(rotated, 0.1).item(), 1e-9);
  }
}

// ---- gradients -----------------------------------------------------------------

class PretrainGradients : public ::testing::TestWithParam<int> {};

TEST_P(PretrainGradients, AllLossesMatchFiniteDifferences) {
  Rng rng(100 + static_cast<std::uint64_t>(GetParam()));
  Heads h(3, 4, rng);
  auto b = random_batch(2, 3, 4, rng, {0, 1});
  auto params = h.parameters();
  params.push_back(b.z);
  params.push_back(b.maps);
  const auto seed = static_cast<std::uint64_t>(GetParam());
  struct Case {
    const char* name;
    std::function<Tensor()> loss;
  };
  std::vector<Case> cases{
      {"global_ss", [&] { return global_ss_loss(b, 0.1); }},
      {"map_map", [&] { return map_map_loss(b, h.spatial, 0.1); }},
      {"vec_map", [&] { return vec_map_loss(b, h.vecmap, h.proj, 0.1); }},
      {"local_ss", [&] { return local_ss_loss(b, h.view(), 0.1, 0.1); }},
      {"global_sup", [&] { return global_sup_loss(b, 0.1); }},
  };
  for (auto& c : cases) {
    auto r = gradcheck(c.loss, params, 30, seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " param " << r.worst_param << " analytic " << r.worst_analytic
                                     << " numeric " << r.worst_numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(TwentyInstances, PretrainGradients, ::testing::Range(0, 20));

}  // namespace
}  // namespace cfsl::losses
