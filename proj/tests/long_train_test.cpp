// Multi-minute training experiments on the default synthetic set. Registered
// with the `long` label.

#include <gtest/gtest.h>
#include <malloc.h>

#include <filesystem>

#include "cfsl/train/loops.hpp"

namespace cfsl::train {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cfsl_long_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<double> epoch_mean_totals(const fs::path& metrics) {
  std::vector<double> sum, count;
  for (const auto& r : read_metrics(metrics)) {
    const auto e = r.at("epoch").get<std::size_t>();
    if (sum.size() <= e) {
      sum.resize(e + 1, 0.0);
      count.resize(e + 1, 0.0);
    }
    sum[e] += r.at("losses").at("total").get<double>();
    count[e] += 1.0;
  }
  for (std::size_t e = 0; e < sum.size(); ++e) sum[e] /= count[e];
  return sum;
}

TEST(LongPretrain, TwentyEpochsHalveTheLoss) {
  const auto dir = scratch("pretrain20");
  auto cfg = load_config(std::nullopt, {"pretrain.epochs=20"});
  const auto res = pretrain_loop(cfg, dir);
  const auto totals = epoch_mean_totals(res.metrics);
  ASSERT_EQ(totals.size(), 20u);
  std::cout << "epoch 1 mean total " << totals.front() << ", epoch 20 mean total " << totals.back() << " (ratio "
            << totals.back() / totals.front() << ")\n";
  EXPECT_LT(totals.back(), 0.5 * totals.front());
}

TEST(LongMetatrain, AccuracyAfterIsAtLeastBeforeOverFiveSeeds) {
  double before = 0.0, after = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto dir = scratch("meta_seed" + std::to_string(seed));
    auto cfg = load_config(std::nullopt, {"pretrain.epochs=5", "pretrain.warmup_epochs=1", "meta.epochs=2",
                                          "meta.episodes_per_epoch=25", "test.episodes=300"});
    cfg.seed = seed;
    pretrain_loop(cfg, dir);

    // Before: pretrained encoder with the freshly initialised attention block
    // that meta-training starts from.
    const auto splits = load_splits(cfg);
    Network net(cfg.model, splits.train, cfg.seed);
    model::restore(net.pretrain_tensors(), model::load_checkpoint(dir / "pretrain" / "final.ckpt"));
    const auto b = evaluate(net, splits.test, cfg.test.episode, cfg.test.episodes, cfg.seed, cfg.meta.loss);

    metatrain_loop(cfg, dir);
    const auto a = metatest_loop(cfg, dir).report;
    std::cout << "seed " << seed << ": before " << b.mean << ", after " << a.mean << '\n';
    before += b.mean / 5.0;
    after += a.mean / 5.0;
  }
  std::cout << "mean over 5 seeds: before " << before << ", after " << after << '\n';
  EXPECT_GE(after, before);
}

}  // namespace
}  // namespace cfsl::train

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
