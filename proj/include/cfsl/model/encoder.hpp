#pragma once

#include <string>
#include <vector>

#include "cfsl/model/layers.hpp"

namespace cfsl::model {

struct BackboneConfig {
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t blocks_per_stage = 1;
  std::size_t input_channels = 3;
  std::size_t input_height = 32;
  std::size_t input_width = 32;
  bool batch_norm = true;

  std::size_t feature_channels() const { return stage_channels.back(); }
  // Each stage ends in a 2×2 max-pool.
  std::size_t feature_height() const { return input_height >> stage_channels.size(); }
  std::size_t feature_width() const { return input_width >> stage_channels.size(); }

  void validate() const {
    if (stage_channels.empty() || blocks_per_stage == 0) {
      throw ConfigError("backbone needs at least one stage and one block per stage");
    }
    if (feature_height() < 2 || feature_width() < 2) {
      throw ConfigError("backbone feature map would be smaller than 2x2 for input " +
                        std::to_string(input_height) + "x" + std::to_string(input_width));
    }
  }
};

struct Encoded {
  Tensor maps;     // [B, C, h, w]
  Tensor globals;  // [B, C] = spatial mean of maps
};

// Desk-scale ConvNet: per stage, blocks of conv3×3 → batch-norm → ReLU,
// followed by a 2×2 max-pool.
class Backbone : public Module {
 public:
  Backbone() = default;
  Backbone(BackboneConfig cfg, Rng& rng) : config_(std::move(cfg)) {
    config_.validate();
    std::size_t in = config_.input_channels;
    for (auto out : config_.stage_channels) {
      for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
        convs_.emplace_back(in, out, 3, rng, 1, 1, !config_.batch_norm);
        if (config_.batch_norm) norms_.emplace_back(out);
        in = out;
      }
    }
  }

  const BackboneConfig& config() const { return config_; }

  Encoded encode(const Tensor& images, bool training) const {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != config_.input_channels || s[2] != config_.input_height ||
        s[3] != config_.input_width) {
      throw DimensionError("encode: expected [B, " + std::to_string(config_.input_channels) + ", " +
                           std::to_string(config_.input_height) + ", " + std::to_string(config_.input_width) +
                           "], got " + to_string(s));
    }
    Tensor x = images;
    std::size_t layer = 0;
    for (std::size_t stage = 0; stage < config_.stage_channels.size(); ++stage) {
      for (std::size_t b = 0; b < config_.blocks_per_stage; ++b, ++layer) {
        x = convs_[layer](x);
        if (config_.batch_norm) x = norms_[layer](x, training);
        x = relu(x);
      }
      x = max_pool2d(x, 2, 2);
    }
    return {x, global_avg_pool(x)};
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect(join_name(prefix, "conv" + std::to_string(i)), out);
      if (config_.batch_norm) norms_[i].collect(join_name(prefix, "bn" + std::to_string(i)), out);
    }
  }

  std::vector<Conv2d>& convs() { return convs_; }

 private:
  BackboneConfig config_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> norms_;
};

// MLP with one hidden layer: C → hidden → D.
class ProjectionHead : public Module {
 public:
  ProjectionHead() = default;
  ProjectionHead(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
      : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

  Tensor project(const Tensor& h) const { return fc2(relu(fc1(h))); }
  std::size_t out_dim() const { return fc2.out_features(); }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    fc1.collect(join_name(prefix, "fc1"), out);
    fc2.collect(join_name(prefix, "fc2"), out);
  }

  Linear fc1, fc2;
};

// [B, C, h, w] → [B, h·w, C], one row per spatial position.
inline Tensor positions(const Tensor& maps) {
  if (maps.rank() != 4) throw DimensionError("positions: expected [B, C, H, W]");
  const auto& s = maps.shape();
  return permute(reshape(maps, {s[0], s[1], s[2] * s[3]}), {0, 2, 1});
}

// Position-wise query/key/value projections shared by both maps of a pair.
// The key map has no bias: it would add q·b to a whole softmax row and cancel.
class SpatialHeads : public Module {
 public:
  SpatialHeads() = default;
  SpatialHeads(std::size_t in, std::size_t out, Rng& rng)
      : fq(in, out, rng), fk(in, out, rng, false), fv(in, out, rng) {}

  std::size_t out_dim() const { return fq.out_features(); }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    fq.collect(join_name(prefix, "fq"), out);
    fk.collect(join_name(prefix, "fk"), out);
    fv.collect(join_name(prefix, "fv"), out);
  }

  Linear fq, fk, fv;
};

// u = ReLU(W·x̂) at every position: [B, C, h, w] → [B, h·w, D].
class VecMapHead : public Module {
 public:
  VecMapHead() = default;
  VecMapHead(std::size_t in, std::size_t out, Rng& rng) : fc(in, out, rng) {}

  Tensor operator()(const Tensor& maps) const { return relu(fc(positions(maps))); }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    fc.collect(join_name(prefix, "fc"), out);
  }

  Linear fc;
};

class ClassifierHead : public Module {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t in, std::size_t classes, Rng& rng) : fc(in, classes, rng) {}

  Tensor classify(const Tensor& h) const { return fc(h); }
  std::size_t num_classes() const { return fc.out_features(); }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    fc.collect(join_name(prefix, "fc"), out);
  }

  Linear fc;
};

// Batch-mean of −log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size()) {
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size(), k = logits.shape()[1];
  std::vector<double> pick(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw InvariantError("cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
                           std::to_string(k) + " classes");
    }
    pick[i * k + labels[i]] = -1.0 / static_cast<double>(n);
  }
  return sum(log_softmax(logits, 1) * Tensor({n, k}, std::move(pick)));
}

}  // namespace cfsl::model
