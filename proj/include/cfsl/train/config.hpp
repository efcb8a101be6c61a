#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cfsl/data/augment.hpp"
#include "cfsl/data/dataset.hpp"
#include "cfsl/data/episodes.hpp"
#include "cfsl/losses/pretrain.hpp"
#include "cfsl/meta/episodic.hpp"
#include "cfsl/model/encoder.hpp"

namespace cfsl::train {

struct ModelConfig {
  model::BackboneConfig backbone;
  std::size_t proj_dim = 64;
  std::size_t proj_hidden = 0;  // 0 → 2·C
  std::size_t spatial_dim = 0;  // 0 → C

  std::size_t hidden() const { return proj_hidden ? proj_hidden : 2 * backbone.feature_channels(); }
  std::size_t spatial() const { return spatial_dim ? spatial_dim : backbone.feature_channels(); }
};

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;       // N source images, 2N views
  std::size_t steps_per_epoch = 0;   // 0 → ⌊images / N⌋
  double lr = 0.1;
  std::size_t warmup_epochs = 5;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  losses::PretrainLossWeights weights;
  std::string aug_a = "simclr", aug_b = "simclr";
};

struct MetaConfig {
  std::size_t epochs = 20;
  std::size_t episodes_per_epoch = 100;
  data::EpisodeSpec episode{5, 1, 15};
  double lr = 0.01;
  std::size_t step_size = 40;  // epochs
  double gamma = 0.5;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  meta::MetaLossConfig loss;
  std::string aug_a = "standard", aug_b = "simclr";
  std::string init_checkpoint;  // empty → <out>/pretrain/final.ckpt
};

struct TestConfig {
  std::size_t episodes = 2000;
  data::EpisodeSpec episode{5, 1, 15};
  std::string checkpoint;  // empty → <out>/metatrain/final.ckpt
};

struct DataConfig {
  std::string train_manifest, test_manifest;  // empty → generated synthetic splits
  data::SynthSpec synth;
  std::size_t synth_test_classes = 8;
};

struct RunConfig {
  std::string stage = "pretrain";
  std::uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  PretrainConfig pretrain;
  MetaConfig meta;
  TestConfig test;
  data::AugmentPolicy standard = data::AugmentPolicy::standard();
  data::AugmentPolicy simclr = data::AugmentPolicy::simclr();

  // β and the step size follow the shot count unless set explicitly.
  void apply_shot_defaults(std::size_t shots) {
    meta.episode.shots = test.episode.shots = shots;
    meta.loss.beta = shots >= 5 ? 0.1 : 0.01;
    meta.step_size = shots >= 5 ? 50 : 40;
  }

  data::AugmentPolicy policy(const std::string& name) const {
    if (name == "standard") return standard;
    if (name == "simclr") return simclr;
    return data::AugmentPolicy::named(name);
  }

  void validate() const {
    if (stage != "pretrain" && stage != "metatrain" && stage != "metatest") {
      throw ConfigError("stage must be pretrain, metatrain or metatest, got '" + stage + "'");
    }
    model.backbone.validate();
    if (model.proj_dim == 0) throw ConfigError("model.proj_dim must be positive");
    if (pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
    pretrain.weights.validate();
    const auto& w = pretrain.weights;
    if (w.use_local_ss && !w.use_vec_map && !w.use_map_map) {
      throw ConfigError("pretrain.use_local_ss needs pretrain.use_vec_map or pretrain.use_map_map");
    }
    meta.loss.validate();
    if (meta.episode.ways < 2 || test.episode.ways < 2) throw ConfigError("episodes need at least 2 ways");
    if (!(pretrain.lr > 0.0) || !(meta.lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (meta.step_size == 0 || !(meta.gamma > 0.0)) throw ConfigError("meta.step_size and meta.gamma must be positive");
    if (test.episodes == 0) throw ConfigError("test.episodes must be positive");
    for (const auto* name : {&pretrain.aug_a, &pretrain.aug_b, &meta.aug_a, &meta.aug_b}) policy(*name).validate();
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

// One documented configuration key. `origin` says where the default comes from.
struct ConfigKey {
  std::string name;
  std::string origin;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto num = [&k](std::string name, std::string origin, std::string doc, auto member) {
      using T = std::remove_reference_t<decltype(member(std::declval<RunConfig&>()))>;
      k.push_back({name, std::move(origin), std::move(doc),
                   [name, member](RunConfig& c, const std::string& v) {
                     if constexpr (std::is_same_v<T, bool>) {
                       member(c) = detail::parse_bool(name, v);
                     } else if constexpr (std::is_same_v<T, std::string>) {
                       member(c) = v;
                     } else {
                       member(c) = detail::parse_number<T>(name, v);
                     }
                   },
                   [member](const RunConfig& c) {
                     auto& value = member(const_cast<RunConfig&>(c));
                     if constexpr (std::is_same_v<T, bool>) {
                       return std::string(value ? "true" : "false");
                     } else if constexpr (std::is_same_v<T, std::string>) {
                       return value;
                     } else if constexpr (std::is_floating_point_v<T>) {
                       return detail::format_double(value);
                     } else {
                       return std::to_string(value);
                     }
                   }});
    };
#define CFSL_KEY(name, origin, doc, expr) num(name, origin, doc, [](RunConfig& c) -> auto& { return expr; })
    CFSL_KEY("stage", "pipeline", "pretrain | metatrain | metatest", c.stage);
    CFSL_KEY("seed", "pipeline", "master seed; every random stream derives from it", c.seed);

    CFSL_KEY("data.train_manifest", "pipeline", "base-class split manifest; empty uses synthetic data", c.data.train_manifest);
    CFSL_KEY("data.test_manifest", "pipeline", "novel-class split manifest; empty uses synthetic data", c.data.test_manifest);
    CFSL_KEY("synth.classes", "desk scale", "synthetic base classes", c.data.synth.n_classes);
    CFSL_KEY("synth.test_classes", "desk scale", "synthetic novel classes", c.data.synth_test_classes);
    CFSL_KEY("synth.per_class", "desk scale", "images per synthetic class", c.data.synth.per_class);
    CFSL_KEY("synth.image_size", "desk scale", "synthetic image side length", c.data.synth.image_size);
    CFSL_KEY("synth.difficulty", "desk scale", "instance jitter and noise level in [0, 1]", c.data.synth.difficulty);
    CFSL_KEY("synth.seed", "desk scale", "synthetic data seed", c.data.synth.seed);

    k.push_back({"model.stage_channels", "desk scale", "comma-separated backbone stage widths",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<std::size_t> widths;
                   std::stringstream ss(v);
                   for (std::string item; std::getline(ss, item, ',');) {
                     widths.push_back(detail::parse_number<std::size_t>("model.stage_channels", detail::trim(item)));
                   }
                   c.model.backbone.stage_channels = widths;
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (auto w : c.model.backbone.stage_channels) s += (s.empty() ? "" : ",") + std::to_string(w);
                   return s;
                 }});
    CFSL_KEY("model.blocks_per_stage", "desk scale", "conv blocks per backbone stage", c.model.backbone.blocks_per_stage);
    CFSL_KEY("model.batch_norm", "desk scale", "batch normalization in the backbone", c.model.backbone.batch_norm);
    CFSL_KEY("model.proj_dim", "chosen here", "projection output dimension D", c.model.proj_dim);
    CFSL_KEY("model.proj_hidden", "chosen here", "projection hidden width; 0 means 2C", c.model.proj_hidden);
    CFSL_KEY("model.spatial_dim", "chosen here", "spatial head width; 0 means C", c.model.spatial_dim);

    CFSL_KEY("pretrain.epochs", "desk scale", "pre-training epochs", c.pretrain.epochs);
    CFSL_KEY("pretrain.batch_size", "chosen here", "source images per step (two views each)", c.pretrain.batch_size);
    CFSL_KEY("pretrain.steps_per_epoch", "pipeline", "0 means images / batch_size", c.pretrain.steps_per_epoch);
    CFSL_KEY("pretrain.lr", "published", "initial learning rate", c.pretrain.lr);
    CFSL_KEY("pretrain.warmup_epochs", "chosen here", "linear warmup before cosine decay", c.pretrain.warmup_epochs);
    CFSL_KEY("pretrain.momentum", "published", "SGD momentum", c.pretrain.momentum);
    CFSL_KEY("pretrain.weight_decay", "published", "SGD weight decay", c.pretrain.weight_decay);
    CFSL_KEY("pretrain.tau1", "published", "global self-supervised temperature", c.pretrain.weights.tau1);
    CFSL_KEY("pretrain.tau2", "published", "map-map temperature", c.pretrain.weights.tau2);
    CFSL_KEY("pretrain.tau3", "published", "vector-map temperature", c.pretrain.weights.tau3);
    CFSL_KEY("pretrain.tau4", "published", "supervised contrastive temperature", c.pretrain.weights.tau4);
    CFSL_KEY("pretrain.alpha1", "published", "weight of the global self-supervised term", c.pretrain.weights.alpha1);
    CFSL_KEY("pretrain.alpha2", "published", "weight of the local term", c.pretrain.weights.alpha2);
    CFSL_KEY("pretrain.alpha3", "published", "weight of the supervised contrastive term", c.pretrain.weights.alpha3);
    CFSL_KEY("pretrain.use_ce", "ablation", "cross-entropy term", c.pretrain.weights.use_ce);
    CFSL_KEY("pretrain.use_global_ss", "ablation", "global self-supervised term", c.pretrain.weights.use_global_ss);
    CFSL_KEY("pretrain.use_local_ss", "ablation", "local term", c.pretrain.weights.use_local_ss);
    CFSL_KEY("pretrain.use_vec_map", "ablation", "vector-map part of the local term", c.pretrain.weights.use_vec_map);
    CFSL_KEY("pretrain.use_map_map", "ablation", "map-map part of the local term", c.pretrain.weights.use_map_map);
    CFSL_KEY("pretrain.use_global_sup", "ablation", "supervised contrastive term", c.pretrain.weights.use_global_sup);
    k.push_back({"pretrain.loss_reduction", "published", "sum | mean over anchors in contrastive terms",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "sum") {
                     c.pretrain.weights.reduction = losses::LossReduction::kSum;
                   } else if (v == "mean") {
                     c.pretrain.weights.reduction = losses::LossReduction::kMean;
                   } else {
                     throw ConfigError("config key 'pretrain.loss_reduction': expected sum or mean, got '" + v + "'");
                   }
                 },
                 [](const RunConfig& c) {
                   return std::string(c.pretrain.weights.reduction == losses::LossReduction::kSum ? "sum" : "mean");
                 }});
    CFSL_KEY("pretrain.aug_a", "chosen here", "policy of the first view", c.pretrain.aug_a);
    CFSL_KEY("pretrain.aug_b", "chosen here", "policy of the second view", c.pretrain.aug_b);

    CFSL_KEY("meta.epochs", "desk scale", "meta-training epochs", c.meta.epochs);
    CFSL_KEY("meta.episodes_per_epoch", "chosen here", "episodes per meta-training epoch", c.meta.episodes_per_epoch);
    CFSL_KEY("meta.ways", "published", "classes per episode M", c.meta.episode.ways);
    CFSL_KEY("meta.shots", "published", "support images per class K; 5 switches beta and step size", c.meta.episode.shots);
    CFSL_KEY("meta.queries", "published", "query images per class Q", c.meta.episode.queries);
    CFSL_KEY("meta.lr", "chosen here", "meta-training learning rate", c.meta.lr);
    CFSL_KEY("meta.step_size", "published", "StepLR period in epochs (40 for 1-shot, 50 for 5-shot)", c.meta.step_size);
    CFSL_KEY("meta.gamma", "published", "StepLR decay factor", c.meta.gamma);
    CFSL_KEY("meta.momentum", "published", "SGD momentum", c.meta.momentum);
    CFSL_KEY("meta.weight_decay", "published", "SGD weight decay", c.meta.weight_decay);
    CFSL_KEY("meta.tau5", "published", "distance-scaled contrastive temperature", c.meta.loss.tau5);
    CFSL_KEY("meta.beta", "published", "weight of the distance-scaled term (0.01 1-shot, 0.1 5-shot)", c.meta.loss.beta);
    CFSL_KEY("meta.cvet", "ablation", "cross-view episodic training", c.meta.loss.cvet);
    CFSL_KEY("meta.info", "ablation", "distance-scaled contrastive term", c.meta.loss.info);
    CFSL_KEY("meta.bypass_attention", "ablation", "plain prototypes without the attention module", c.meta.loss.bypass_attention);
    CFSL_KEY("meta.squared_distance", "chosen here", "squared Euclidean distances in the classifier", c.meta.loss.squared_distance);
    CFSL_KEY("meta.aug_a", "published", "policy of the first episode view", c.meta.aug_a);
    CFSL_KEY("meta.aug_b", "published", "policy of the second episode view", c.meta.aug_b);
    CFSL_KEY("meta.init_checkpoint", "pipeline", "pre-trained weights; empty means <out>/pretrain/final.ckpt", c.meta.init_checkpoint);

    CFSL_KEY("test.episodes", "published", "evaluation episodes", c.test.episodes);
    CFSL_KEY("test.ways", "published", "evaluation ways", c.test.episode.ways);
    CFSL_KEY("test.shots", "published", "evaluation shots", c.test.episode.shots);
    CFSL_KEY("test.queries", "published", "evaluation queries per class", c.test.episode.queries);
    CFSL_KEY("test.checkpoint", "pipeline", "weights to evaluate; empty means <out>/metatrain/final.ckpt", c.test.checkpoint);

    for (const char* s : {"standard", "simclr"}) {
      const std::string p = std::string("aug.") + s + ".";
      const bool std_policy = std::string(s) == "standard";
      auto pol = [std_policy](RunConfig& c) -> data::AugmentPolicy& { return std_policy ? c.standard : c.simclr; };
      num(p + "crop_scale_min", "chosen here", "smallest crop area fraction", [pol](RunConfig& c) -> auto& { return pol(c).crop_scale_min; });
      num(p + "crop_scale_max", "chosen here", "largest crop area fraction", [pol](RunConfig& c) -> auto& { return pol(c).crop_scale_max; });
      num(p + "crop_ratio_min", "chosen here", "smallest crop aspect ratio", [pol](RunConfig& c) -> auto& { return pol(c).crop_ratio_min; });
      num(p + "crop_ratio_max", "chosen here", "largest crop aspect ratio", [pol](RunConfig& c) -> auto& { return pol(c).crop_ratio_max; });
      num(p + "flip_p", "chosen here", "horizontal flip probability", [pol](RunConfig& c) -> auto& { return pol(c).flip_p; });
      num(p + "jitter_p", "chosen here", "color jitter probability", [pol](RunConfig& c) -> auto& { return pol(c).jitter_p; });
      num(p + "brightness", "chosen here", "brightness jitter strength", [pol](RunConfig& c) -> auto& { return pol(c).brightness; });
      num(p + "contrast", "chosen here", "contrast jitter strength", [pol](RunConfig& c) -> auto& { return pol(c).contrast; });
      num(p + "saturation", "chosen here", "saturation jitter strength", [pol](RunConfig& c) -> auto& { return pol(c).saturation; });
      num(p + "gray_p", "chosen here", "grayscale probability", [pol](RunConfig& c) -> auto& { return pol(c).gray_p; });
    }
#undef CFSL_KEY
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

using Assignment = std::pair<std::string, std::string>;

// Parses "key = value" lines; '#' starts a comment.
inline std::vector<Assignment> parse_assignments(std::istream& is, const std::string& source) {
  std::vector<Assignment> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline Assignment parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + text + "' is not key=value");
  return {detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1))};
}

// Later assignments win. A shot count anywhere resets the shot-dependent
// defaults first, so explicit β or step-size settings still override them.
inline RunConfig build_config(const std::vector<Assignment>& assignments) {
  RunConfig cfg;
  for (const auto& [key, value] : assignments) {
    if (!find_key(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  for (const auto& [key, value] : assignments) {
    if (key == "meta.shots") cfg.apply_shot_defaults(detail::parse_number<std::size_t>(key, value));
  }
  for (const auto& [key, value] : assignments) find_key(key)->set(cfg, value);
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::string>& overrides = {}) {
  std::vector<Assignment> all;
  if (file) {
    std::ifstream is(*file);
    if (!is) throw ConfigError("cannot read config file " + file->string());
    all = parse_assignments(is, file->string());
  }
  for (const auto& o : overrides) all.push_back(parse_override(o));
  return build_config(all);
}

inline std::string serialize(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
  return os.str();
}

// Annotated listing of every key with its default.
inline std::string describe_keys() {
  const RunConfig defaults;
  std::ostringstream os;
  for (const auto& k : config_keys()) {
    os << "# " << k.doc << " [" << k.origin << "]\n" << k.name << " = " << k.get(defaults) << "\n";
  }
  return os.str();
}

}  // namespace cfsl::train
