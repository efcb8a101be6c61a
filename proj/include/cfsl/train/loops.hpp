#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <regex>
#include <string>
#include <vector>

#include "cfsl/data/episodes.hpp"
#include "cfsl/losses/pretrain.hpp"
#include "cfsl/meta/episodic.hpp"
#include "cfsl/model/checkpoint.hpp"
#include "cfsl/model/encoder.hpp"
#include "cfsl/train/config.hpp"
#include "cfsl/train/metrics.hpp"
#include "cfsl/train/optim.hpp"

namespace cfsl::train {

namespace fs = std::filesystem;

// Seed stream ids. Every random draw is derive_seed(master, stream, ...).
enum Stream : std::uint64_t {
  kInitStream = 1,
  kPretrainStream = 2,
  kMetaStream = 3,
  kTestStream = 4,
};

// Every trainable module of the method. Pre-training touches all but the
// attention block; meta-training touches backbone, projection and attention.
class Network : public model::Module {
 public:
  Network(const ModelConfig& cfg, const data::DatasetSplit& base, std::uint64_t seed) {
    model::BackboneConfig bc = cfg.backbone;
    bc.input_channels = base.channels;
    bc.input_height = base.height;
    bc.input_width = base.width;
    auto rng_for = [seed](std::uint64_t tag) { return Rng(derive_seed({seed, kInitStream, tag})); };
    Rng r0 = rng_for(0), r1 = rng_for(1), r2 = rng_for(2), r3 = rng_for(3), r4 = rng_for(4), r5 = rng_for(5);
    backbone = model::Backbone(bc, r0);
    const std::size_t c = bc.feature_channels();
    proj = model::ProjectionHead(c, cfg.hidden(), cfg.proj_dim, r1);
    spatial = model::SpatialHeads(c, cfg.spatial(), r2);
    vecmap = model::VecMapHead(c, cfg.proj_dim, r3);
    classifier = model::ClassifierHead(c, base.num_classes(), r4);
    attn = meta::AttnModule(c, r5);
  }

  void collect(const std::string& prefix, std::vector<model::NamedTensor>& out) const override {
    collect_pretrain(prefix, out);
    attn.collect(model::join_name(prefix, "attn"), out);
  }

  void collect_pretrain(const std::string& prefix, std::vector<model::NamedTensor>& out) const {
    backbone.collect(model::join_name(prefix, "backbone"), out);
    proj.collect(model::join_name(prefix, "proj"), out);
    spatial.collect(model::join_name(prefix, "spatial"), out);
    vecmap.collect(model::join_name(prefix, "vecmap"), out);
    classifier.collect(model::join_name(prefix, "classifier"), out);
  }

  std::vector<model::NamedTensor> pretrain_tensors() const {
    std::vector<model::NamedTensor> out;
    collect_pretrain("", out);
    return out;
  }

  std::vector<model::NamedTensor> meta_tensors() const {
    std::vector<model::NamedTensor> out;
    backbone.collect("backbone", out);
    proj.collect("proj", out);
    attn.collect("attn", out);
    return out;
  }

  model::Backbone backbone;
  model::ProjectionHead proj;
  model::SpatialHeads spatial;
  model::VecMapHead vecmap;
  model::ClassifierHead classifier;
  meta::AttnModule attn;
};

struct Splits {
  data::DatasetSplit train, test;
};

// Manifest-backed splits when configured, otherwise synthetic ones with
// disjoint class ids.
inline Splits load_splits(const RunConfig& cfg) {
  Splits s;
  if (!cfg.data.train_manifest.empty()) {
    s.train = data::load_split(cfg.data.train_manifest);
  } else {
    auto spec = cfg.data.synth;
    spec.role = "train";
    spec.first_class = 0;
    s.train = data::synth_dataset(spec);
  }
  if (!cfg.data.test_manifest.empty()) {
    s.test = data::load_split(cfg.data.test_manifest);
  } else {
    auto spec = cfg.data.synth;
    spec.role = "test";
    spec.n_classes = cfg.data.synth_test_classes;
    spec.first_class = cfg.data.synth.n_classes;
    s.test = data::synth_dataset(spec);
  }
  data::require_disjoint(s.train, s.test);
  return s;
}

namespace detail {

class Stopwatch {
 public:
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void require_finite_terms(const std::map<std::string, double>& terms, const std::string& stage,
                                 std::size_t step) {
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite loss term '" + name + "' at " + stage + " step " + std::to_string(step));
    }
  }
}

inline std::string epoch_file(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu.ckpt", epoch);
  return buf;
}

// Latest epoch_NNN.ckpt in `dir`, if any.
inline std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  std::optional<fs::path> best;
  if (!fs::exists(dir)) return best;
  static const std::regex pattern(R"(epoch_(\d+)\.ckpt)");
  std::size_t best_epoch = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) {
      const std::size_t e = std::stoul(m[1].str());
      if (!best || e > best_epoch) best = entry.path(), best_epoch = e;
    }
  }
  return best;
}

// Parameters plus momentum buffers under "optim/<name>".
inline std::vector<model::NamedTensor> training_state(const std::vector<model::NamedTensor>& live,
                                                      const OptimizerState& opt) {
  std::vector<model::NamedTensor> out = live;
  for (const auto& [name, v] : opt.velocity) {
    const auto it = std::find_if(live.begin(), live.end(), [&](const model::NamedTensor& t) { return t.name == name; });
    if (it == live.end() || v.empty()) continue;
    out.push_back({"optim/" + name, Tensor(it->tensor.shape(), v), model::TensorRole::kBuffer});
  }
  return out;
}

inline void restore_optimizer(const model::Checkpoint& ck, OptimizerState& opt) {
  opt.velocity.clear();
  for (const auto& t : ck.tensors) {
    if (t.name.rfind("optim/", 0) == 0) {
      opt.velocity[t.name.substr(6)] = std::vector<double>(t.tensor.data().begin(), t.tensor.data().end());
    }
  }
}

// Keeps records of completed epochs so a resumed run appends seamlessly.
inline void truncate_metrics(const fs::path& path, std::size_t completed_epochs) {
  if (!fs::exists(path)) return;
  auto records = read_metrics(path);
  std::ofstream os(path, std::ios::trunc);
  for (const auto& r : records) {
    if (r.at("epoch").get<std::size_t>() < completed_epochs) os << r.dump() << '\n';
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!os) throw DataError("cannot write " + path.string());
}

// Encoded globals and projections of one image batch.
struct Embedded {
  Tensor maps, h, z;
};

inline Embedded embed(const Network& net, const Tensor& images, bool training) {
  auto enc = net.backbone.encode(images, training);
  return {enc.maps, enc.globals, net.proj.project(enc.globals)};
}

}  // namespace detail

struct StageResult {
  fs::path dir;
  fs::path checkpoint;  // final.ckpt
  fs::path metrics;
  std::size_t records = 0;
};

struct LoopOptions {
  bool resume = false;
  std::function<void(const MetricsRecord&)> on_record;  // progress hook
};

inline StageResult pretrain_loop(const RunConfig& cfg, const fs::path& out_dir, const LoopOptions& opts = {}) {
  cfg.validate();
  const auto splits = load_splits(cfg);
  const auto& split = splits.train;
  Network net(cfg.model, split, cfg.seed);
  const auto params = net.pretrain_tensors();
  const auto& pc = cfg.pretrain;

  const std::size_t n = split.size();
  if (n < pc.batch_size) {
    throw DataError("pretrain.batch_size " + std::to_string(pc.batch_size) + " exceeds the " +
                    std::to_string(n) + " training images");
  }
  const std::size_t steps_per_epoch = pc.steps_per_epoch ? pc.steps_per_epoch : n / pc.batch_size;
  ScheduleSpec sched{ScheduleKind::kCosineWithWarmup, pc.lr, 0, pc.epochs * steps_per_epoch, 0, 1.0};
  sched.warmup_steps = std::min(pc.warmup_epochs * steps_per_epoch, sched.total_steps);
  OptimizerState opt{pc.lr, pc.momentum, pc.weight_decay, {}};
  const auto policy_a = cfg.policy(pc.aug_a), policy_b = cfg.policy(pc.aug_b);
  const losses::LocalHeads heads{net.spatial, net.vecmap, net.proj};

  StageResult res{out_dir / "pretrain", out_dir / "pretrain" / "final.ckpt", out_dir / "pretrain" / "metrics.jsonl"};
  fs::create_directories(res.dir);
  std::size_t start_epoch = 0, step = 0;
  if (opts.resume) {
    if (auto latest = detail::latest_checkpoint(res.dir)) {
      auto ck = model::load_checkpoint(*latest);
      model::restore(net.named_tensors(), ck);
      detail::restore_optimizer(ck, opt);
      start_epoch = ck.info.epoch;
      step = ck.info.step;
    }
    detail::truncate_metrics(res.metrics, start_epoch);
  }
  detail::write_text(res.dir / "config.txt", serialize(cfg));
  MetricsWriter metrics(res.metrics, opts.resume);
  detail::Stopwatch clock;

  for (std::size_t epoch = start_epoch; epoch < pc.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed({cfg.seed, kPretrainStream, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<std::size_t> idx(pc.batch_size);
      for (std::size_t j = 0; j < pc.batch_size; ++j) idx[j] = order[(s * pc.batch_size + j) % n];
      const std::uint64_t view_seed = derive_seed({cfg.seed, kPretrainStream, epoch, s});
      Tensor images = concat({data::augment_images(split, idx, policy_a, derive_seed({view_seed, 0})),
                              data::augment_images(split, idx, policy_b, derive_seed({view_seed, 1}))},
                             0);
      auto emb = detail::embed(net, images, true);
      losses::AugmentedBatch batch{emb.z, emb.maps, losses::AugmentedBatch::split_halves_pairing(pc.batch_size), {}};
      for (std::size_t r = 0; r < 2; ++r) {
        for (auto i : idx) batch.labels.push_back(split.labels[i]);
      }
      auto loss = losses::pretrain_total(batch, net.classifier.classify(emb.h), heads, pc.weights);
      detail::require_finite_terms(loss.terms, "pretrain", step);

      opt.lr = lr_at(sched, step);
      if (loss.total.requires_grad()) backward(loss.total);
      sgd_step(params, opt);
      zero_grads(params);

      MetricsRecord rec{step, epoch, "pretrain", opt.lr, loss.terms, {}, clock.elapsed_ms(), cfg.seed};
      metrics.write(rec);
      ++res.records;
      if (opts.on_record) opts.on_record(rec);
    }
    model::save_checkpoint(res.dir / detail::epoch_file(epoch + 1), detail::training_state(net.named_tensors(), opt),
                           {"pretrain", epoch + 1, step});
  }
  model::save_checkpoint(res.checkpoint, net.named_tensors(), {"pretrain", pc.epochs, step});
  return res;
}

// Embeds both views of an episode. With CVET and the contrastive term both
// off, only the first view enters the loss and the second is never encoded.
inline meta::ViewedEpisode embed_episode(const Network& net, const data::ViewedImages& v, bool both_views) {
  meta::ViewedEpisode ve;
  ve.support_labels = v.episode.support_labels;
  ve.query_labels = v.episode.query_labels;
  ve.ways = v.episode.classes.size();
  const std::size_t ns = v.support[0].shape()[0], nq = v.query[0].shape()[0];
  for (std::size_t r = 0; r < (both_views ? 2u : 1u); ++r) {
    auto emb = detail::embed(net, concat({v.support[r], v.query[r]}, 0), true);
    ve.views[r] = {slice(emb.h, 0, 0, ns), slice(emb.z, 0, 0, ns), slice(emb.h, 0, ns, ns + nq),
                   slice(emb.z, 0, ns, ns + nq)};
  }
  return ve;
}

inline StageResult metatrain_loop(const RunConfig& cfg, const fs::path& out_dir, const LoopOptions& opts = {}) {
  cfg.validate();
  const auto splits = load_splits(cfg);
  const auto& split = splits.train;
  Network net(cfg.model, split, cfg.seed);
  const auto& mc = cfg.meta;
  const fs::path init = mc.init_checkpoint.empty() ? out_dir / "pretrain" / "final.ckpt" : fs::path(mc.init_checkpoint);
  model::restore(net.pretrain_tensors(), model::load_checkpoint(init));

  const auto params = net.meta_tensors();
  data::EpisodeSampler sampler(split, mc.episode);
  const ScheduleSpec sched{ScheduleKind::kStep, mc.lr, 0, 0, mc.step_size, mc.gamma};
  OptimizerState opt{mc.lr, mc.momentum, mc.weight_decay, {}};
  const auto policy_a = cfg.policy(mc.aug_a), policy_b = cfg.policy(mc.aug_b);
  const bool both_views = mc.loss.cvet || (mc.loss.info && mc.loss.beta > 0.0);

  StageResult res{out_dir / "metatrain", out_dir / "metatrain" / "final.ckpt", out_dir / "metatrain" / "metrics.jsonl"};
  fs::create_directories(res.dir);
  std::size_t start_epoch = 0, step = 0;
  if (opts.resume) {
    if (auto latest = detail::latest_checkpoint(res.dir)) {
      auto ck = model::load_checkpoint(*latest);
      model::restore(net.named_tensors(), ck);
      detail::restore_optimizer(ck, opt);
      start_epoch = ck.info.epoch;
      step = ck.info.step;
    }
    detail::truncate_metrics(res.metrics, start_epoch);
  }
  detail::write_text(res.dir / "config.txt", serialize(cfg));
  MetricsWriter metrics(res.metrics, opts.resume);
  detail::Stopwatch clock;

  for (std::size_t epoch = start_epoch; epoch < mc.epochs; ++epoch) {
    opt.lr = lr_at(sched, epoch);
    for (std::size_t e = 0; e < mc.episodes_per_epoch; ++e, ++step) {
      const std::uint64_t s = derive_seed({cfg.seed, kMetaStream, epoch, e});
      auto episode = sampler.sample(derive_seed({s, 0}));
      auto views = data::make_viewed_episode(split, episode, policy_a, policy_b,
                                             {derive_seed({s, 1}), derive_seed({s, 2})});
      auto loss = meta::meta_total(embed_episode(net, views, both_views), net.attn, mc.loss);
      loss.terms["w_meta"] = loss.terms.at("meta");
      detail::require_finite_terms(loss.terms, "metatrain", step);

      backward(loss.total);
      sgd_step(params, opt);
      zero_grads(params);

      MetricsRecord rec{step, epoch, "metatrain", opt.lr, loss.terms, {}, clock.elapsed_ms(), cfg.seed};
      metrics.write(rec);
      ++res.records;
      if (opts.on_record) opts.on_record(rec);
    }
    model::save_checkpoint(res.dir / detail::epoch_file(epoch + 1), detail::training_state(net.named_tensors(), opt),
                           {"metatrain", epoch + 1, step});
  }
  model::save_checkpoint(res.checkpoint, net.named_tensors(), {"metatrain", mc.epochs, step});
  return res;
}

struct AccuracyReport {
  double mean = 0.0;
  double ci95 = 0.0;  // 1.96 · sample sd / √E
  std::size_t episodes = 0;
  std::vector<double> per_episode;
};

inline AccuracyReport summarize_accuracies(std::vector<double> acc) {
  AccuracyReport r;
  r.episodes = acc.size();
  if (acc.empty()) return r;
  const double e = static_cast<double>(acc.size());
  r.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / e;
  if (acc.size() > 1) {
    double ss = 0.0;
    for (double a : acc) ss += (a - r.mean) * (a - r.mean);
    r.ci95 = 1.96 * std::sqrt(ss / (e - 1.0)) / std::sqrt(e);
  }
  r.per_episode = std::move(acc);
  return r;
}

// Accuracy of a network over sampled novel-class episodes. Images are not
// augmented and batch-norm uses running statistics, so every image embeds
// independently and the whole split is embedded once.
inline AccuracyReport evaluate(const Network& net, const data::DatasetSplit& split, const data::EpisodeSpec& spec,
                               std::size_t episodes, std::uint64_t seed, const meta::MetaLossConfig& loss_cfg) {
  NoGradGuard no_grad;
  data::EpisodeSampler sampler(split, spec);
  std::vector<Tensor> chunks;
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < split.size(); b += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, split.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    chunks.push_back(net.backbone.encode(split.images(idx), false).globals);
  }
  const Tensor all_h = concat(chunks, 0);

  std::vector<double> acc;
  acc.reserve(episodes);
  for (std::size_t e = 0; e < episodes; ++e) {
    auto ep = sampler.sample(derive_seed({seed, kTestStream, e}));
    auto pred = meta::meta_test_predict(index_select(all_h, 0, ep.support), ep.support_labels, spec.ways,
                                        index_select(all_h, 0, ep.query), net.attn, loss_cfg);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ep.query_labels[i];
    acc.push_back(static_cast<double>(correct) / static_cast<double>(pred.size()));
  }
  return summarize_accuracies(std::move(acc));
}

struct MetatestResult {
  StageResult stage;
  AccuracyReport report;
};

inline MetatestResult metatest_loop(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const auto splits = load_splits(cfg);
  Network net(cfg.model, splits.train, cfg.seed);
  const fs::path ckpt = cfg.test.checkpoint.empty() ? out_dir / "metatrain" / "final.ckpt" : fs::path(cfg.test.checkpoint);
  model::restore(net.named_tensors(), model::load_checkpoint(ckpt));

  detail::Stopwatch clock;
  MetatestResult r;
  r.report = evaluate(net, splits.test, cfg.test.episode, cfg.test.episodes, cfg.seed, cfg.meta.loss);
  r.stage = {out_dir / "metatest", {}, out_dir / "metatest" / "metrics.jsonl"};
  fs::create_directories(r.stage.dir);
  detail::write_text(r.stage.dir / "config.txt", serialize(cfg));

  MetricsRecord rec{0, 0, "metatest", 0.0, {}, {}, clock.elapsed_ms(), cfg.seed};
  rec.extra = {{"accuracy", r.report.mean}, {"ci95", r.report.ci95}, {"episodes", static_cast<double>(r.report.episodes)}};
  MetricsWriter(r.stage.metrics, false).write(rec);
  r.stage.records = 1;

  nlohmann::ordered_json report{{"accuracy", r.report.mean},
                                {"ci95", r.report.ci95},
                                {"episodes", r.report.episodes},
                                {"ways", cfg.test.episode.ways},
                                {"shots", cfg.test.episode.shots},
                                {"queries", cfg.test.episode.queries},
                                {"checkpoint", ckpt.string()}};
  detail::write_text(r.stage.dir / "report.json", report.dump(2) + "\n");
  return r;
}

}  // namespace cfsl::train
