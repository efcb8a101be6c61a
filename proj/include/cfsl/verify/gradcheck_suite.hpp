#pragma once

// Central-difference checks of every differentiable path used in training:
// each loss of both stages and the encoder, projection, attention and
// classifier ops beneath them.

#include <functional>
#include <string>
#include <vector>

#include "cfsl/tensor/gradcheck.hpp"
#include "cfsl/verify/instances.hpp"

namespace cfsl::verify {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr std::size_t kGradSamples = 60;
inline constexpr std::size_t kGradMinChecked = 50;

struct GradRow {
  std::string name;
  GradCheckResult result;
  bool passed() const { return result.checked >= kGradMinChecked && result.max_rel_error < kGradTolerance; }
};

inline std::vector<GradRow> gradient_suite(std::uint64_t seed) {
  std::vector<GradRow> out;
  auto run = [&](const std::string& name, const std::function<Tensor()>& loss, std::vector<Tensor> params) {
    out.push_back({name, gradcheck(loss, std::move(params), kGradSamples, derive_seed({seed, out.size()}))});
  };
  Rng rng(seed);

  // Pretraining losses on one 4-sample batch with 4 channels and D = 8.
  auto p = random_pretrain_instance(rng, 4, 4, 8, 2);
  const auto& b = p.batch;
  auto head_params = [&](std::initializer_list<const model::Module*> mods, std::vector<Tensor> extra) {
    for (const auto* m : mods) {
      for (auto& t : m->parameters()) extra.push_back(t);
    }
    return extra;
  };
  losses::PretrainLossWeights w;
  w.alpha1 = 0.7;
  w.alpha2 = 0.5;
  w.alpha3 = 0.3;

  run("global_ss", [&] { return losses::global_ss_loss(b, 0.1); }, {b.z});
  run("map_map", [&] { return losses::map_map_loss(b, p.spatial, 0.1); }, head_params({&p.spatial}, {b.maps}));
  run("vec_map", [&] { return losses::vec_map_loss(b, p.vecmap, p.proj, 0.1); },
      head_params({&p.vecmap, &p.proj}, {b.maps}));
  run("local_ss", [&] { return losses::local_ss_loss(b, p.heads(), 0.1, 0.1); },
      head_params({&p.spatial, &p.vecmap, &p.proj}, {b.maps}));
  run("global_sup", [&] { return losses::global_sup_loss(b, 0.1); }, {b.z});
  run("pretrain_total", [&] { return losses::pretrain_total(b, p.logits, p.heads(), w).total; }, p.all_tensors());

  // Ops beneath the losses.
  model::BackboneConfig bc;
  bc.stage_channels = {3, 4};
  bc.input_height = bc.input_width = 8;
  model::Backbone backbone(bc, rng);
  auto images = random_tensor({2, 3, 8, 8}, rng);
  auto wg = random_tensor({2, 4}, rng, false), wm = random_tensor({2, 4, 2, 2}, rng, false);
  auto enc_params = backbone.parameters();
  enc_params.push_back(images);
  run("encoder",
      [&] {
        auto e = backbone.encode(images, true);
        return sum(e.globals * wg) + sum(e.maps * wm);
      },
      enc_params);

  auto h = random_tensor({4, 5}, rng);
  auto wz = random_tensor({4, 6}, rng, false);
  model::ProjectionHead proj(5, 7, 6, rng);
  run("projection", [&] { return sum(proj.project(h) * wz); }, head_params({&proj}, {h}));

  model::ClassifierHead classifier(5, 6, rng);
  const std::vector<std::size_t> y{0, 5, 1, 3};
  run("cross_entropy", [&] { return model::cross_entropy(classifier.classify(h), y); }, head_params({&classifier}, {h}));

  meta::AttnModule attn(4, rng);
  auto protos = random_tensor({3, 4}, rng);
  auto wa = random_tensor({3, 4}, rng, false);
  run("attention", [&] { return sum(attn(protos) * wa); }, head_params({&attn}, {protos}));

  // Episodic losses on a 3-way 2-shot episode with 2 queries per class.
  auto e = random_episode_instance(rng, 3, 2, 2, 4, 6);
  const auto& ve = e.episode;
  meta::MetaLossConfig mc;
  mc.beta = 0.1;
  run("prototype_nll",
      [&] {
        auto aligned = meta::align(meta::prototypes(ve.views[0].support_h, ve.support_labels, ve.ways), e.attn);
        return meta::prototype_nll(ve.views[0].query_h, ve.query_labels, aligned);
      },
      e.all_tensors());
  run("cross_view", [&] { return meta::cross_view_loss(ve, e.attn, mc).total; }, e.all_tensors());
  run("distance_scaled", [&] { return meta::distance_scaled_loss(ve, mc.tau5); }, e.inputs());
  run("meta_total", [&] { return meta::meta_total(ve, e.attn, mc).total; }, e.all_tensors());
  return out;
}

}  // namespace cfsl::verify
