#pragma once

// Random minimal problem instances shared by the gradient suite, the oracle
// comparison and fixture generation.

#include <cmath>
#include <vector>

#include "cfsl/losses/pretrain.hpp"
#include "cfsl/meta/episodic.hpp"
#include "cfsl/model/encoder.hpp"

namespace cfsl::verify {

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = normal(rng, 0.0, scale);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<std::size_t> class_major(std::size_t ways, std::size_t per_class) {
  std::vector<std::size_t> labels;
  for (std::size_t k = 0; k < ways; ++k) labels.insert(labels.end(), per_class, k);
  return labels;
}

// Gram–Schmidt on Gaussian columns: a uniformly random d×d rotation/reflection.
inline Tensor random_orthogonal(std::size_t d, Rng& rng) {
  std::vector<std::vector<double>> q;
  while (q.size() < d) {
    std::vector<double> v(d);
    for (auto& x : v) x = normal(rng, 0.0, 1.0);
    for (const auto& u : q) {
      double p = 0.0;
      for (std::size_t i = 0; i < d; ++i) p += u[i] * v[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= p * u[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-6) continue;
    for (auto& x : v) x /= n;
    q.push_back(std::move(v));
  }
  std::vector<double> flat;
  for (const auto& row : q) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor({d, d}, std::move(flat));
}

// A two-view batch with the heads its local losses need.
struct PretrainInstance {
  losses::AugmentedBatch batch;
  Tensor logits;
  model::SpatialHeads spatial;
  model::VecMapHead vecmap;
  model::ProjectionHead proj;

  losses::LocalHeads heads() const { return {spatial, vecmap, proj}; }

  std::vector<model::NamedTensor> head_tensors() const {
    auto out = spatial.named_tensors("spatial");
    for (auto& t : vecmap.named_tensors("vecmap")) out.push_back(t);
    for (auto& t : proj.named_tensors("proj")) out.push_back(t);
    return out;
  }

  std::vector<Tensor> inputs() const { return {batch.z, batch.maps, logits}; }

  std::vector<Tensor> all_tensors() const {
    auto out = inputs();
    for (auto& t : head_tensors()) out.push_back(t.tensor);
    return out;
  }
};

// n samples (2n views), c channels on a 2×2 map, projection dim d, labels drawn
// from `classes` values.
inline PretrainInstance random_pretrain_instance(Rng& rng, std::size_t n, std::size_t c, std::size_t d,
                                                 std::size_t classes) {
  PretrainInstance p;
  p.spatial = model::SpatialHeads(c, d, rng);
  p.vecmap = model::VecMapHead(c, d, rng);
  p.proj = model::ProjectionHead(c, 2 * c, d, rng);
  p.batch.z = random_tensor({2 * n, d}, rng);
  p.batch.maps = random_tensor({2 * n, c, 2, 2}, rng);
  p.batch.pair = losses::AugmentedBatch::split_halves_pairing(n);
  std::vector<std::size_t> sample_labels(n);
  for (auto& y : sample_labels) y = uniform_index(rng, classes);
  for (int half = 0; half < 2; ++half) {
    p.batch.labels.insert(p.batch.labels.end(), sample_labels.begin(), sample_labels.end());
  }
  p.logits = random_tensor({2 * n, classes}, rng);
  return p;
}

// Both views of an M-way K-shot episode with Q queries per class.
struct EpisodeInstance {
  meta::ViewedEpisode episode;
  meta::AttnModule attn;

  std::vector<Tensor> inputs() const {
    std::vector<Tensor> out;
    for (const auto& v : episode.views) {
      for (const auto& t : {v.support_h, v.support_z, v.query_h, v.query_z}) out.push_back(t);
    }
    return out;
  }

  std::vector<Tensor> all_tensors() const {
    auto out = inputs();
    for (auto& t : attn.parameters()) out.push_back(t);
    return out;
  }
};

inline EpisodeInstance random_episode_instance(Rng& rng, std::size_t m, std::size_t k, std::size_t q, std::size_t c,
                                               std::size_t d) {
  EpisodeInstance e;
  e.attn = meta::AttnModule(c, rng);
  e.episode.ways = m;
  e.episode.support_labels = class_major(m, k);
  e.episode.query_labels = class_major(m, q);
  for (auto& v : e.episode.views) {
    v.support_h = random_tensor({m * k, c}, rng);
    v.support_z = random_tensor({m * k, d}, rng);
    v.query_h = random_tensor({m * q, c}, rng);
    v.query_z = random_tensor({m * q, d}, rng);
  }
  return e;
}

// Sizes drawn uniformly within the small-instance envelope:
// N ≤ 4, M ≤ 3, K ≤ 2, Q ≤ 3, C ≤ 6, D ≤ 8.
inline PretrainInstance sampled_pretrain_instance(Rng& rng) {
  const std::size_t n = 1 + uniform_index(rng, 4), c = 1 + uniform_index(rng, 6), d = 2 + uniform_index(rng, 7);
  return random_pretrain_instance(rng, n, c, d, 1 + uniform_index(rng, 3));
}

inline EpisodeInstance sampled_episode_instance(Rng& rng) {
  const std::size_t m = 1 + uniform_index(rng, 3), k = 1 + uniform_index(rng, 2), q = 1 + uniform_index(rng, 3);
  const std::size_t c = 1 + uniform_index(rng, 6), d = 2 + uniform_index(rng, 7);
  return random_episode_instance(rng, m, k, q, c, d);
}

}  // namespace cfsl::verify
