#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cfsl/model/encoder.hpp"

namespace cfsl::losses {

enum class LossReduction { kSum, kMean };

// 2N views of N source samples. `pair[i]` is the index of the other view of
// the same source; `labels[i]` its class.
struct AugmentedBatch {
  Tensor z;     // [2N, D] projected vectors, unnormalized
  Tensor maps;  // [2N, C, H, W] feature maps
  std::vector<std::size_t> pair;
  std::vector<std::size_t> labels;

  std::size_t size() const { return pair.size(); }

  // Views i and i + N belong to the same sample.
  static std::vector<std::size_t> split_halves_pairing(std::size_t n_samples) {
    std::vector<std::size_t> pair(2 * n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
      pair[i] = i + n_samples;
      pair[i + n_samples] = i;
    }
    return pair;
  }

  void validate() const {
    const std::size_t n = pair.size();
    if (labels.size() != n) throw InvariantError("augmented batch: labels/pairing size mismatch");
    if (z.defined() && (z.rank() != 2 || z.shape()[0] != n)) {
      throw DimensionError("augmented batch: z has shape " + to_string(z.shape()));
    }
    if (maps.defined() && (maps.rank() != 4 || maps.shape()[0] != n)) {
      throw DimensionError("augmented batch: maps have shape " + to_string(maps.shape()));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = pair[i];
      if (j >= n || j == i || pair[j] != i) {
        throw InvariantError("augmented batch: pairing is not a fixed-point-free involution at " +
                             std::to_string(i));
      }
      if (labels[i] != labels[j]) {
        throw InvariantError("augmented batch: paired views " + std::to_string(i) + " and " + std::to_string(j) +
                             " carry different labels");
      }
    }
  }
};

struct PretrainLossWeights {
  double tau1 = 0.1, tau2 = 0.1, tau3 = 0.1, tau4 = 0.1;
  double alpha1 = 1.0, alpha2 = 1.0, alpha3 = 1.0;
  bool use_ce = true;
  bool use_global_ss = true;
  bool use_local_ss = true;
  bool use_vec_map = true;  // sub-parts of the local term
  bool use_map_map = true;
  bool use_global_sup = true;
  LossReduction reduction = LossReduction::kSum;

  void validate() const {
    for (double t : {tau1, tau2, tau3, tau4}) {
      if (!(t > 0.0)) throw ConfigError("temperatures must be positive");
    }
    for (double a : {alpha1, alpha2, alpha3}) {
      if (!(a >= 0.0)) throw ConfigError("balance scalars must be non-negative");
    }
  }
};

// Heads consumed by the local (map-level) losses.
struct LocalHeads {
  const model::SpatialHeads& spatial;
  const model::VecMapHead& vecmap;
  const model::ProjectionHead& proj;
};

namespace detail {

inline void require_batch(std::size_t n) {
  if (n < 2) throw InvariantError("degenerate batch: contrastive losses need at least 2 views");
}

// −Σ_ij W_ij · log softmax_{j≠i}(sim_i / τ)_j over an n×n similarity matrix,
// with the anchor itself excluded from every denominator.
inline Tensor anchor_excluded_nll(const Tensor& sim, double tau, std::vector<double> weights,
                                  LossReduction reduction) {
  const std::size_t n = sim.shape()[0];
  std::vector<double> mask(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = kMaskedLogit;
  Tensor logp = log_softmax(sim / tau + Tensor({n, n}, std::move(mask)), 1);
  Tensor loss = -sum(logp * Tensor({n, n}, std::move(weights)));
  if (reduction == LossReduction::kMean) loss = loss / static_cast<double>(n);
  return loss;
}

inline std::vector<double> positive_pair_weights(const std::vector<std::size_t>& pair) {
  const std::size_t n = pair.size();
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) w[i * n + pair[i]] = 1.0;
  return w;
}

}  // namespace detail

// S[i][j] = ẑ_i · ẑ_j for ℓ₂-normalized rows.
inline Tensor cosine_matrix(const Tensor& z) {
  Tensor zn = l2_normalize(z, 1);
  return matmul(zn, transpose(zn));
}

// Global self-supervised contrastive loss (NT-Xent over projected vectors).
inline Tensor global_ss_loss(const AugmentedBatch& batch, double tau1,
                             LossReduction reduction = LossReduction::kSum) {
  batch.validate();
  detail::require_batch(batch.size());
  return detail::anchor_excluded_nll(cosine_matrix(batch.z), tau1, detail::positive_pair_weights(batch.pair),
                                     reduction);
}

// S[x][y] = sim₁(x̂_x, x̂_y) for every ordered pair of maps in a batch. Each map
// is aligned to the other through softmax(q_other · k_selfᵀ / √D) · v_self, the
// aligned maps are ℓ₂-normalized per position and their inner products
// averaged over positions.
inline Tensor map_map_similarity_matrix(const Tensor& maps, const model::SpatialHeads& heads) {
  if (maps.rank() != 4) throw DimensionError("map-map: expected [B, C, H, W]");
  const std::size_t b = maps.shape()[0];
  const std::size_t hw = maps.shape()[2] * maps.shape()[3];
  const std::size_t d = heads.out_dim();
  Tensor pos = model::positions(maps);
  Tensor q = reshape(heads.fq(pos), {b * hw, d});
  Tensor k = reshape(heads.fk(pos), {b * hw, d});
  Tensor v = reshape(heads.fv(pos), {b, hw, d});
  Tensor logits = matmul(q, transpose(k)) / std::sqrt(static_cast<double>(d));
  // [key map y, query map x, query position, key position], so each key map
  // is one batched product against its own values.
  Tensor attn = softmax(permute(reshape(logits, {b, hw, b, hw}), {2, 0, 1, 3}), -1);
  // aligned[y][x] = v′_{y|x}: map y aligned to map x.
  Tensor aligned = reshape(l2_normalize(bmm(reshape(attn, {b, b * hw, hw}), v), -1), {b, b, hw, d});
  Tensor prod = aligned * permute(aligned, {1, 0, 2, 3});
  // prod is symmetric in (x, y), so the [y][x] layout needs no transpose.
  return sum(reshape(prod, {b, b, hw * d}), -1) / static_cast<double>(hw);
}

inline Tensor map_map_similarity(const Tensor& xa, const Tensor& xb, const model::SpatialHeads& heads) {
  if (xa.shape() != xb.shape() || xa.rank() != 3) {
    throw DimensionError("map_map_similarity: maps " + to_string(xa.shape()) + " and " + to_string(xb.shape()));
  }
  const auto& s = xa.shape();
  Tensor both = concat({reshape(xa, {1, s[0], s[1], s[2]}), reshape(xb, {1, s[0], s[1], s[2]})}, 0);
  Tensor sim = map_map_similarity_matrix(both, heads);
  return reshape(index_select(reshape(sim, {4}), 0, {1}), {});
}

// S[a][b] = sim₂(x̂_a, x̂_b) = mean over positions of ẑ_a · û_b,p with
// z_a = proj(GAP(x̂_a)) and u_b = ReLU(W x̂_b), both ℓ₂-normalized.
inline Tensor vec_map_similarity_matrix(const Tensor& maps, const model::VecMapHead& vecmap,
                                        const model::ProjectionHead& proj) {
  if (maps.rank() != 4) throw DimensionError("vec-map: expected [B, C, H, W]");
  const std::size_t b = maps.shape()[0];
  const std::size_t hw = maps.shape()[2] * maps.shape()[3];
  Tensor zn = l2_normalize(proj.project(global_avg_pool(maps)), 1);
  Tensor un = l2_normalize(vecmap(maps), -1);
  const std::size_t d = un.shape()[2];
  Tensor dots = matmul(zn, transpose(reshape(un, {b * hw, d})));
  return mean(reshape(dots, {b, b, hw}), -1);
}

inline Tensor vec_map_similarity(const Tensor& xa, const Tensor& xb, const model::VecMapHead& vecmap,
                                 const model::ProjectionHead& proj) {
  if (xa.shape() != xb.shape() || xa.rank() != 3) {
    throw DimensionError("vec_map_similarity: maps " + to_string(xa.shape()) + " and " + to_string(xb.shape()));
  }
  const auto& s = xa.shape();
  Tensor both = concat({reshape(xa, {1, s[0], s[1], s[2]}), reshape(xb, {1, s[0], s[1], s[2]})}, 0);
  Tensor sim = vec_map_similarity_matrix(both, vecmap, proj);
  return reshape(index_select(reshape(sim, {4}), 0, {1}), {});
}

inline Tensor map_map_loss(const AugmentedBatch& batch, const model::SpatialHeads& heads, double tau2,
                           LossReduction reduction = LossReduction::kSum) {
  batch.validate();
  detail::require_batch(batch.size());
  return detail::anchor_excluded_nll(map_map_similarity_matrix(batch.maps, heads), tau2,
                                     detail::positive_pair_weights(batch.pair), reduction);
}

inline Tensor vec_map_loss(const AugmentedBatch& batch, const model::VecMapHead& vecmap,
                           const model::ProjectionHead& proj, double tau3,
                           LossReduction reduction = LossReduction::kSum) {
  batch.validate();
  detail::require_batch(batch.size());
  return detail::anchor_excluded_nll(vec_map_similarity_matrix(batch.maps, vecmap, proj), tau3,
                                     detail::positive_pair_weights(batch.pair), reduction);
}

inline Tensor local_ss_loss(const AugmentedBatch& batch, const LocalHeads& heads, double tau2, double tau3,
                            LossReduction reduction = LossReduction::kSum) {
  return vec_map_loss(batch, heads.vecmap, heads.proj, tau3, reduction) +
         map_map_loss(batch, heads.spatial, tau2, reduction);
}

// Supervised contrastive loss: every other view with the anchor's label is a
// positive, each anchor's positives weighted by 1/|P(i)|.
inline Tensor global_sup_loss(const AugmentedBatch& batch, double tau4,
                              LossReduction reduction = LossReduction::kSum) {
  batch.validate();
  const std::size_t n = batch.size();
  detail::require_batch(n);
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t positives = 0;
    for (std::size_t j = 0; j < n; ++j) positives += (j != i && batch.labels[j] == batch.labels[i]);
    if (positives == 0) throw InvariantError("anchor " + std::to_string(i) + " has no positives");
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && batch.labels[j] == batch.labels[i]) w[i * n + j] = 1.0 / static_cast<double>(positives);
    }
  }
  return detail::anchor_excluded_nll(cosine_matrix(batch.z), tau4, std::move(w), reduction);
}

struct PretrainLoss {
  Tensor total;
  // Raw term values and their weighted contributions ("w_" prefix); the
  // weighted entries sum to "total".
  std::map<std::string, double> terms;
};

// L_CE + α₁·L_global^ss + α₂·L_local^ss + α₃·L_global^s with every term
// individually switchable. `logits` are classifier outputs for all 2N views.
inline PretrainLoss pretrain_total(const AugmentedBatch& batch, const Tensor& logits, const LocalHeads& heads,
                                   const PretrainLossWeights& w) {
  w.validate();
  batch.validate();
  PretrainLoss out;
  std::vector<Tensor> parts;
  auto add_term = [&](const std::string& name, const Tensor& raw, double weight) {
    Tensor weighted = weight == 1.0 ? raw : raw * weight;
    out.terms[name] = raw.item();
    out.terms["w_" + name] = weighted.item();
    parts.push_back(weighted);
  };
  if (w.use_ce) add_term("ce", model::cross_entropy(logits, batch.labels), 1.0);
  if (w.use_global_ss) add_term("global_ss", global_ss_loss(batch, w.tau1, w.reduction), w.alpha1);
  if (w.use_local_ss && (w.use_vec_map || w.use_map_map)) {
    Tensor local;
    if (w.use_vec_map) {
      Tensor vm = vec_map_loss(batch, heads.vecmap, heads.proj, w.tau3, w.reduction);
      out.terms["vec_map"] = vm.item();
      local = vm;
    }
    if (w.use_map_map) {
      Tensor mm = map_map_loss(batch, heads.spatial, w.tau2, w.reduction);
      out.terms["map_map"] = mm.item();
      local = local.defined() ? local + mm : mm;
    }
    add_term("local_ss", local, w.alpha2);
  }
  if (w.use_global_sup) add_term("global_sup", global_sup_loss(batch, w.tau4, w.reduction), w.alpha3);

  if (parts.empty()) {
    out.total = Tensor::scalar(0.0);
  } else {
    out.total = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) out.total = out.total + parts[i];
  }
  out.terms["total"] = out.total.item();
  return out;
}

}  // namespace cfsl::losses
