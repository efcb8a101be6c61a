#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cfsl/model/layers.hpp"

namespace cfsl::meta {

// Embeddings of one augmented view of an episode. Support rows are ordered
// class-major (slot k·K + s) and query rows k·Q + q; labels are 0..M−1.
struct ViewEmbeddings {
  Tensor support_h;  // [M·K, C]
  Tensor support_z;  // [M·K, D]
  Tensor query_h;    // [M·Q, C]
  Tensor query_z;    // [M·Q, D]
};

// Both views of one base episode. Slot i of either view comes from the same
// source image, so query i of view 1 and query i of view 2 form a positive pair.
struct ViewedEpisode {
  std::array<ViewEmbeddings, 2> views;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query_labels;
  std::size_t ways = 0;

  void validate() const {
    if (ways == 0 || support_labels.empty()) throw InvariantError("episode has no support samples");
    std::vector<std::size_t> count(ways, 0);
    for (auto y : support_labels) {
      if (y >= ways) throw InvariantError("support label " + std::to_string(y) + " out of range");
      ++count[y];
    }
    for (std::size_t k = 0; k < ways; ++k) {
      if (count[k] == 0) throw InvariantError("class " + std::to_string(k) + " has no support samples");
    }
    for (auto y : query_labels) {
      if (y >= ways) throw InvariantError("query label " + std::to_string(y) + " out of range");
    }
    if (!views[0].support_h.defined()) throw InvariantError("episode view 1 is missing");
    for (const auto& v : views) {
      if (!v.support_h.defined()) continue;  // single-view ablation
      auto rows = [](const Tensor& t) { return t.defined() ? t.shape()[0] : std::size_t{0}; };
      if (rows(v.support_h) != support_labels.size() || rows(v.query_h) != query_labels.size()) {
        throw DimensionError("episode view does not match its label structure");
      }
      if (v.support_z.defined() && rows(v.support_z) != support_labels.size()) {
        throw DimensionError("episode view: support z rows mismatch");
      }
      if (v.query_z.defined() && rows(v.query_z) != query_labels.size()) {
        throw DimensionError("episode view: query z rows mismatch");
      }
    }
  }
};

// Per-class means of the rows of x: [n, C] → [M, C].
inline Tensor prototypes(const Tensor& x, const std::vector<std::size_t>& labels, std::size_t ways) {
  if (x.rank() != 2 || x.shape()[0] != labels.size()) {
    throw DimensionError("prototypes: " + to_string(x.shape()) + " rows vs " + std::to_string(labels.size()) +
                         " labels");
  }
  std::vector<std::size_t> count(ways, 0);
  for (auto y : labels) {
    if (y >= ways) throw InvariantError("prototypes: label " + std::to_string(y) + " out of range");
    ++count[y];
  }
  std::vector<double> avg(ways * labels.size(), 0.0);
  for (std::size_t k = 0; k < ways; ++k) {
    if (count[k] == 0) throw InvariantError("prototypes: class " + std::to_string(k) + " is empty");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    avg[labels[i] * labels.size() + i] = 1.0 / static_cast<double>(count[labels[i]]);
  }
  return matmul(Tensor({ways, labels.size()}, std::move(avg)), x);
}

struct AttentionResult {
  Tensor out;      // [M, C]
  Tensor weights;  // [M, M], rows sum to 1
};

// Single-head transformer block over the set of prototypes:
//   y   = LN₁(x + W_o · softmax(QKᵀ/√C) V)
//   out = LN₂(y + FF₂ ReLU(FF₁ y))
class AttnModule : public model::Module {
 public:
  AttnModule() = default;
  AttnModule(std::size_t dim, Rng& rng)
      : wq(dim, dim, rng, false),
        wk(dim, dim, rng, false),
        wv(dim, dim, rng, false),
        wo(dim, dim, rng),
        ff1(dim, dim, rng),
        ff2(dim, dim, rng),
        ln1(dim),
        ln2(dim) {}

  AttentionResult forward(const Tensor& x) const {
    if (x.rank() != 2 || x.shape()[1] != wq.in_features()) {
      throw DimensionError("attention: expected [M, " + std::to_string(wq.in_features()) + "], got " +
                           to_string(x.shape()));
    }
    const double scale = std::sqrt(static_cast<double>(x.shape()[1]));
    Tensor weights = softmax(matmul(wq(x), transpose(wk(x))) / scale, 1);
    Tensor y = ln1(x + wo(matmul(weights, wv(x))));
    return {ln2(y + ff2(relu(ff1(y)))), weights};
  }

  Tensor operator()(const Tensor& x) const { return forward(x).out; }

  void collect(const std::string& prefix, std::vector<model::NamedTensor>& out) const override {
    wq.collect(model::join_name(prefix, "wq"), out);
    wk.collect(model::join_name(prefix, "wk"), out);
    wv.collect(model::join_name(prefix, "wv"), out);
    wo.collect(model::join_name(prefix, "wo"), out);
    ff1.collect(model::join_name(prefix, "ff1"), out);
    ff2.collect(model::join_name(prefix, "ff2"), out);
    ln1.collect(model::join_name(prefix, "ln1"), out);
    ln2.collect(model::join_name(prefix, "ln2"), out);
  }

  model::Linear wq, wk, wv, wo, ff1, ff2;
  model::LayerNorm ln1, ln2;
};

struct MetaLossConfig {
  double tau5 = 0.1;
  double beta = 0.01;
  bool cvet = true;              // average all four cross-view terms; else view 1 only
  bool info = true;              // distance-scaled contrastive term
  bool bypass_attention = false;  // plain prototypes (ProtoNet)
  bool squared_distance = false;

  void validate() const {
    if (!(tau5 > 0.0)) throw ConfigError("meta.tau5 must be positive");
    if (!(beta >= 0.0)) throw ConfigError("meta.beta must be non-negative");
  }
};

inline Tensor align(const Tensor& raw, const AttnModule& attn, bool bypass = false) {
  return bypass ? raw : attn(raw);
}

// −d(h, c′ₖ) for every query row and prototype: [n, M].
inline Tensor neg_distances(const Tensor& h, const Tensor& aligned, bool squared = false) {
  return -pairwise_euclidean(h, aligned, squared);
}

// softmax over negative distances to the aligned prototypes.
inline Tensor classify_query(const Tensor& h, const Tensor& aligned, bool squared = false) {
  Tensor rows = h.rank() == 1 ? reshape(h, {1, h.shape()[0]}) : h;
  return softmax(neg_distances(rows, aligned, squared), 1);
}

// Mean negative log-likelihood of labelled queries against aligned prototypes.
inline Tensor prototype_nll(const Tensor& h, const std::vector<std::size_t>& labels, const Tensor& aligned,
                            bool squared = false) {
  const std::size_t n = labels.size(), m = aligned.shape()[0];
  std::vector<double> pick(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) pick[i * m + labels[i]] = -1.0 / static_cast<double>(n);
  return sum(log_softmax(neg_distances(h, aligned, squared), 1) * Tensor({n, m}, std::move(pick)));
}

struct CrossViewLoss {
  Tensor total;
  // terms[m][n]: queries of view m+1 against aligned prototypes of view n+1.
  std::array<std::array<Tensor, 2>, 2> terms;
};

inline CrossViewLoss cross_view_loss(const ViewedEpisode& ve, const AttnModule& attn, const MetaLossConfig& cfg) {
  ve.validate();
  std::array<Tensor, 2> aligned;
  const std::size_t used_views = cfg.cvet ? 2 : 1;
  for (std::size_t r = 0; r < used_views; ++r) {
    aligned[r] = align(prototypes(ve.views[r].support_h, ve.support_labels, ve.ways), attn, cfg.bypass_attention);
  }
  CrossViewLoss out;
  for (std::size_t m = 0; m < used_views; ++m) {
    for (std::size_t n = 0; n < used_views; ++n) {
      out.terms[m][n] = prototype_nll(ve.views[m].query_h, ve.query_labels, aligned[n], cfg.squared_distance);
    }
  }
  out.total = cfg.cvet ? (out.terms[0][0] + out.terms[0][1] + out.terms[1][0] + out.terms[1][1]) * 0.25
                       : out.terms[0][0];
  return out;
}

// λ_ab = 2 − cos(z_a, z_b).
inline Tensor distance_coefficient(const Tensor& a, const Tensor& b) { return 2.0 - cosine_similarity(a, b); }

// Distance-scaled contrastive loss over the queries of both views. For anchor
// z_i the positives are its other view z_i′ and every same-class support of
// both views; candidates are z_i′, all supports and all z-space prototypes.
// Each term is weighted by λ = 2 − cos, and each anchor by 1/|H(z_i)|.
inline Tensor distance_scaled_loss(const ViewedEpisode& ve, double tau5) {
  ve.validate();
  if (!(tau5 > 0.0)) throw ConfigError("tau5 must be positive");
  const std::size_t mq = ve.query_labels.size(), mk = ve.support_labels.size(), m = ve.ways;
  if (mk == 0) throw InvariantError("distance-scaled loss needs support samples");
  const auto& v1 = ve.views[0];
  const auto& v2 = ve.views[1];
  for (const auto* v : {&v1, &v2}) {
    if (!v->support_z.defined() || !v->query_z.defined()) {
      throw InvariantError("distance-scaled loss needs projected vectors of both views");
    }
  }
  Tensor o1 = prototypes(v1.support_z, ve.support_labels, m);
  Tensor o2 = prototypes(v2.support_z, ve.support_labels, m);
  Tensor anchors = l2_normalize(concat({v1.query_z, v2.query_z}, 0), 1);
  Tensor candidates = l2_normalize(concat({v1.query_z, v2.query_z, v1.support_z, v2.support_z, o1, o2}, 0), 1);
  Tensor sim = matmul(anchors, transpose(candidates));

  const std::size_t rows = 2 * mq, cols = 2 * mq + 2 * mk + 2 * m;
  std::vector<double> mask(rows * cols, 0.0), weight(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t partner = i < mq ? i + mq : i - mq;
    const std::size_t y = ve.query_labels[i % mq];
    for (std::size_t j = 0; j < 2 * mq; ++j) {
      if (j != partner) mask[i * cols + j] = kMaskedLogit;
    }
    std::vector<std::size_t> positives{partner};
    for (std::size_t s = 0; s < 2 * mk; ++s) {
      if (ve.support_labels[s % mk] == y) positives.push_back(2 * mq + s);
    }
    for (auto p : positives) weight[i * cols + p] = 1.0 / static_cast<double>(positives.size());
  }
  Tensor logits = log(2.0 - sim) + sim / tau5 + Tensor({rows, cols}, std::move(mask));
  return -sum(log_softmax(logits, 1) * Tensor({rows, cols}, std::move(weight)));
}

struct MetaLoss {
  Tensor total;
  std::map<std::string, double> terms;  // "meta", "info", "w_info", "l11".."l22", "total"
};

// L_meta + β·L_info, each part switchable for ablations.
inline MetaLoss meta_total(const ViewedEpisode& ve, const AttnModule& attn, const MetaLossConfig& cfg) {
  cfg.validate();
  MetaLoss out;
  auto cv = cross_view_loss(ve, attn, cfg);
  out.terms["meta"] = cv.total.item();
  for (std::size_t m = 0; m < 2; ++m) {
    for (std::size_t n = 0; n < 2; ++n) {
      if (cv.terms[m][n].defined()) {
        out.terms["l" + std::to_string(m + 1) + std::to_string(n + 1)] = cv.terms[m][n].item();
      }
    }
  }
  out.total = cv.total;
  if (cfg.info && cfg.beta > 0.0) {
    Tensor info = distance_scaled_loss(ve, cfg.tau5);
    Tensor weighted = info * cfg.beta;
    out.terms["info"] = info.item();
    out.terms["w_info"] = weighted.item();
    out.total = out.total + weighted;
  }
  out.terms["total"] = out.total.item();
  return out;
}

// Nearest aligned prototype for each query; ties go to the smallest class index.
inline std::vector<std::size_t> meta_test_predict(const Tensor& support_h, const std::vector<std::size_t>& labels,
                                                  std::size_t ways, const Tensor& query_h, const AttnModule& attn,
                                                  const MetaLossConfig& cfg) {
  NoGradGuard no_grad;
  Tensor aligned = align(prototypes(support_h, labels, ways), attn, cfg.bypass_attention);
  Tensor scores = neg_distances(query_h, aligned, cfg.squared_distance);
  const std::size_t n = scores.shape()[0], m = scores.shape()[1];
  std::vector<std::size_t> pred(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 1; k < m; ++k) {
      if (scores.data()[i * m + k] > scores.data()[i * m + pred[i]]) pred[i] = k;
    }
  }
  return pred;
}

}  // namespace cfsl::meta
