#pragma once

// Literal-summation reference implementations of the contrastive and episodic
// losses. Deliberately naive: nested loops over std::vector, no tensors, no
// autodiff, no BLAS. Nothing here may include library code, so a bug in the
// library kernels cannot leak into the reference values.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace cfsl::oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, Mat[row][col]

// y = W·x + b with W stored [out][in].
struct Affine {
  Mat w;
  Vec b;  // may be empty
};

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("oracle dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Vec normalized(const Vec& a) {
  double n = std::sqrt(dot(a, a));
  if (n < 1e-12) n = 1e-12;
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / n;
  return out;
}

inline double cosine(const Vec& a, const Vec& b) { return dot(normalized(a), normalized(b)); }

inline Vec affine_apply(const Affine& f, const Vec& x) {
  Vec y(f.w.size(), 0.0);
  for (std::size_t o = 0; o < f.w.size(); ++o) {
    y[o] = f.b.empty() ? 0.0 : f.b[o];
    for (std::size_t i = 0; i < x.size(); ++i) y[o] += f.w[o][i] * x[i];
  }
  return y;
}

inline Vec relu(Vec v) {
  for (auto& x : v) x = x > 0.0 ? x : 0.0;
  return v;
}

// A C×H×W map given as flat row-major data, returned as one C-vector per
// position (position-major).
inline Mat map_positions(const Vec& flat, std::size_t c, std::size_t hw) {
  Mat out(hw, Vec(c));
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) out[p][ch] = flat[ch * hw + p];
  }
  return out;
}

// Σ_i −log( exp(S[i][i′]/τ) / Σ_{j≠i} exp(S[i][j]/τ) ).
inline double nt_xent(const Mat& sim, const std::vector<std::size_t>& pair, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < sim.size(); ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < sim.size(); ++j) {
      if (j != i) denom += std::exp(sim[i][j] / tau);
    }
    total += -std::log(std::exp(sim[i][pair[i]] / tau) / denom);
  }
  return total;
}

inline Mat cosine_table(const Mat& z) {
  Mat s(z.size(), Vec(z.size()));
  for (std::size_t i = 0; i < z.size(); ++i) {
    for (std::size_t j = 0; j < z.size(); ++j) s[i][j] = cosine(z[i], z[j]);
  }
  return s;
}

inline double global_ss(const Mat& z, const std::vector<std::size_t>& pair, double tau) {
  return nt_xent(cosine_table(z), pair, tau);
}

inline double supcon(const Mat& z, const std::vector<std::size_t>& labels, double tau) {
  const Mat s = cosine_table(z);
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (j != i) denom += std::exp(s[i][j] / tau);
    }
    std::size_t positives = 0;
    double term = 0.0;
    for (std::size_t p = 0; p < z.size(); ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      ++positives;
      term += -std::log(std::exp(s[i][p] / tau) / denom);
    }
    if (positives == 0) throw std::invalid_argument("oracle supcon: anchor without positives");
    total += term / static_cast<double>(positives);
  }
  return total;
}

// v′_{a|b}: map a's values re-weighted by attention from b's queries to a's keys.
inline Mat aligned_values(const Mat& pos_a, const Mat& pos_b, const Affine& fq, const Affine& fk,
                          const Affine& fv) {
  const std::size_t hw = pos_a.size();
  const double scale = std::sqrt(static_cast<double>(fq.w.size()));
  Mat out;
  for (std::size_t p = 0; p < hw; ++p) {
    const Vec q = affine_apply(fq, pos_b[p]);
    Vec logits(hw);
    double mx = -INFINITY;
    for (std::size_t r = 0; r < hw; ++r) {
      logits[r] = dot(q, affine_apply(fk, pos_a[r])) / scale;
      if (logits[r] > mx) mx = logits[r];
    }
    double z = 0.0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    Vec v(fv.w.size(), 0.0);
    for (std::size_t r = 0; r < hw; ++r) {
      const Vec vr = affine_apply(fv, pos_a[r]);
      for (std::size_t d = 0; d < v.size(); ++d) v[d] += logits[r] / z * vr[d];
    }
    out.push_back(v);
  }
  return out;
}

inline double sim1(const Mat& pos_a, const Mat& pos_b, const Affine& fq, const Affine& fk, const Affine& fv) {
  const Mat ab = aligned_values(pos_a, pos_b, fq, fk, fv);
  const Mat ba = aligned_values(pos_b, pos_a, fq, fk, fv);
  double s = 0.0;
  for (std::size_t p = 0; p < ab.size(); ++p) s += dot(normalized(ab[p]), normalized(ba[p]));
  return s / static_cast<double>(ab.size());
}

// proj(GAP(x̂_a)) against ReLU(W x̂_b) at every position of b.
inline double sim2(const Mat& pos_a, const Mat& pos_b, const Affine& g, const Affine& proj1,
                   const Affine& proj2) {
  Vec gap(pos_a[0].size(), 0.0);
  for (const auto& p : pos_a) {
    for (std::size_t c = 0; c < gap.size(); ++c) gap[c] += p[c] / static_cast<double>(pos_a.size());
  }
  const Vec za = normalized(affine_apply(proj2, relu(affine_apply(proj1, gap))));
  double s = 0.0;
  for (const auto& p : pos_b) s += dot(za, normalized(relu(affine_apply(g, p))));
  return s / static_cast<double>(pos_b.size());
}

inline double map_map_loss(const std::vector<Mat>& pos, const std::vector<std::size_t>& pair, const Affine& fq,
                           const Affine& fk, const Affine& fv, double tau) {
  Mat s(pos.size(), Vec(pos.size()));
  for (std::size_t i = 0; i < pos.size(); ++i) {
    for (std::size_t j = 0; j < pos.size(); ++j) s[i][j] = sim1(pos[i], pos[j], fq, fk, fv);
  }
  return nt_xent(s, pair, tau);
}

inline double vec_map_loss(const std::vector<Mat>& pos, const std::vector<std::size_t>& pair, const Affine& g,
                           const Affine& proj1, const Affine& proj2, double tau) {
  Mat s(pos.size(), Vec(pos.size()));
  for (std::size_t i = 0; i < pos.size(); ++i) {
    for (std::size_t j = 0; j < pos.size(); ++j) s[i][j] = sim2(pos[i], pos[j], g, proj1, proj2);
  }
  return nt_xent(s, pair, tau);
}

// Per-class means; labels are 0..m−1.
inline Mat class_means(const Mat& x, const std::vector<std::size_t>& labels, std::size_t m) {
  Mat out(m, Vec(x.at(0).size(), 0.0));
  std::vector<std::size_t> count(m, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    ++count[labels[i]];
    for (std::size_t d = 0; d < x[i].size(); ++d) out[labels[i]][d] += x[i][d];
  }
  for (std::size_t k = 0; k < m; ++k) {
    if (count[k] == 0) throw std::invalid_argument("oracle class_means: empty class");
    for (auto& v : out[k]) v /= static_cast<double>(count[k]);
  }
  return out;
}

inline double euclid(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// softmax over −d(h, prototype_k).
inline Vec proto_probs(const Vec& h, const Mat& protos) {
  Vec p(protos.size());
  double z = 0.0;
  for (std::size_t k = 0; k < protos.size(); ++k) z += (p[k] = std::exp(-euclid(h, protos[k])));
  for (auto& v : p) v /= z;
  return p;
}

// Mean NLL of queries against prototypes.
inline double proto_nll(const Mat& queries, const std::vector<std::size_t>& labels, const Mat& protos) {
  double s = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) s += -std::log(proto_probs(queries[i], protos)[labels[i]]);
  return s / static_cast<double>(queries.size());
}

// Distance-scaled contrastive loss. Query i of one view is paired with
// query i of the other view. Sets are enumerated explicitly per anchor.
struct EpisodeZ {
  Mat s1, s2, q1, q2;
  std::vector<std::size_t> support_labels, query_labels;
  std::size_t ways = 0;
};

inline double distance_scaled(const EpisodeZ& e, double tau) {
  if (e.s1.empty()) throw std::invalid_argument("oracle distance_scaled: empty support");
  const Mat o1 = class_means(e.s1, e.support_labels, e.ways);
  const Mat o2 = class_means(e.s2, e.support_labels, e.ways);
  auto term = [&](const Vec& zi, const Vec& zc) {
    const double c = cosine(zi, zc);
    return (2.0 - c) * std::exp(c / tau);
  };
  double total = 0.0;
  for (int view = 0; view < 2; ++view) {
    const Mat& own = view == 0 ? e.q1 : e.q2;
    const Mat& other = view == 0 ? e.q2 : e.q1;
    for (std::size_t i = 0; i < own.size(); ++i) {
      const Vec& zi = own[i];
      const std::size_t y = e.query_labels[i];
      std::vector<Vec> positives{other[i]};
      std::vector<Vec> candidates{other[i]};
      for (const Mat* s : {&e.s1, &e.s2}) {
        for (std::size_t j = 0; j < s->size(); ++j) {
          candidates.push_back((*s)[j]);
          if (e.support_labels[j] == y) positives.push_back((*s)[j]);
        }
      }
      for (const Mat* o : {&o1, &o2}) {
        for (const auto& v : *o) candidates.push_back(v);
      }
      double denom = 0.0;
      for (const auto& za : candidates) denom += term(zi, za);
      double l = 0.0;
      for (const auto& zh : positives) l += -std::log(term(zi, zh) / denom);
      total += l / static_cast<double>(positives.size());
    }
  }
  return total;
}

// Transformer block over a set of rows: LN(x + Wo·softmax(QKᵀ/√C)V), then
// LN(y + FF₂ ReLU(FF₁ y)).
struct AttnBlock {
  Affine wq, wk, wv, wo, ff1, ff2;
  Vec ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

inline Vec layer_norm(const Vec& x, const Vec& gamma, const Vec& beta, double eps = 1e-5) {
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gamma[i] * (x[i] - mu) / std::sqrt(var + eps) + beta[i];
  return out;
}

inline Mat attention_weights(const AttnBlock& a, const Mat& x) {
  const double scale = std::sqrt(static_cast<double>(x.at(0).size()));
  Mat w(x.size(), Vec(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      w[i][j] = std::exp(dot(affine_apply(a.wq, x[i]), affine_apply(a.wk, x[j])) / scale);
      z += w[i][j];
    }
    for (auto& v : w[i]) v /= z;
  }
  return w;
}

inline Mat attention_block(const AttnBlock& a, const Mat& x) {
  const Mat w = attention_weights(a, x);
  Mat out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Vec mix(x[i].size(), 0.0);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const Vec v = affine_apply(a.wv, x[j]);
      for (std::size_t c = 0; c < mix.size(); ++c) mix[c] += w[i][j] * v[c];
    }
    Vec y = affine_apply(a.wo, mix);
    for (std::size_t c = 0; c < y.size(); ++c) y[c] += x[i][c];
    y = layer_norm(y, a.ln1_gamma, a.ln1_beta);
    Vec f = affine_apply(a.ff2, relu(affine_apply(a.ff1, y)));
    for (std::size_t c = 0; c < f.size(); ++c) f[c] += y[c];
    out.push_back(layer_norm(f, a.ln2_gamma, a.ln2_beta));
  }
  return out;
}

// Average of the four cross-view terms: queries of view m against the aligned
// prototypes of view n.
inline double cross_view(const std::vector<Mat>& support_h, const std::vector<Mat>& query_h,
                         const std::vector<std::size_t>& support_labels, const std::vector<std::size_t>& query_labels,
                         std::size_t ways, const AttnBlock& a) {
  double s = 0.0;
  for (std::size_t m = 0; m < 2; ++m) {
    for (std::size_t n = 0; n < 2; ++n) {
      s += proto_nll(query_h[m], query_labels, attention_block(a, class_means(support_h[n], support_labels, ways)));
    }
  }
  return s / 4.0;
}

}  // namespace cfsl::oracle
