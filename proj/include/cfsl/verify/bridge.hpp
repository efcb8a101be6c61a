#pragma once

// Converts library objects into the plain containers the literal oracle reads.

#include "cfsl/meta/episodic.hpp"
#include "cfsl/model/encoder.hpp"
#include "cfsl/verify/literal_oracle.hpp"

namespace cfsl::verify {

inline oracle::Mat rows(const Tensor& t) {
  const std::size_t n = t.shape()[0], d = t.numel() / n;
  oracle::Mat out(n, oracle::Vec(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i][j] = t.data()[i * d + j];
  }
  return out;
}

inline oracle::Affine affine(const model::Linear& l) {
  oracle::Affine a{rows(l.weight), {}};
  if (l.bias.defined()) a.b.assign(l.bias.data().begin(), l.bias.data().end());
  return a;
}

// [B, C, H, W] → one position list per map.
inline std::vector<oracle::Mat> map_positions(const Tensor& maps) {
  const auto& s = maps.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  std::vector<oracle::Mat> out;
  for (std::size_t b = 0; b < s[0]; ++b) {
    oracle::Vec flat(maps.data().begin() + b * per, maps.data().begin() + (b + 1) * per);
    out.push_back(oracle::map_positions(flat, s[1], s[2] * s[3]));
  }
  return out;
}

inline oracle::AttnBlock attn_block(const meta::AttnModule& a) {
  auto vec = [](const Tensor& t) { return oracle::Vec(t.data().begin(), t.data().end()); };
  return {affine(a.wq),        affine(a.wk),       affine(a.wv),        affine(a.wo),      affine(a.ff1),
          affine(a.ff2),       vec(a.ln1.gamma),   vec(a.ln1.beta),     vec(a.ln2.gamma),  vec(a.ln2.beta)};
}

}  // namespace cfsl::verify
