#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "cfsl/tensor/ops.hpp"

namespace cfsl {

namespace detail {

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
};

// col[(c·kh + i)·kw + j][b·pixels + y·wo + x] = padded input sample.
inline void im2col(const ConvGeometry& g, const double* x, std::vector<double>& col) {
  const std::size_t cols = g.batch * g.pixels();
  col.assign(g.patch() * cols, 0.0);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col.data() + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* img = x + (b * g.cin + c) * g.h * g.w;
          for (std::size_t y = 0; y < g.ho; ++y) {
            const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            double* dst = row + b * g.pixels() + y * g.wo;
            for (std::size_t xo = 0; xo < g.wo; ++xo) {
              const auto ix = static_cast<std::ptrdiff_t>(xo * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              dst[xo] = img[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

inline void col2im_add(const ConvGeometry& g, const std::vector<double>& col, double* dx) {
  const std::size_t cols = g.batch * g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col.data() + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* img = dx + (b * g.cin + c) * g.h * g.w;
          for (std::size_t y = 0; y < g.ho; ++y) {
            const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const double* src = row + b * g.pixels() + y * g.wo;
            for (std::size_t xo = 0; xo < g.wo; ++xo) {
              const auto ix = static_cast<std::ptrdiff_t>(xo * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              img[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] += src[xo];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation of x [B, Cin, H, W] with w [Cout, Cin, kh, kw]; b [Cout]
// may be undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1,
                     std::size_t pad = 0) {
  if (x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1]) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " vs weight " +
                         to_string(w.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  detail::ConvGeometry g{};
  g.batch = x.shape()[0];
  g.cin = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.cout = w.shape()[0];
  g.kh = w.shape()[2];
  g.kw = w.shape()[3];
  g.stride = stride;
  g.pad = pad;
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (b.defined() && (b.rank() != 1 || b.shape()[0] != g.cout)) {
    throw DimensionError("conv2d: bias shape " + to_string(b.shape()));
  }

  std::vector<double> col;
  detail::im2col(g, x.data().data(), col);
  const std::size_t cols = g.batch * g.pixels();
  std::vector<double> tmp(g.cout * cols);
  detail::gemm(false, false, g.cout, cols, g.patch(), w.data().data(), col.data(), tmp.data(), 0.0);
  std::vector<double> out(g.batch * g.cout * g.pixels());
  auto bd = b.defined() ? b.data() : std::span<const double>{};
  for (std::size_t bi = 0; bi < g.batch; ++bi) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      const double bias = bd.empty() ? 0.0 : bd[co];
      const double* src = tmp.data() + co * cols + bi * g.pixels();
      double* dst = out.data() + (bi * g.cout + co) * g.pixels();
      for (std::size_t p = 0; p < g.pixels(); ++p) dst[p] = src[p] + bias;
    }
  }
  bool keep_col = grad_enabled() && w.requires_grad();
  if (!keep_col) col.clear();
  return detail::make_result(
      {g.batch, g.cout, g.ho, g.wo}, std::move(out), {x, w, b}, "conv2d",
      [g, col = std::move(col)](detail::Node& self) {
        const std::size_t cols = g.batch * g.pixels();
        // Gradient laid out as [Cout, B·pixels] to match the im2col matrix.
        std::vector<double> gt(g.cout * cols);
        for (std::size_t bi = 0; bi < g.batch; ++bi) {
          for (std::size_t co = 0; co < g.cout; ++co) {
            const double* src = self.grad.data() + (bi * g.cout + co) * g.pixels();
            std::copy_n(src, g.pixels(), gt.data() + co * cols + bi * g.pixels());
          }
        }
        detail::Node& nx = *self.inputs[0];
        detail::Node& nw = *self.inputs[1];
        if (nw.requires_grad) {
          detail::gemm(false, true, g.cout, g.patch(), cols, gt.data(), col.data(), nw.grad_buffer().data(), 1.0);
        }
        if (detail::wants_grad(self, 2)) {
          auto& db = self.inputs[2]->grad_buffer();
          for (std::size_t co = 0; co < g.cout; ++co) {
            double s = 0.0;
            for (std::size_t p = 0; p < cols; ++p) s += gt[co * cols + p];
            db[co] += s;
          }
        }
        if (nx.requires_grad) {
          std::vector<double> dcol(g.patch() * cols);
          detail::gemm(true, false, g.patch(), cols, g.cout, nw.data.data(), gt.data(), dcol.data(), 0.0);
          detail::col2im_add(g, dcol, nx.grad_buffer().data());
        }
      });
}

// Non-overlapping-or-strided max pooling over the last two axes of [B, C, H, W].
inline Tensor max_pool2d(const Tensor& x, std::size_t kernel = 2, std::size_t stride = 2) {
  if (x.rank() != 4) throw DimensionError("max_pool2d expects [B, C, H, W]");
  const std::size_t bc = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h < kernel || w < kernel) throw DimensionError("max_pool2d: input smaller than kernel");
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  auto xd = x.data();
  std::vector<double> out(bc * ho * wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t c = 0; c < bc; ++c) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xo = 0; xo < wo; ++xo) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < kernel; ++i) {
          for (std::size_t j = 0; j < kernel; ++j) {
            std::size_t idx = c * h * w + (y * stride + i) * w + xo * stride + j;
            if (xd[idx] > best) {
              best = xd[idx];
              best_idx = idx;
            }
          }
        }
        out[(c * ho + y) * wo + xo] = best;
        arg[(c * ho + y) * wo + xo] = best_idx;
      }
    }
  }
  return detail::make_result({x.shape()[0], x.shape()[1], ho, wo}, std::move(out), {x}, "max_pool2d",
                             [arg = std::move(arg)](detail::Node& self) {
                               auto& dst = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < arg.size(); ++i) dst[arg[i]] += self.grad[i];
                             });
}

// Mean over the spatial axes: [B, C, H, W] → [B, C].
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool expects [B, C, H, W]");
  const std::size_t bc = x.shape()[0] * x.shape()[1];
  const std::size_t hw = x.shape()[2] * x.shape()[3];
  if (hw == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  auto xd = x.data();
  std::vector<double> out(bc);
  for (std::size_t c = 0; c < bc; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += xd[c * hw + p];
    out[c] = s / static_cast<double>(hw);
  }
  return detail::make_result({x.shape()[0], x.shape()[1]}, std::move(out), {x}, "global_avg_pool",
                             [bc, hw](detail::Node& self) {
                               auto& dst = self.inputs[0]->grad_buffer();
                               const double inv = 1.0 / static_cast<double>(hw);
                               for (std::size_t c = 0; c < bc; ++c) {
                                 const double g = self.grad[c] * inv;
                                 for (std::size_t p = 0; p < hw; ++p) dst[c * hw + p] += g;
                               }
                             });
}

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.9;  // running ← momentum·running + (1 − momentum)·batch
  double eps = 1e-5;
};

// Per-channel normalization of [B, C, H, W] (or [B, C]). In training mode the
// batch statistics are used and the running buffers (plain leaves without
// grad) are updated in place; in eval mode the running buffers are used.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                         Tensor running_var, const BatchNormOptions& opt = {}) {
  if (x.rank() != 4 && x.rank() != 2) throw DimensionError("batch_norm expects rank 2 or 4");
  const std::size_t batch = x.shape()[0], channels = x.shape()[1];
  const std::size_t spatial = x.rank() == 4 ? x.shape()[2] * x.shape()[3] : 1;
  if (gamma.numel() != channels || beta.numel() != channels || running_mean.numel() != channels ||
      running_var.numel() != channels) {
    throw DimensionError("batch_norm: parameter size does not match channel count");
  }
  const std::size_t count = batch * spatial;
  auto xd = x.data();
  std::vector<double> mu(channels), invstd(channels);
  if (opt.training) {
    if (count < 2) throw DimensionError("batch_norm: training needs more than one value per channel");
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xd.data() + (b * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xd.data() + (b * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / static_cast<double>(count);
      mu[c] = m;
      invstd[c] = 1.0 / std::sqrt(var + opt.eps);
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[c] = opt.momentum * rm[c] + (1.0 - opt.momentum) * m;
      rv[c] = opt.momentum * rv[c] + (1.0 - opt.momentum) * unbiased;
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = rm[c];
      invstd[c] = 1.0 / std::sqrt(rv[c] + opt.eps);
    }
  }
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> xhat(xd.size()), out(xd.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        xhat[base + i] = (xd[base + i] - mu[c]) * invstd[c];
        out[base + i] = gd[c] * xhat[base + i] + bd[c];
      }
    }
  }
  const bool training = opt.training;
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](detail::Node& self) {
        const auto& g = self.grad;
        const auto& gam = self.inputs[1]->data;
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              sum_g[c] += g[base + i];
              sum_gx[c] += g[base + i] * xhat[base + i];
            }
          }
        }
        if (self.inputs[1]->requires_grad) {
          auto& dg = self.inputs[1]->grad_buffer();
          for (std::size_t c = 0; c < channels; ++c) dg[c] += sum_gx[c];
        }
        if (self.inputs[2]->requires_grad) {
          auto& db = self.inputs[2]->grad_buffer();
          for (std::size_t c = 0; c < channels; ++c) db[c] += sum_g[c];
        }
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad_buffer();
        const double n = static_cast<double>(count);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * spatial;
            const double k = gam[c] * invstd[c];
            for (std::size_t i = 0; i < spatial; ++i) {
              if (training) {
                dx[base + i] += k * (g[base + i] - sum_g[c] / n - xhat[base + i] * sum_gx[c] / n);
              } else {
                dx[base + i] += k * g[base + i];
              }
            }
          }
        }
      });
}

// Normalizes over the last axis, then applies the affine gain/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  Tensor centered = x - mean(x, -1, true);
  Tensor var = mean(square(centered), -1, true);
  Tensor normed = centered / sqrt(var + eps);
  return normed * gamma + beta;
}

}  // namespace cfsl
