#pragma once

#include <cblas.h>

#include <cassert>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "cfsl/tensor/tensor.hpp"

namespace cfsl {

namespace detail {

inline std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + to_string(a) + " with " +
                           to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` expressed in the index space of `out`; broadcast dims get 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t offset = out.size() - in.size();
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (in[i] != 1) strides[i + offset] = stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_offset, b_offset) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  std::size_t n = numel(out);
  if (n == 0) return;
  std::size_t rank = out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  std::size_t last = rank - 1;
  std::size_t inner = out[last];
  for (std::size_t o = 0; o < n;) {
    for (std::size_t j = 0; j < inner; ++j, ++o) {
      f(o, oa + j * sa[last], ob + j * sb[last]);
    }
    // Carry into the outer dimensions.
    std::size_t d = last;
    while (d-- > 0) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Elementwise binary op with numpy-style broadcasting. `grad_a(x, y, out)` and
// `grad_b(x, y, out)` return the local partial derivatives.
template <class Fwd, class GradA, class GradB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 GradA grad_a, GradB grad_b) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::vector<double> out(numel(out_shape));
  auto ad = a.data();
  auto bd = b.data();
  const bool same = a.shape() == b.shape();
  const bool b_scalar = bd.size() == 1 && out.size() == ad.size();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  } else if (b_scalar) {
    const double y = bd[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], y);
  } else {
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      out[o] = fwd(ad[ia], bd[ib]);
    });
  }
  Shape sa_shape = a.shape(), sb_shape = b.shape();
  return make_result(
      out_shape, std::move(out), {a, b}, name,
      [=](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        const bool ga = na.requires_grad, gb = nb.requires_grad;
        const auto& g = self.grad;
        const auto& x = na.data;
        const auto& y = nb.data;
        const auto& z = self.data;
        if (same) {
          if (ga) {
            auto& dst = na.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * grad_a(x[i], y[i], z[i]);
          }
          if (gb) {
            auto& dst = nb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * grad_b(x[i], y[i], z[i]);
          }
          return;
        }
        auto sa = broadcast_strides(sa_shape, self.shape);
        auto sb = broadcast_strides(sb_shape, self.shape);
        double* da = ga ? na.grad_buffer().data() : nullptr;
        double* db = gb ? nb.grad_buffer().data() : nullptr;
        for_each_broadcast(self.shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (da) da[ia] += g[o] * grad_a(x[ia], y[ib], z[o]);
          if (db) db[ib] += g[o] * grad_b(x[ia], y[ib], z[o]);
        });
      });
}

template <class Fwd, class Grad>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Grad grad) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i]);
  return make_result(a.shape(), std::move(out), {a}, name, [=](Node& self) {
    Node& in = *self.inputs[0];
    auto& dst = in.grad_buffer();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] += self.grad[i] * grad(in.data[i], self.data[i]);
    }
  });
}

// C[m×n] (+)= op(A) · op(B), row-major.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                 std::size_t k, const double* a, const double* b, double* c,
                 double beta) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0) std::fill(c, c + m * n, 0.0);
    return;
  }
  const auto lda = static_cast<int>(trans_a ? m : k);
  const auto ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, lda, b, ldb,
              beta, c, static_cast<int>(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_op(
      a, "scale", [s](double x) { return x * s; },
      [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(
      a, "add_scalar", [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return scale(a, 1.0 / s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + to_string(a.shape()) + " to " +
                         to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a}, "reshape",
                             [](detail::Node& self) {
                               auto& dst = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += self.grad[i];
                             });
}

// out.shape[i] = in.shape[axes[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  if (axes.size() != in.size()) throw DimensionError("permute: axes/rank mismatch");
  Shape out_shape(in.size());
  std::vector<std::size_t> in_strides(in.size());
  {
    std::size_t s = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
      in_strides[i] = s;
      s *= in[i];
    }
  }
  std::vector<std::size_t> src_strides(in.size());
  std::vector<bool> seen(in.size(), false);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]]) throw DimensionError("permute: invalid axes");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
    src_strides[i] = in_strides[axes[i]];
  }
  // Map every output position to its source offset once; reused by backward.
  std::vector<std::size_t> zeros(out_shape.size(), 0);
  std::vector<std::size_t> source(a.numel());
  detail::for_each_broadcast(out_shape, src_strides, zeros,
                             [&](std::size_t o, std::size_t s, std::size_t) { source[o] = s; });
  auto ad = a.data();
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = ad[source[o]];
  return detail::make_result(out_shape, std::move(out), {a}, "permute",
                             [source = std::move(source)](detail::Node& self) {
                               auto& dst = self.inputs[0]->grad_buffer();
                               for (std::size_t o = 0; o < source.size(); ++o) dst[source[o]] += self.grad[o];
                             });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix");
  return permute(a, {1, 0});
}

inline Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  std::size_t ax = detail::normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != ax && p.shape()[i] != first[i]) {
        throw DimensionError("concat: shape mismatch " + to_string(p.shape()) +
                             " vs " + to_string(first));
      }
    }
    extents.push_back(p.shape()[ax]);
    out_shape[ax] += p.shape()[ax];
  }
  auto view = detail::axis_view(out_shape, ax);
  std::vector<double> out(numel(out_shape));
  std::size_t start = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pd = parts[k].data();
    std::size_t chunk = extents[k] * view.inner;
    for (std::size_t o = 0; o < view.outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * view.extent * view.inner + start * view.inner));
    }
    start += extents[k];
  }
  return detail::make_result(out_shape, std::move(out), parts, "concat",
                             [extents, view](detail::Node& self) {
                               std::size_t begin = 0;
                               for (std::size_t k = 0; k < extents.size(); ++k) {
                                 std::size_t chunk = extents[k] * view.inner;
                                 if (self.inputs[k]->requires_grad) {
                                   auto& dst = self.inputs[k]->grad_buffer();
                                   for (std::size_t o = 0; o < view.outer; ++o) {
                                     const double* src = self.grad.data() + o * view.extent * view.inner + begin * view.inner;
                                     double* d = dst.data() + o * chunk;
                                     for (std::size_t i = 0; i < chunk; ++i) d[i] += src[i];
                                   }
                                 }
                                 begin += extents[k];
                               }
                             });
}

// Gathers entries along `axis` (indices may repeat; gradients accumulate).
inline Tensor index_select(const Tensor& a, std::ptrdiff_t axis,
                           const std::vector<std::size_t>& indices) {
  std::size_t ax = detail::normalize_axis(axis, a.rank());
  auto view = detail::axis_view(a.shape(), ax);
  for (auto i : indices) {
    if (i >= view.extent) throw DimensionError("index_select: index out of range");
  }
  Shape out_shape = a.shape();
  out_shape[ax] = indices.size();
  std::vector<double> out(numel(out_shape));
  auto ad = a.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const double* src = ad.data() + (o * view.extent + indices[k]) * view.inner;
      std::copy_n(src, view.inner, out.begin() + static_cast<std::ptrdiff_t>((o * indices.size() + k) * view.inner));
    }
  }
  return detail::make_result(out_shape, std::move(out), {a}, "index_select",
                             [indices, view](detail::Node& self) {
                               auto& dst = self.inputs[0]->grad_buffer();
                               for (std::size_t o = 0; o < view.outer; ++o) {
                                 for (std::size_t k = 0; k < indices.size(); ++k) {
                                   const double* g = self.grad.data() + (o * indices.size() + k) * view.inner;
                                   double* d = dst.data() + (o * view.extent + indices[k]) * view.inner;
                                   for (std::size_t i = 0; i < view.inner; ++i) d[i] += g[i];
                                 }
                               }
                             });
}

inline Tensor slice(const Tensor& a, std::ptrdiff_t axis, std::size_t begin, std::size_t end) {
  std::size_t ax = detail::normalize_axis(axis, a.rank());
  if (begin > end || end > a.shape()[ax]) throw DimensionError("slice: bad range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return index_select(a, static_cast<std::ptrdiff_t>(ax), idx);
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result({}, {s}, {a}, "sum", [](detail::Node& self) {
    auto& dst = self.inputs[0]->grad_buffer();
    const double g = self.grad[0];
    for (double& d : dst) d += g;
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor sum(const Tensor& a, std::ptrdiff_t axis, bool keepdim = false) {
  std::size_t ax = detail::normalize_axis(axis, a.rank());
  auto view = detail::axis_view(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<double> out(view.outer * view.inner, 0.0);
  auto ad = a.data();
  for (std::size_t o = 0; o < view.outer; ++o) {
    double* dst = out.data() + o * view.inner;
    for (std::size_t k = 0; k < view.extent; ++k) {
      const double* src = ad.data() + (o * view.extent + k) * view.inner;
      for (std::size_t i = 0; i < view.inner; ++i) dst[i] += src[i];
    }
  }
  return detail::make_result(out_shape, std::move(out), {a}, "sum_axis", [view](detail::Node& self) {
    auto& dst = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < view.outer; ++o) {
      const double* g = self.grad.data() + o * view.inner;
      for (std::size_t k = 0; k < view.extent; ++k) {
        double* d = dst.data() + (o * view.extent + k) * view.inner;
        for (std::size_t i = 0; i < view.inner; ++i) d[i] += g[i];
      }
    }
  });
}

inline Tensor mean(const Tensor& a, std::ptrdiff_t axis, bool keepdim = false) {
  std::size_t n = a.dim(axis);
  if (n == 0) throw DimensionError("mean over empty axis");
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n);
  detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), 0.0);
  return detail::make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    detail::Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      detail::gemm(false, true, m, k, n, self.grad.data(), nb.data.data(), na.grad_buffer().data(), 1.0);
    }
    if (nb.requires_grad) {
      detail::gemm(true, false, k, n, m, na.data.data(), self.grad.data(), nb.grad_buffer().data(), 1.0);
    }
  });
}

// Batched matmul over leading dims with broadcasting: [..., m, k] · [..., k, n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("bmm: rank < 2");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) {
    throw DimensionError("bmm: inner dims differ " + to_string(as) + " · " + to_string(bs));
  }
  Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  Shape batch = detail::broadcast_shape(abatch, bbatch);
  auto sa = detail::broadcast_strides(abatch, batch);
  auto sb = detail::broadcast_strides(bbatch, batch);
  std::size_t nb = numel(batch);
  std::vector<std::size_t> offa(nb), offb(nb);
  if (batch.empty()) {
    offa[0] = offb[0] = 0;
  } else {
    detail::for_each_broadcast(batch, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      offa[o] = ia;
      offb[o] = ib;
    });
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(numel(out_shape));
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < nb; ++i) {
    detail::gemm(false, false, m, n, k, ad.data() + offa[i] * m * k, bd.data() + offb[i] * k * n,
                 out.data() + i * m * n, 0.0);
  }
  return detail::make_result(out_shape, std::move(out), {a, b}, "bmm",
                             [=, offa = std::move(offa), offb = std::move(offb)](detail::Node& self) {
                               detail::Node& na = *self.inputs[0];
                               detail::Node& nbn = *self.inputs[1];
                               for (std::size_t i = 0; i < offa.size(); ++i) {
                                 const double* g = self.grad.data() + i * m * n;
                                 if (na.requires_grad) {
                                   detail::gemm(false, true, m, k, n, g, nbn.data.data() + offb[i] * k * n,
                                                na.grad_buffer().data() + offa[i] * m * k, 1.0);
                                 }
                                 if (nbn.requires_grad) {
                                   detail::gemm(true, false, k, n, m, na.data.data() + offa[i] * m * k, g,
                                                nbn.grad_buffer().data() + offb[i] * k * n, 1.0);
                                 }
                               }
                             });
}

// x[..., in] · wᵀ + b, with w of shape [out, in]; b may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.shape()[1]) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " +
                         to_string(w.shape()));
  }
  Shape lead(x.shape().begin(), x.shape().end() - 1);
  const std::size_t rows = numel(lead);
  const std::size_t in = w.shape()[1], out_dim = w.shape()[0];
  Tensor flat = x.rank() == 2 ? x : reshape(x, {rows, in});
  Tensor y = matmul(flat, transpose(w));
  if (b.defined()) y = add(y, b);
  if (x.rank() == 2) return y;
  Shape out_shape = lead;
  out_shape.push_back(out_dim);
  return reshape(y, out_shape);
}

// ---------------------------------------------------------------------------
// Softmax family

inline Tensor softmax(const Tensor& x, std::ptrdiff_t axis = -1) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  auto v = detail::axis_view(x.shape(), ax);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.extent; ++k) mx = std::max(mx, xd[base + k * v.inner]);
      assert(std::isfinite(mx) && "softmax input must be finite");
      double s = 0.0;
      for (std::size_t k = 0; k < v.extent; ++k) {
        double e = std::exp(xd[base + k * v.inner] - mx);
        out[base + k * v.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < v.extent; ++k) out[base + k * v.inner] /= s;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x}, "softmax", [v](detail::Node& self) {
    auto& dst = self.inputs[0]->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.extent * v.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < v.extent; ++k) dot += g[base + k * v.inner] * y[base + k * v.inner];
        for (std::size_t k = 0; k < v.extent; ++k) {
          const std::size_t p = base + k * v.inner;
          dst[p] += y[p] * (g[p] - dot);
        }
      }
    }
  });
}

// Added to logits that must drop out of a softmax: exp() of it underflows to
// exactly zero while every value stays finite.
inline constexpr double kMaskedLogit = -1e9;

inline Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis = -1) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  auto v = detail::axis_view(x.shape(), ax);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.extent; ++k) mx = std::max(mx, xd[base + k * v.inner]);
      assert(std::isfinite(mx) && "log_softmax input must be finite");
      double s = 0.0;
      for (std::size_t k = 0; k < v.extent; ++k) s += std::exp(xd[base + k * v.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t k = 0; k < v.extent; ++k) out[base + k * v.inner] = xd[base + k * v.inner] - lse;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x}, "log_softmax", [v](detail::Node& self) {
    auto& dst = self.inputs[0]->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.extent * v.inner + i;
        double gs = 0.0;
        for (std::size_t k = 0; k < v.extent; ++k) gs += g[base + k * v.inner];
        for (std::size_t k = 0; k < v.extent; ++k) {
          const std::size_t p = base + k * v.inner;
          dst[p] += g[p] - std::exp(y[p]) * gs;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Norms and distances

inline constexpr double kNormalizeEps = 1e-12;

// Each slice along `axis` divided by max(‖slice‖₂, eps).
inline Tensor l2_normalize(const Tensor& x, std::ptrdiff_t axis = -1, double eps = kNormalizeEps) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  auto v = detail::axis_view(x.shape(), ax);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  std::vector<double> norms(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < v.extent; ++k) ss += xd[base + k * v.inner] * xd[base + k * v.inner];
      const double nrm = std::sqrt(ss);
      norms[o * v.inner + i] = nrm;
      const double denom = std::max(nrm, eps);
      for (std::size_t k = 0; k < v.extent; ++k) out[base + k * v.inner] = xd[base + k * v.inner] / denom;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x}, "l2_normalize",
                             [v, eps, norms = std::move(norms)](detail::Node& self) {
                               auto& dst = self.inputs[0]->grad_buffer();
                               const auto& y = self.data;
                               const auto& g = self.grad;
                               for (std::size_t o = 0; o < v.outer; ++o) {
                                 for (std::size_t i = 0; i < v.inner; ++i) {
                                   const std::size_t base = o * v.extent * v.inner + i;
                                   const double nrm = norms[o * v.inner + i];
                                   if (nrm > eps) {
                                     double dot = 0.0;
                                     for (std::size_t k = 0; k < v.extent; ++k) dot += y[base + k * v.inner] * g[base + k * v.inner];
                                     for (std::size_t k = 0; k < v.extent; ++k) {
                                       const std::size_t p = base + k * v.inner;
                                       dst[p] += (g[p] - y[p] * dot) / nrm;
                                     }
                                   } else {
                                     for (std::size_t k = 0; k < v.extent; ++k) {
                                       const std::size_t p = base + k * v.inner;
                                       dst[p] += g[p] / eps;
                                     }
                                   }
                                 }
                               }
                             });
}

// D[i][j] = ‖a_i − b_j‖₂ (or its square) for row sets a [n×c], b [m×c].
// The gradient of the plain distance at a coincident pair is taken as zero.
inline Tensor pairwise_euclidean(const Tensor& a, const Tensor& b, bool squared = false) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
    throw DimensionError("pairwise_euclidean: shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t n = a.shape()[0], m = b.shape()[0], c = a.shape()[1];
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double ss = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = ad[i * c + k] - bd[j * c + k];
        ss += d * d;
      }
      out[i * m + j] = squared ? ss : std::sqrt(ss);
    }
  }
  return detail::make_result({n, m}, std::move(out), {a, b}, "pairwise_euclidean",
                             [n, m, c, squared](detail::Node& self) {
                               detail::Node& na = *self.inputs[0];
                               detail::Node& nb = *self.inputs[1];
                               double* da = na.requires_grad ? na.grad_buffer().data() : nullptr;
                               double* db = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < m; ++j) {
                                   const double dist = self.data[i * m + j];
                                   double coef;
                                   if (squared) {
                                     coef = 2.0 * self.grad[i * m + j];
                                   } else {
                                     if (dist == 0.0) continue;
                                     coef = self.grad[i * m + j] / dist;
                                   }
                                   for (std::size_t k = 0; k < c; ++k) {
                                     const double diff = na.data[i * c + k] - nb.data[j * c + k];
                                     if (da) da[i * c + k] += coef * diff;
                                     if (db) db[j * c + k] -= coef * diff;
                                   }
                                 }
                               }
                             });
}

// ‖a − b‖₂ for two vectors of equal length.
inline Tensor euclidean_distance(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw DimensionError("euclidean_distance: length mismatch");
  Tensor d = pairwise_euclidean(reshape(a, {1, a.numel()}), reshape(b, {1, b.numel()}));
  return reshape(d, {});
}

// Cosine similarity along the last axis (broadcasting over leading dims).
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  return sum(mul(l2_normalize(a, -1), l2_normalize(b, -1)), -1);
}

}  // namespace cfsl
