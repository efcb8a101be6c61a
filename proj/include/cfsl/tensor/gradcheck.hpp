#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cfsl/rng.hpp"
#include "cfsl/tensor/tensor.hpp"

namespace cfsl {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// |a − n| / max(|a|, |n|, floor). A central difference with h = 1e-5 carries
// rounding of ~ulp(largest intermediate)/h: about 1e-10 for log-softmax over
// logits near 1/τ = 10, more for large losses. Gradients below the floor are
// therefore compared absolutely (|a − n| < tol·floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Compares backward() against central differences of `loss` on up to
// `samples` randomly chosen entries of `params` (all entries if fewer).
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                 std::size_t samples, std::uint64_t seed, double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  Tensor base = loss();
  const double floor = std::max(1e-5, 1e-6 * std::abs(base.item()));
  backward(base);

  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].numel(); ++j) slots.emplace_back(i, j);
  }
  Rng rng(seed);
  if (slots.size() > samples) {
    // Partial Fisher–Yates: the first `samples` slots become a uniform subset.
    for (std::size_t i = 0; i < samples; ++i) {
      std::swap(slots[i], slots[i + uniform_index(rng, slots.size() - i)]);
    }
    slots.resize(samples);
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (auto [pi, j] : slots) {
    Tensor& p = params[pi];
    const double analytic = p.has_grad() ? p.grad()[j] : 0.0;
    auto data = p.mutable_data();
    const double saved = data[j];
    data[j] = saved + h;
    const double plus = loss().item();
    data[j] = saved - h;
    const double minus = loss().item();
    data[j] = saved;
    const double numeric = (plus - minus) / (2.0 * h);
    const double err = relative_error(analytic, numeric, floor);
    ++result.checked;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_param = pi;
      result.worst_index = j;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace cfsl
