#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cfsl/errors.hpp"
#include "cfsl/model/layers.hpp"

namespace cfsl::train {

struct OptimizerState {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::map<std::string, std::vector<double>> velocity;  // keyed by parameter name
};

// v ← m·v + g + wd·p ; p ← p − lr·v, elementwise.
inline void sgd_update(std::span<double> param, std::span<const double> grad, std::vector<double>& v,
                       const OptimizerState& s) {
  if (grad.size() != param.size()) throw DimensionError("sgd: gradient size differs from parameter size");
  if (v.empty()) v.assign(param.size(), 0.0);
  if (v.size() != param.size()) throw DimensionError("sgd: momentum buffer size differs from parameter size");
  for (std::size_t i = 0; i < param.size(); ++i) {
    v[i] = s.momentum * v[i] + grad[i] + s.weight_decay * param[i];
    param[i] -= s.lr * v[i];
  }
}

// Parameters that received no gradient this step (unused heads) are left
// untouched, momentum included.
inline void sgd_step(const std::vector<model::NamedTensor>& params, OptimizerState& s) {
  for (const auto& p : params) {
    if (p.role != model::TensorRole::kParameter || !p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    sgd_update(t.mutable_data(), t.grad(), s.velocity[p.name], s);
  }
}

inline void zero_grads(const std::vector<model::NamedTensor>& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

enum class ScheduleKind { kCosineWithWarmup, kStep };

// Cosine schedules count optimizer steps; step schedules count epochs.
struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::kCosineWithWarmup;
  double base_lr = 0.1;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  std::size_t step_size = 40;
  double gamma = 0.5;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (kind == ScheduleKind::kCosineWithWarmup && warmup_steps > total_steps) {
      throw ConfigError("warmup longer than the whole run");
    }
    if (kind == ScheduleKind::kStep && (step_size == 0 || !(gamma > 0.0))) {
      throw ConfigError("step schedule needs step_size > 0 and gamma > 0");
    }
  }
};

// Warmup is linear and reaches base_lr on its last step, so lr > 0 from t = 0.
inline double lr_at(const ScheduleSpec& s, std::size_t t) {
  if (s.kind == ScheduleKind::kStep) {
    return s.base_lr * std::pow(s.gamma, static_cast<double>(t / s.step_size));
  }
  if (t < s.warmup_steps) {
    return s.base_lr * static_cast<double>(t + 1) / static_cast<double>(s.warmup_steps);
  }
  if (t >= s.total_steps) return 0.0;
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double progress = static_cast<double>(t - s.warmup_steps) / span;
  return 0.5 * s.base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace cfsl::train
