#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cfsl/rng.hpp"
#include "cfsl/tensor/nn_ops.hpp"

namespace cfsl::model {

// Role of a stored tensor: trained parameters get gradients and optimizer
// state; buffers (running statistics) are carried along in checkpoints only.
enum class TensorRole { kParameter, kBuffer };

inline const char* role_name(TensorRole r) { return r == TensorRole::kParameter ? "param" : "buffer"; }

struct NamedTensor {
  std::string name;
  Tensor tensor;
  TensorRole role;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(const std::string& prefix, std::vector<NamedTensor>& out) const = 0;

  std::vector<NamedTensor> named_tensors(const std::string& prefix = "") const {
    std::vector<NamedTensor> out;
    collect(prefix, out);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors()) {
      if (nt.role == TensorRole::kParameter) out.push_back(nt.tensor);
    }
    return out;
  }
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, -bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor normal_parameter(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = normal(rng, 0.0, stddev);
  return Tensor(std::move(shape), std::move(v), true);
}

// y = x·Wᵀ + b over the last axis.
class Linear : public Module {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_parameter({out, in}, bound, rng);
    if (bias) this->bias = uniform_parameter({out}, bound, rng);
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  std::size_t in_features() const { return weight.shape()[1]; }
  std::size_t out_features() const { return weight.shape()[0]; }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "weight"), weight, TensorRole::kParameter});
    if (bias.defined()) out.push_back({join_name(prefix, "bias"), bias, TensorRole::kParameter});
  }

  Tensor weight;
  Tensor bias;
};

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng, std::size_t stride = 1,
         std::size_t pad = 0, bool bias = true)
      : stride(stride), pad(pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight = uniform_parameter({out, in, kernel, kernel}, bound, rng);
    if (bias) this->bias = uniform_parameter({out}, bound, rng);
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "weight"), weight, TensorRole::kParameter});
    if (bias.defined()) out.push_back({join_name(prefix, "bias"), bias, TensorRole::kParameter});
  }

  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels, double momentum = 0.9)
      : gamma(Tensor::ones({channels}, true)),
        beta(Tensor::zeros({channels}, true)),
        running_mean(Tensor::zeros({channels})),
        running_var(Tensor::ones({channels})),
        momentum(momentum) {}

  Tensor operator()(const Tensor& x, bool training) const {
    return batch_norm(x, gamma, beta, running_mean, running_var,
                      {.training = training, .momentum = momentum, .eps = 1e-5});
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "gamma"), gamma, TensorRole::kParameter});
    out.push_back({join_name(prefix, "beta"), beta, TensorRole::kParameter});
    out.push_back({join_name(prefix, "running_mean"), running_mean, TensorRole::kBuffer});
    out.push_back({join_name(prefix, "running_var"), running_var, TensorRole::kBuffer});
  }

  Tensor gamma, beta, running_mean, running_var;
  double momentum = 0.9;
};

class LayerNorm : public Module {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t features)
      : gamma(Tensor::ones({features}, true)), beta(Tensor::zeros({features}, true)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "gamma"), gamma, TensorRole::kParameter});
    out.push_back({join_name(prefix, "beta"), beta, TensorRole::kParameter});
  }

  Tensor gamma, beta;
};

}  // namespace cfsl::model
