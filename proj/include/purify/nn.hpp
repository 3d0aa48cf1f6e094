// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/ops.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace purify {

using Rng = std::mt19937_64;

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void set_trainable(const ParamList<T>& params, bool on) {
  for (const auto& p : params) {
    auto v = p.var;
    v.set_requires_grad(on);
  }
}

template <typename T>
void zero_grad(const ParamList<T>& params) {
  for (const auto& p : params) {
    auto v = p.var;
    v.zero_grad();
  }
}

template <typename T>
std::uint64_t params_fingerprint(const ParamList<T>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fingerprint(p.var.value(), h);
  }
  return h;
}

/// Scales all gradients so their joint L2 norm is at most max_norm. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(const ParamList<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (!p.var.grad().empty()) sq += p.var.grad().array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-6));
    for (const auto& p : params) {
      auto v = p.var;
      if (!v.grad().empty()) v.mutable_grad().array() *= s;
    }
  }
  return norm;
}

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual Var<T> forward(const Var<T>& x) = 0;
  virtual void collect(ParamList<T>& /*out*/, const std::string& /*prefix*/) const {}

  ParamList<T> parameters(const std::string& prefix = "") const {
    ParamList<T> out;
    collect(out, prefix);
    return out;
  }
};

namespace detail {

// PyTorch's default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
template <typename T>
Tensor<T> uniform_init(Shape shape, Index fan_in, Rng& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(bound * dist(rng));
  return t;
}

}  // namespace detail

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(Index cin, Index cout, Index k, Index stride, Index pad, Rng& rng)
      : stride_(stride), pad_(pad),
        weight_(Var<T>::leaf(detail::uniform_init<T>(Shape{cout, cin, k, k}, cin * k * k, rng), true)),
        bias_(Var<T>::leaf(detail::uniform_init<T>(Shape{cout}, cin * k * k, rng), true)) {}

  Var<T> forward(const Var<T>& x) override { return conv2d(x, weight_, bias_, stride_, pad_); }

  void collect(ParamList<T>& out, const std::string& prefix) const override {
    out.push_back({prefix + "weight", weight_});
    out.push_back({prefix + "bias", bias_});
  }

  Var<T>& weight() { return weight_; }
  Var<T>& bias() { return bias_; }

 private:
  Index stride_, pad_;
  Var<T> weight_, bias_;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(Index in, Index out, Rng& rng)
      : weight_(Var<T>::leaf(detail::uniform_init<T>(Shape{out, in}, in, rng), true)),
        bias_(Var<T>::leaf(detail::uniform_init<T>(Shape{out}, in, rng), true)) {}

  Var<T> forward(const Var<T>& x) override { return linear(x, weight_, bias_); }

  void collect(ParamList<T>& out, const std::string& prefix) const override {
    out.push_back({prefix + "weight", weight_});
    out.push_back({prefix + "bias", bias_});
  }

 private:
  Var<T> weight_, bias_;
};

enum class Activation { relu, leaky_relu, sigmoid, tanh };

template <typename T>
class Act : public Module<T> {
 public:
  explicit Act(Activation kind, T slope = T(0.2)) : kind_(kind), slope_(slope) {}
  Var<T> forward(const Var<T>& x) override {
    switch (kind_) {
      case Activation::relu: return relu(x);
      case Activation::leaky_relu: return leaky_relu(x, slope_);
      case Activation::sigmoid: return sigmoid(x);
      case Activation::tanh: return purify::tanh(x);
    }
    return x;
  }

 private:
  Activation kind_;
  T slope_;
};

template <typename T>
class AvgPool : public Module<T> {
 public:
  explicit AvgPool(Index k) : k_(k) {}
  Var<T> forward(const Var<T>& x) override { return avg_pool(x, k_); }

 private:
  Index k_;
};

template <typename T>
class GlobalAvgPool : public Module<T> {
 public:
  Var<T> forward(const Var<T>& x) override { return global_avg_pool(x); }
};

template <typename T>
class Flatten : public Module<T> {
 public:
  Var<T> forward(const Var<T>& x) override { return flatten(x); }
};

template <typename T>
class Upsample : public Module<T> {
 public:
  explicit Upsample(Index factor) : factor_(factor) {}
  Var<T> forward(const Var<T>& x) override { return upsample_nearest(x, factor_); }

 private:
  Index factor_;
};

/// x + conv(relu(conv(x))), channel count preserved.
template <typename T>
class ResidualBlock : public Module<T> {
 public:
  ResidualBlock(Index channels, Rng& rng) : a_(channels, channels, 3, 1, 1, rng), b_(channels, channels, 3, 1, 1, rng) {}

  Var<T> forward(const Var<T>& x) override { return add(x, b_.forward(relu(a_.forward(x)))); }

  void collect(ParamList<T>& out, const std::string& prefix) const override {
    a_.collect(out, prefix + "a.");
    b_.collect(out, prefix + "b.");
  }

 private:
  Conv2d<T> a_, b_;
};

template <typename T>
class Sequential : public Module<T> {
 public:
  Sequential() = default;
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Var<T> forward(const Var<T>& x) override { return forward_range(x, 0, size()); }

  /// Runs layers [begin, end).
  Var<T> forward_range(const Var<T>& x, size_t begin, size_t end) {
    Var<T> h = x;
    for (size_t i = begin; i < end; ++i) h = layers_[i]->forward(h);
    return h;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const override {
    for (size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(out, prefix + std::to_string(i) + ".");
  }

  size_t size() const { return layers_.size(); }
  Module<T>& operator[](size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Module<T>>> layers_;
};

struct AdamConfig {
  double lr = 0.0002;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are index-aligned with the parameter list.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.push_back(Tensor<T>::zeros(p.var.shape()));
      v_.push_back(Tensor<T>::zeros(p.var.shape()));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step = static_cast<T>(cfg_.lr / bc1);
    const T eps = static_cast<T>(cfg_.eps);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto var = params_[i].var;
      if (var.grad().empty()) continue;
      const auto& g = var.grad().array();
      m_[i].array() = b1 * m_[i].array() + (T(1) - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (T(1) - b2) * g.square();
      var.mutable_value().array() -= step * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
    }
  }

  const ParamList<T>& params() const { return params_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }
  AdamConfig& config() { return cfg_; }

 private:
  ParamList<T> params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long long t_ = 0;
};

}  // namespace purify
