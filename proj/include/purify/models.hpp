// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/labels.hpp"
#include "purify/nn.hpp"

#include <memory>
#include <string>
#include <vector>

namespace purify {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Target models
// ---------------------------------------------------------------------------

template <typename T>
struct TargetOutput {
  Var<T> outputs;   // logits (N,K), per-pixel logits (N,K,H,W) or detection head map
  Var<T> features;  // tap used by the feature-level losses
};

/// Frozen task network being protected.
template <typename T>
class TargetModel {
 public:
  virtual ~TargetModel() = default;
  virtual TaskKind task_kind() const = 0;
  virtual int num_classes() const = 0;
  virtual Shape input_shape() const = 0;  // (C, H, W)
  virtual Index feature_dim() const = 0;
  virtual std::string arch() const = 0;
  virtual TargetOutput<T> forward(const Var<T>& x) = 0;
  virtual ParamList<T> parameters() const = 0;

  void set_frozen(bool frozen) { set_trainable(parameters(), !frozen); }

  /// Architecture plus a fingerprint of the weights; two different networks never share it.
  std::string model_id() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(params_fingerprint(parameters())));
    return arch() + "@" + buf;
  }
};

template <typename T>
void check_input(const TargetModel<T>& model, const Shape& x) {
  const Shape want = model.input_shape();
  if (x.size() != 4 || x[1] != want[0] || x[2] != want[1] || x[3] != want[2])
    throw ShapeError("target model " + model.arch() + " expects (N," + std::to_string(want[0]) + "," +
                     std::to_string(want[1]) + "," + std::to_string(want[2]) + "), got " + shape_str(x));
}

/// Forward pass returning task outputs and the designated feature tap.
template <typename T>
TargetOutput<T> target_forward(TargetModel<T>& model, const Var<T>& x) {
  check_input(model, x.shape());
  return model.forward(x);
}

/// Convolutional classifier: features are the hidden fully connected layer before the logits.
template <typename T>
class ConvClassifier : public TargetModel<T> {
 public:
  ConvClassifier(std::string arch, Shape input, int num_classes, Rng& rng)
      : arch_(std::move(arch)), input_(std::move(input)), k_(num_classes) {
    const Index c = input_[0], h = input_[1], w = input_[2];
    if (arch_ == "cnn_a") {
      require_divisible(8);
      body_.template emplace<Conv2d<T>>(c, 16, 3, 1, 1, rng);
      body_.template emplace<Act<T>>(Activation::relu);
      body_.template emplace<Conv2d<T>>(16, 32, 3, 2, 1, rng);
      body_.template emplace<Act<T>>(Activation::relu);
      body_.template emplace<Conv2d<T>>(32, 32, 3, 2, 1, rng);
      body_.template emplace<Act<T>>(Activation::relu);
      body_.template emplace<Conv2d<T>>(32, 64, 3, 2, 1, rng);
      body_.template emplace<Act<T>>(Activation::relu);
      body_.template emplace<Flatten<T>>();
      body_.template emplace<Linear<T>>(64 * (h / 8) * (w / 8), feature_dim_, rng);
    } else if (arch_ == "cnn_b") {
      require_divisible(4);
      body_.template emplace<Conv2d<T>>(c, 24, 5, 1, 2, rng);
      body_.template emplace<Act<T>>(Activation::relu);
      body_.template emplace<Conv2d<T>>(24, 48, 3, 2, 1, rng);
      body_.template emplace<Act<T>>(Activation::relu);
      body_.template emplace<Conv2d<T>>(48, 48, 3, 2, 1, rng);
      body_.template emplace<Act<T>>(Activation::relu);
      body_.template emplace<Flatten<T>>();
      body_.template emplace<Linear<T>>(48 * (h / 4) * (w / 4), feature_dim_, rng);
    } else if (arch_ == "cnn_c") {
      require_divisible(4);
      body_.template emplace<Conv2d<T>>(c, 32, 3, 2, 1, rng);
      body_.template emplace<Act<T>>(Activation::leaky_relu, T(0.1));
      body_.template emplace<Conv2d<T>>(32, 32, 3, 2, 1, rng);
      body_.template emplace<Act<T>>(Activation::leaky_relu, T(0.1));
      body_.template emplace<Flatten<T>>();
      body_.template emplace<Linear<T>>(32 * (h / 4) * (w / 4), feature_dim_, rng);
    } else {
      throw ConfigError("unknown classifier architecture '" + arch_ + "' (expected cnn_a, cnn_b or cnn_c)");
    }
    body_.template emplace<Act<T>>(Activation::relu);
    head_ = std::make_unique<Linear<T>>(feature_dim_, k_, rng);
  }

  TaskKind task_kind() const override { return TaskKind::classification; }
  int num_classes() const override { return k_; }
  Shape input_shape() const override { return input_; }
  Index feature_dim() const override { return feature_dim_; }
  std::string arch() const override { return arch_; }

  TargetOutput<T> forward(const Var<T>& x) override {
    auto f = body_.forward(x);
    return {head_->forward(f), f};
  }

  ParamList<T> parameters() const override {
    ParamList<T> out;
    body_.collect(out, "body.");
    head_->collect(out, "head.");
    return out;
  }

 private:
  void require_divisible(Index d) const {
    if (input_[1] % d || input_[2] % d)
      throw ConfigError(arch_ + " needs H and W divisible by " + std::to_string(d) + ", got " + shape_str(input_));
  }

  std::string arch_;
  Shape input_;
  int k_;
  Index feature_dim_ = 64;
  Sequential<T> body_;
  std::unique_ptr<Linear<T>> head_;
};

/// Fully convolutional segmenter with output stride 8; features are the conv layer before the classifier.
template <typename T>
class ConvSegmenter : public TargetModel<T> {
 public:
  ConvSegmenter(Shape input, int num_classes, Rng& rng, Index feature_channels = 32)
      : input_(std::move(input)), k_(num_classes), l_(feature_channels) {
    if (input_[1] % 8 || input_[2] % 8) throw ConfigError("segmenter needs H and W divisible by 8, got " + shape_str(input_));
    body_.template emplace<Conv2d<T>>(input_[0], 16, 3, 2, 1, rng);
    body_.template emplace<Act<T>>(Activation::relu);
    body_.template emplace<Conv2d<T>>(16, 32, 3, 2, 1, rng);
    body_.template emplace<Act<T>>(Activation::relu);
    body_.template emplace<Conv2d<T>>(32, l_, 3, 2, 1, rng);
    body_.template emplace<Act<T>>(Activation::relu);
    head_ = std::make_unique<Conv2d<T>>(l_, k_, 1, 1, 0, rng);
  }

  TaskKind task_kind() const override { return TaskKind::segmentation; }
  int num_classes() const override { return k_; }
  Shape input_shape() const override { return input_; }
  Index feature_dim() const override { return l_; }
  std::string arch() const override { return "seg_a"; }
  Index stride() const { return 8; }

  TargetOutput<T> forward(const Var<T>& x) override {
    auto f = body_.forward(x);
    return {upsample_nearest(head_->forward(f), 8), f};
  }

  ParamList<T> parameters() const override {
    ParamList<T> out;
    body_.collect(out, "body.");
    head_->collect(out, "head.");
    return out;
  }

 private:
  Shape input_;
  int k_;
  Index l_;
  Sequential<T> body_;
  std::unique_ptr<Conv2d<T>> head_;
};

/// Single-scale dense detector: backbone at stride 4, head emits K+1 class logits
/// (last = background) and 4 normalized box coordinates per cell.
template <typename T>
class ConvDetector : public TargetModel<T> {
 public:
  ConvDetector(Shape input, int num_classes, Rng& rng, Index feature_channels = 32)
      : input_(std::move(input)), k_(num_classes), l_(feature_channels) {
    if (input_[1] % 4 || input_[2] % 4) throw ConfigError("detector needs H and W divisible by 4, got " + shape_str(input_));
    backbone_.template emplace<Conv2d<T>>(input_[0], 16, 3, 2, 1, rng);
    backbone_.template emplace<Act<T>>(Activation::relu);
    backbone_.template emplace<Conv2d<T>>(16, l_, 3, 2, 1, rng);
    backbone_.template emplace<Act<T>>(Activation::relu);
    head_ = std::make_unique<Conv2d<T>>(l_, k_ + 1 + 4, 1, 1, 0, rng);
  }

  TaskKind task_kind() const override { return TaskKind::detection; }
  int num_classes() const override { return k_; }
  Shape input_shape() const override { return input_; }
  Index feature_dim() const override { return l_; }
  std::string arch() const override { return "det_a"; }
  Index stride() const { return 4; }

  TargetOutput<T> forward(const Var<T>& x) override {
    auto f = backbone_.forward(x);
    return {head_->forward(f), f};
  }

  ParamList<T> parameters() const override {
    ParamList<T> out;
    backbone_.collect(out, "backbone.");
    head_->collect(out, "head.");
    return out;
  }

 private:
  Shape input_;
  int k_;
  Index l_;
  Sequential<T> backbone_;
  std::unique_ptr<Conv2d<T>> head_;
};

template <typename T>
std::unique_ptr<TargetModel<T>> make_target_model(const std::string& arch, TaskKind task, Shape input, int num_classes,
                                                  Rng& rng) {
  switch (task) {
    case TaskKind::classification: return std::make_unique<ConvClassifier<T>>(arch, std::move(input), num_classes, rng);
    case TaskKind::segmentation: return std::make_unique<ConvSegmenter<T>>(std::move(input), num_classes, rng);
    case TaskKind::detection: return std::make_unique<ConvDetector<T>>(std::move(input), num_classes, rng);
  }
  throw UnsupportedTask("unsupported task kind");
}

// ---------------------------------------------------------------------------
// Purifier generator
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  Index channels = 3;
  Index height = 16;
  Index width = 16;
  int num_downsample = 2;
  int num_residual_blocks = 4;
  Index base_filters = 16;

  void validate() const {
    if (num_downsample < 1 || num_residual_blocks < 0 || base_filters < 1 || channels < 1)
      throw ConfigError("generator: num_downsample >= 1, num_residual_blocks >= 0, base_filters >= 1 required");
    const Index d = Index{1} << num_downsample;
    if (height % d || width % d)
      throw ConfigError("generator: input " + std::to_string(height) + "x" + std::to_string(width) +
                        " not divisible by 2^" + std::to_string(num_downsample));
  }
};

/// Encoder / residual / decoder purifier. The last conv starts at zero, so an untrained
/// generator maps every input to the mid-grey image; a sigmoid keeps outputs in (0, 1).
template <typename T>
class Generator {
 public:
  Generator(GeneratorConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    Index ch = cfg_.base_filters;
    net_.template emplace<Conv2d<T>>(cfg_.channels, ch, 3, 1, 1, rng);
    net_.template emplace<Act<T>>(Activation::relu);
    for (int i = 0; i < cfg_.num_downsample; ++i) {
      net_.template emplace<Conv2d<T>>(ch, ch * 2, 3, 2, 1, rng);
      net_.template emplace<Act<T>>(Activation::relu);
      ch *= 2;
    }
    for (int i = 0; i < cfg_.num_residual_blocks; ++i) net_.template emplace<ResidualBlock<T>>(ch, rng);
    for (int i = 0; i < cfg_.num_downsample; ++i) {
      net_.template emplace<Upsample<T>>(2);
      net_.template emplace<Conv2d<T>>(ch, ch / 2, 3, 1, 1, rng);
      net_.template emplace<Act<T>>(Activation::relu);
      ch /= 2;
    }
    auto& out = net_.template emplace<Conv2d<T>>(ch, cfg_.channels, 3, 1, 1, rng);
    out.weight().mutable_value().array().setZero();
    out.bias().mutable_value().array().setZero();
    net_.template emplace<Act<T>>(Activation::sigmoid);
  }

  const GeneratorConfig& config() const { return cfg_; }

  Var<T> apply(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.height || s[3] != cfg_.width)
      throw ConfigError("generator expects input resolution " + std::to_string(cfg_.channels) + "x" +
                        std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width) + ", got " + shape_str(s));
    return net_.forward(x);
  }

  ParamList<T> parameters() const { return net_.parameters("G."); }

 private:
  GeneratorConfig cfg_;
  Sequential<T> net_;
};

template <typename T>
Var<T> generator_apply(Generator<T>& g, const Var<T>& x) {
  return g.apply(x);
}

// ---------------------------------------------------------------------------
// Multiscale PatchGAN discriminator
// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
  int scales = 1;
  std::vector<int> tap_layers{0, 1, 2, 3, 4};
  Index base_filters = 16;

  void validate() const {
    if (scales < 1) throw ConfigError("discriminator: scales >= 1 required");
    for (int t : tap_layers)
      if (t < 0 || t > 4) throw ConfigError("discriminator: tap layer " + std::to_string(t) + " outside [0, 4]");
  }
};

template <typename T>
struct DiscriminatorOutput {
  std::vector<Var<T>> scores;  // one per scale, unbounded (no sigmoid)
  std::vector<Var<T>> taps;    // scale-major, tap_layers order
};

template <typename T>
class Discriminator {
 public:
  static constexpr int kLayers = 5;

  Discriminator(DiscriminatorConfig cfg, Index channels, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const Index nf = cfg_.base_filters;
    for (int s = 0; s < cfg_.scales; ++s) {
      std::vector<std::unique_ptr<Conv2d<T>>> layers;
      layers.push_back(std::make_unique<Conv2d<T>>(channels, nf, 4, 2, 1, rng));
      layers.push_back(std::make_unique<Conv2d<T>>(nf, nf * 2, 4, 2, 1, rng));
      layers.push_back(std::make_unique<Conv2d<T>>(nf * 2, nf * 4, 3, 1, 1, rng));
      layers.push_back(std::make_unique<Conv2d<T>>(nf * 4, nf * 4, 3, 1, 1, rng));
      layers.push_back(std::make_unique<Conv2d<T>>(nf * 4, 1, 3, 1, 1, rng));
      nets_.push_back(std::move(layers));
    }
  }

  const DiscriminatorConfig& config() const { return cfg_; }

  DiscriminatorOutput<T> apply(const Var<T>& x) {
    DiscriminatorOutput<T> out;
    Var<T> input = x;
    for (int s = 0; s < cfg_.scales; ++s) {
      if (s > 0) input = avg_pool(input, 2);
      std::vector<Var<T>> acts;
      Var<T> h = input;
      for (int l = 0; l < kLayers; ++l) {
        h = nets_[static_cast<size_t>(s)][static_cast<size_t>(l)]->forward(h);
        if (l + 1 < kLayers) h = leaky_relu(h, T(0.2));
        acts.push_back(h);
      }
      out.scores.push_back(h);
      for (int t : cfg_.tap_layers) out.taps.push_back(acts[static_cast<size_t>(t)]);
    }
    return out;
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (size_t s = 0; s < nets_.size(); ++s)
      for (size_t l = 0; l < nets_[s].size(); ++l)
        nets_[s][l]->collect(out, "D." + std::to_string(s) + "." + std::to_string(l) + ".");
    return out;
  }

 private:
  DiscriminatorConfig cfg_;
  std::vector<std::vector<std::unique_ptr<Conv2d<T>>>> nets_;
};

template <typename T>
DiscriminatorOutput<T> discriminator_apply(Discriminator<T>& d, const Var<T>& x) {
  return d.apply(x);
}

/// Fixed convolutional feature extractor for the perceptual term. Randomly initialised from
/// its own seed and never trained.
template <typename T>
class PerceptualExtractor {
 public:
  PerceptualExtractor(Index channels, std::uint64_t seed) {
    Rng rng(seed);
    net_.template emplace<Conv2d<T>>(channels, 16, 3, 1, 1, rng);
    net_.template emplace<Act<T>>(Activation::relu);
    net_.template emplace<Conv2d<T>>(16, 32, 3, 2, 1, rng);
    net_.template emplace<Act<T>>(Activation::relu);
    set_trainable(net_.parameters(), false);
  }

  Var<T> operator()(const Var<T>& x) { return net_.forward(x); }
  ParamList<T> parameters() const { return net_.parameters("P."); }

 private:
  Sequential<T> net_;
};

}  // namespace purify
