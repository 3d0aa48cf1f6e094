// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/archive.hpp"
#include "purify/attacks.hpp"
#include "purify/data.hpp"
#include "purify/diagnostics.hpp"
#include "purify/losses.hpp"
#include "purify/models.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace purify {

inline constexpr const char* kCheckpointFormat = "purifier-ckpt-v1";
inline constexpr const char* kTargetFormat = "purify-target-v1";

// ---------------------------------------------------------------------------
// Ablation switches
// ---------------------------------------------------------------------------

/// ours / traditional apply one strategy to both the reconstruction pair (L_r, L_p) and the GAN
/// pair (L_GAN, L_m). abla_I: traditional reconstruction with our GAN terms; abla_II: the reverse.
enum class PixelAblation { ours, traditional, abla_I, abla_II };

/// abla_I anchors x^_a features to z^_c in L_F_rec; abla_II takes class centers from z^_c.
/// off drops every feature-level term (the pixel-only rows).
enum class FeatureAblation { ours, abla_I, abla_II, off };

PixelAblation parse_pixel_ablation(const std::string& s);
FeatureAblation parse_feature_ablation(const std::string& s);
const char* to_string(PixelAblation a);
const char* to_string(FeatureAblation a);

struct AblationFlags {
  PixelAblation pixel = PixelAblation::ours;
  FeatureAblation feature = FeatureAblation::ours;
  bool class_aware = true;

  PixelMode reconstruction_mode() const;
  PixelMode gan_mode() const;
  void validate() const;

  /// Pixel-level constraints only, ours or traditional strategy.
  static AblationFlags pixel_only(PixelAblation p) { return {p, FeatureAblation::off, false}; }
};

// ---------------------------------------------------------------------------
// Configuration and state
// ---------------------------------------------------------------------------

enum class ProxyEmbedding { pixels, highpass, target_features };

ProxyEmbedding parse_proxy_embedding(const std::string& s);
const char* to_string(ProxyEmbedding e);

struct ProxyTrackConfig {
  bool enabled = true;
  Index samples = 500;  // taken from the head of the training split
  ProxyEmbedding embedding = ProxyEmbedding::target_features;
  ProbeConfig probe;
};

struct TrainConfig {
  DatasetSpec dataset;
  std::filesystem::path target_model;  // saved target network
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  AttackSpec attack = AttackSpec::training_default();
  LossWeights loss;
  AdamConfig optimizer;
  double grad_clip = 10.0;  // joint L2 norm, 0 disables
  Index batch_size = 50;
  int epochs = 20;
  std::optional<long long> max_iterations;  // overrides epochs when set
  std::uint64_t seed = 0;
  long long checkpoint_every = 0;  // steps between intermediate checkpoints, 0 = final only
  AblationFlags ablation;
  std::uint64_t perceptual_seed = 7;
  GroupingOptions grouping;
  ProxyTrackConfig proxy;
  nlohmann::json resolved;  // archived verbatim in every checkpoint when set

  void validate() const;
  long long total_iterations(Index batches_per_epoch) const;
};

struct StepMetrics {
  long long step = 0;  // T after the update
  long long epoch = 0;
  LossParts parts;
  double total = 0;
  double grad_norm_g = 0, grad_norm_d = 0;  // before clipping
  bool empty_alignment = false;
  int classes = 0;

  nlohmann::json to_json() const;
};

/// Everything a resumed run needs: G, D, both Adam moment sets, T and the step RNG.
class TrainState {
 public:
  TrainState(const TrainConfig& cfg, Index channels);

  Generator<float>& generator() { return *g_; }
  Discriminator<float>& discriminator() { return *d_; }
  Adam<float>& opt_g() { return opt_g_; }
  Adam<float>& opt_d() { return opt_d_; }
  long long iteration = 0;
  Rng rng;

  std::uint64_t params_hash() const;

 private:
  std::unique_ptr<Generator<float>> g_;
  std::unique_ptr<Discriminator<float>> d_;
  Adam<float> opt_g_, opt_d_;
};

/// One iteration: attack the target on the batch, purify clean and adversarial images, build
/// the pixel, GAN, feature and class-aware terms, update G, then update D on the pre-update
/// purified images. Throws NonFiniteLoss before touching any parameter.
StepMetrics train_step(TrainState& state, const Batch& batch, TargetModel<float>& target,
                       PerceptualExtractor<float>& extractor, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct ProxyRecord {
  long long epoch = 0;
  long long step = 0;
  double hat_a_vs_hat_c = 0;  // Proxy-A(x^_a, x^_c)
  double hat_a_vs_c = 0;      // Proxy-A(x^_a, x_c)
  double a_vs_c = 0;          // Proxy-A(x_a, x_c), fixed for the run
  double psnr_hat_a = 0;      // PSNR(x^_a, x_c)
  double defended_accuracy = 0;
  double defended_clean_accuracy = 0;

  nlohmann::json to_json() const;
};

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const ProxyRecord&)> on_epoch;
  long long stop_after = -1;  // simulate an interruption after this many total steps
  bool quiet = true;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  long long steps = 0;  // T at exit
  bool interrupted = false;
  std::vector<ProxyRecord> proxy;
  std::string target_id;
  std::uint64_t params_hash = 0;
};

/// Runs to T_max writing out_dir/metrics.jsonl (one record per step), out_dir/proxy_a.jsonl (one
/// per epoch), ckpt-<T>.bin on cadence and final.bin. With `resume`, state is restored from that
/// checkpoint and the loop continues from its T.
TrainResult train(const TrainConfig& cfg, TargetModel<float>& target, const Dataset& train_set,
                  const std::filesystem::path& out_dir, const std::optional<std::filesystem::path>& resume = {},
                  const TrainHooks& hooks = {});

/// Loads the dataset and the target model named by the config, then trains.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = {}, const TrainHooks& hooks = {});

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, TrainState& state, const TrainConfig& cfg,
                     const std::string& target_id);
void restore_checkpoint(const std::filesystem::path& path, TrainState& state);

struct LoadedGenerator {
  std::unique_ptr<Generator<float>> generator;
  std::string target_id;  // model the purifier was trained against
  long long iteration = 0;
  nlohmann::json meta;
};

LoadedGenerator load_generator(const std::filesystem::path& checkpoint);

// ---------------------------------------------------------------------------
// Target networks
// ---------------------------------------------------------------------------

struct TargetTrainConfig {
  int epochs = 30;
  Index batch_size = 50;
  AdamConfig optimizer{1e-3, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
  bool augment_crop = false, augment_flip = false;
};

/// Supervised training of a task network with its task loss. Returns the mean loss per epoch.
std::vector<double> train_target_model(TargetModel<float>& model, const Dataset& data, const TargetTrainConfig& cfg);

void save_target_model(const std::filesystem::path& path, const TargetModel<float>& model);
std::unique_ptr<TargetModel<float>> load_target_model(const std::filesystem::path& path);

/// Rows of an embedding used by the Proxy-A tracker.
Eigen::MatrixXd proxy_embed(ProxyEmbedding kind, TargetModel<float>& target, const Tensor<float>& images,
                            Index chunk = 100);

/// Generator applied in chunks without building a graph.
Tensor<float> purify_images(Generator<float>& g, const Tensor<float>& images, Index chunk = 100);

}  // namespace purify
