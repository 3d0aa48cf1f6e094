// SPDX-License-Identifier: Apache-2.0
#include "purify/training.hpp"

#include "purify/evaluation.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace purify {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Flags
// ---------------------------------------------------------------------------

PixelAblation parse_pixel_ablation(const std::string& s) {
  if (s == "ours") return PixelAblation::ours;
  if (s == "traditional") return PixelAblation::traditional;
  if (s == "abla_I") return PixelAblation::abla_I;
  if (s == "abla_II") return PixelAblation::abla_II;
  throw ConfigError("ablation.pixel must be ours, traditional, abla_I or abla_II, got '" + s + "'");
}

FeatureAblation parse_feature_ablation(const std::string& s) {
  if (s == "ours") return FeatureAblation::ours;
  if (s == "abla_I") return FeatureAblation::abla_I;
  if (s == "abla_II") return FeatureAblation::abla_II;
  if (s == "off") return FeatureAblation::off;
  throw ConfigError("ablation.feature must be ours, abla_I, abla_II or off, got '" + s + "'");
}

const char* to_string(PixelAblation a) {
  switch (a) {
    case PixelAblation::ours: return "ours";
    case PixelAblation::traditional: return "traditional";
    case PixelAblation::abla_I: return "abla_I";
    case PixelAblation::abla_II: return "abla_II";
  }
  return "?";
}

const char* to_string(FeatureAblation a) {
  switch (a) {
    case FeatureAblation::ours: return "ours";
    case FeatureAblation::abla_I: return "abla_I";
    case FeatureAblation::abla_II: return "abla_II";
    case FeatureAblation::off: return "off";
  }
  return "?";
}

PixelMode AblationFlags::reconstruction_mode() const {
  return pixel == PixelAblation::ours || pixel == PixelAblation::abla_II ? PixelMode::ours : PixelMode::traditional;
}

PixelMode AblationFlags::gan_mode() const {
  return pixel == PixelAblation::ours || pixel == PixelAblation::abla_I ? PixelMode::ours : PixelMode::traditional;
}

void AblationFlags::validate() const {
  if (feature == FeatureAblation::off && class_aware)
    throw ConfigError("ablation: feature=off removes every feature-level term; set class_aware=off as well");
  if (feature == FeatureAblation::abla_II && !class_aware)
    throw ConfigError("ablation: feature=abla_II changes the class centers and needs class_aware=on");
}

ProxyEmbedding parse_proxy_embedding(const std::string& s) {
  if (s == "pixels") return ProxyEmbedding::pixels;
  if (s == "highpass") return ProxyEmbedding::highpass;
  if (s == "target_features") return ProxyEmbedding::target_features;
  throw ConfigError("proxy embedding must be pixels, highpass or target_features, got '" + s + "'");
}

const char* to_string(ProxyEmbedding e) {
  switch (e) {
    case ProxyEmbedding::pixels: return "pixels";
    case ProxyEmbedding::highpass: return "highpass";
    case ProxyEmbedding::target_features: return "target_features";
  }
  return "?";
}

void TrainConfig::validate() const {
  dataset.validate();
  generator.validate();
  discriminator.validate();
  attack.validate();
  loss.validate();
  ablation.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (max_iterations && *max_iterations < 0) throw ConfigError("max_iterations must be >= 0");
  if (!(optimizer.lr >= 0) || !(optimizer.beta1 >= 0 && optimizer.beta1 < 1) || !(optimizer.beta2 >= 0 && optimizer.beta2 < 1))
    throw ConfigError("optimizer: lr >= 0 and betas in [0, 1) required");
  if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (proxy.enabled && proxy.samples < 20) throw ConfigError("proxy.samples must be >= 20 (10 per probe side)");
  if (generator.channels != dataset.channels || generator.height != dataset.height || generator.width != dataset.width)
    throw ConfigError("generator resolution " + std::to_string(generator.channels) + "x" + std::to_string(generator.height) +
                      "x" + std::to_string(generator.width) + " does not match the dataset");
}

long long TrainConfig::total_iterations(Index batches_per_epoch) const {
  return max_iterations ? *max_iterations : static_cast<long long>(epochs) * batches_per_epoch;
}

json StepMetrics::to_json() const {
  json j;
  j["step"] = step;
  j["epoch"] = epoch;
  const auto v = parts.values();
  for (size_t i = 0; i < v.size(); ++i) j[LossParts::names[i]] = v[i];
  j["L_g"] = total;
  j["grad_norm_g"] = grad_norm_g;
  j["grad_norm_d"] = grad_norm_d;
  j["empty_alignment"] = empty_alignment;
  j["classes"] = classes;
  return j;
}

json ProxyRecord::to_json() const {
  return {{"epoch", epoch},
          {"step", step},
          {"proxy_a_hat_a_hat_c", hat_a_vs_hat_c},
          {"proxy_a_hat_a_c", hat_a_vs_c},
          {"proxy_a_a_c", a_vs_c},
          {"psnr_hat_a_c", psnr_hat_a},
          {"defended_accuracy", defended_accuracy},
          {"defended_clean_accuracy", defended_clean_accuracy}};
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

namespace {

Rng seeded(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return Rng(seq);
}

std::unique_ptr<Generator<float>> make_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  Rng rng = seeded(seed, 11);
  return std::make_unique<Generator<float>>(cfg, rng);
}

std::unique_ptr<Discriminator<float>> make_discriminator(const DiscriminatorConfig& cfg, Index channels,
                                                          std::uint64_t seed) {
  Rng rng = seeded(seed, 12);
  return std::make_unique<Discriminator<float>>(cfg, channels, rng);
}

}  // namespace

TrainState::TrainState(const TrainConfig& cfg, Index channels)
    : rng(seeded(cfg.seed, 13)),
      g_(make_generator(cfg.generator, cfg.seed)),
      d_(make_discriminator(cfg.discriminator, channels, cfg.seed)),
      opt_g_(g_->parameters(), cfg.optimizer),
      opt_d_(d_->parameters(), cfg.optimizer) {}

std::uint64_t TrainState::params_hash() const {
  auto p = g_->parameters();
  auto d = d_->parameters();
  p.insert(p.end(), d.begin(), d.end());
  return params_fingerprint(p);
}

// ---------------------------------------------------------------------------
// One step
// ---------------------------------------------------------------------------

StepMetrics train_step(TrainState& state, const Batch& batch, TargetModel<float>& target,
                       PerceptualExtractor<float>& extractor, const TrainConfig& cfg) {
  const auto& ab = cfg.ablation;
  const Index n = batch.images.dim(0);
  const TaskKind task = target.task_kind();
  const int K = target.num_classes();

  // Fresh adversarial examples against the frozen target every step.
  const std::uint64_t attack_seed = state.rng();
  const Tensor<float> x_a = generate_adversarial(as_attack_model(target), batch.images, batch.labels, cfg.attack, attack_seed);

  auto& G = state.generator();
  auto& D = state.discriminator();
  const auto x_c = Var<float>::constant(batch.images);
  auto purified = G.apply(Var<float>::constant(concat0(batch.images, x_a)));
  auto x_hat_c = slice0(purified, 0, n), x_hat_a = slice0(purified, n, n);

  set_trainable(D.parameters(), false);
  GeneratorTerms<float> terms;
  auto pix = pixel_losses(x_hat_c, x_c, x_hat_a, extractor, ab.reconstruction_mode());
  auto gan = gan_losses(D, x_hat_c, x_hat_a, ab.gan_mode(), std::optional<Var<float>>(x_c));
  terms.r = pix.reconstruction;
  terms.p = pix.perceptual;
  terms.m = gan.matching;
  terms.gan_g = gan.generator;

  StepMetrics m;
  if (ab.feature != FeatureAblation::off) {
    auto trip = forward_triplet(target, x_hat_c, x_hat_a, x_c);
    auto fl = feature_losses(trip, batch.labels, task, K,
                             ab.feature == FeatureAblation::abla_I ? FeatureMode::abla_feature_I : FeatureMode::ours);
    terms.f_task = fl.task;
    terms.f_rec = fl.reconstruction;
    if (ab.class_aware) {
      auto ca = class_aware_from_features(trip, batch.labels, task, K, cfg.loss,
                                          ab.feature == FeatureAblation::abla_II ? ClassAwareMode::abla_feature_II
                                                                                 : ClassAwareMode::ours,
                                          cfg.grouping);
      terms.f_align = ca.align;
      terms.f_inter = ca.inter;
      terms.f_intra = ca.intra;
      m.empty_alignment = ca.empty_alignment;
      m.classes = ca.classes;
    }
  }
  auto total = total_generator_loss(terms, cfg.loss);
  check_finite("L_g", total.item());

  const auto g_params = G.parameters();
  zero_grad(g_params);
  backward(total);

  // D sees the purified images from before the generator update.
  set_trainable(D.parameters(), true);
  auto d_loss = gan_losses(D, x_hat_c.detach(), x_hat_a.detach(), ab.gan_mode(), std::optional<Var<float>>(x_c)).discriminator;
  check_finite("L_GAN_d", d_loss.item());

  m.grad_norm_g = clip_grad_norm(g_params, cfg.grad_clip);
  state.opt_g().step();

  const auto d_params = D.parameters();
  zero_grad(d_params);
  backward(d_loss);
  m.grad_norm_d = clip_grad_norm(d_params, cfg.grad_clip);
  state.opt_d().step();

  ++state.iteration;
  m.step = state.iteration;
  m.parts.L_r = terms.r.item();
  m.parts.L_p = terms.p.item();
  m.parts.L_m = terms.m.item();
  m.parts.L_GAN_g = terms.gan_g.item();
  m.parts.L_GAN_d = d_loss.item();
  m.parts.L_F_task = terms.f_task.item();
  m.parts.L_F_rec = terms.f_rec.item();
  m.parts.L_F_align = terms.f_align.item();
  m.parts.L_F_inter = terms.f_inter.item();
  m.parts.L_F_intra = terms.f_intra.item();
  m.total = total.item();
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

json generator_json(const GeneratorConfig& g) {
  return {{"channels", g.channels},          {"height", g.height},
          {"width", g.width},                {"num_downsample", g.num_downsample},
          {"num_residual_blocks", g.num_residual_blocks}, {"base_filters", g.base_filters}};
}

GeneratorConfig generator_from_json(const json& j) {
  GeneratorConfig g;
  g.channels = j.at("channels");
  g.height = j.at("height");
  g.width = j.at("width");
  g.num_downsample = j.at("num_downsample");
  g.num_residual_blocks = j.at("num_residual_blocks");
  g.base_filters = j.at("base_filters");
  return g;
}

void put_moments(Archive& a, Adam<float>& opt, const std::string& prefix) {
  const auto& params = opt.params();
  for (size_t i = 0; i < params.size(); ++i) {
    a.put(prefix + "m." + params[i].name, opt.first_moments()[i]);
    a.put(prefix + "v." + params[i].name, opt.second_moments()[i]);
  }
}

void get_moments(const Archive& a, Adam<float>& opt, const std::string& prefix) {
  const auto& params = opt.params();
  for (size_t i = 0; i < params.size(); ++i) {
    opt.first_moments()[i] = a.get(prefix + "m." + params[i].name);
    opt.second_moments()[i] = a.get(prefix + "v." + params[i].name);
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, TrainState& state, const TrainConfig& cfg, const std::string& target_id) {
  Archive a;
  a.format = kCheckpointFormat;
  put_params(a, state.generator().parameters());
  put_params(a, state.discriminator().parameters());
  put_moments(a, state.opt_g(), "opt_g.");
  put_moments(a, state.opt_d(), "opt_d.");
  std::ostringstream rng;
  rng << state.rng;
  a.meta["iteration"] = state.iteration;
  a.meta["opt_g_steps"] = state.opt_g().steps();
  a.meta["opt_d_steps"] = state.opt_d().steps();
  a.meta["rng"] = rng.str();
  a.meta["generator"] = generator_json(state.generator().config());
  const auto& dc = state.discriminator().config();
  a.meta["discriminator"] = {{"scales", dc.scales}, {"tap_layers", dc.tap_layers}, {"base_filters", dc.base_filters}};
  a.meta["target_model_id"] = target_id;
  a.meta["params_hash"] = state.params_hash();
  a.meta["seed"] = cfg.seed;
  a.meta["config"] = cfg.resolved.is_null() ? json::object() : cfg.resolved;
  a.save(path);
}

void restore_checkpoint(const fs::path& path, TrainState& state) {
  const Archive a = Archive::load(path, kCheckpointFormat);
  get_params(a, state.generator().parameters());
  get_params(a, state.discriminator().parameters());
  get_moments(a, state.opt_g(), "opt_g.");
  get_moments(a, state.opt_d(), "opt_d.");
  state.opt_g().set_steps(a.meta.at("opt_g_steps"));
  state.opt_d().set_steps(a.meta.at("opt_d_steps"));
  state.iteration = a.meta.at("iteration");
  std::istringstream rng(a.meta.at("rng").get<std::string>());
  rng >> state.rng;
  if (state.params_hash() != a.meta.at("params_hash").get<std::uint64_t>())
    throw ArchiveError(path.string() + ": restored parameters do not match the recorded hash");
}

LoadedGenerator load_generator(const fs::path& checkpoint) {
  const Archive a = Archive::load(checkpoint, kCheckpointFormat);
  LoadedGenerator out;
  Rng rng(0);
  out.generator = std::make_unique<Generator<float>>(generator_from_json(a.meta.at("generator")), rng);
  get_params(a, out.generator->parameters());
  out.target_id = a.meta.value("target_model_id", "");
  out.iteration = a.meta.value("iteration", 0LL);
  out.meta = a.meta;
  return out;
}

// ---------------------------------------------------------------------------
// Target networks
// ---------------------------------------------------------------------------

std::vector<double> train_target_model(TargetModel<float>& model, const Dataset& data, const TargetTrainConfig& cfg) {
  if (data.size() == 0) throw DatasetError("train_target_model: empty dataset");
  const auto params = model.parameters();
  set_trainable(params, true);
  Adam<float> opt(params, cfg.optimizer);
  BatchStream stream(data, cfg.batch_size, cfg.seed, true, cfg.augment_crop, cfg.augment_flip);
  std::vector<double> losses;
  for (int e = 0; e < cfg.epochs; ++e) {
    double sum = 0;
    Index count = 0;
    for (Index i = 0; i < stream.batches_per_epoch(); ++i) {
      const auto b = stream.batch(e, i);
      auto out = target_forward(model, Var<float>::constant(b.images));
      auto loss = task_loss(out.outputs, b.labels, model.task_kind(), model.num_classes());
      check_finite("task loss", loss.item());
      zero_grad(params);
      backward(loss);
      opt.step();
      sum += loss.item() * static_cast<double>(b.images.dim(0));
      count += b.images.dim(0);
    }
    losses.push_back(sum / static_cast<double>(count));
  }
  model.set_frozen(true);
  return losses;
}

void save_target_model(const fs::path& path, const TargetModel<float>& model) {
  Archive a;
  a.format = kTargetFormat;
  put_params(a, model.parameters());
  a.meta["arch"] = model.arch();
  a.meta["task"] = to_string(model.task_kind());
  a.meta["input_shape"] = model.input_shape();
  a.meta["num_classes"] = model.num_classes();
  a.meta["model_id"] = model.model_id();
  a.save(path);
}

std::unique_ptr<TargetModel<float>> load_target_model(const fs::path& path) {
  const Archive a = Archive::load(path, kTargetFormat);
  Rng rng(0);
  auto model = make_target_model<float>(a.meta.at("arch").get<std::string>(),
                                        parse_task_kind(a.meta.at("task").get<std::string>()),
                                        a.meta.at("input_shape").get<Shape>(), a.meta.at("num_classes").get<int>(), rng);
  get_params(a, model->parameters());
  model->set_frozen(true);
  if (model->model_id() != a.meta.at("model_id").get<std::string>())
    throw ArchiveError(path.string() + ": loaded weights do not reproduce the recorded model id");
  return model;
}

// ---------------------------------------------------------------------------
// Proxy-A tracking
// ---------------------------------------------------------------------------

Tensor<float> purify_images(Generator<float>& g, const Tensor<float>& images, Index chunk) {
  Tensor<float> out(images.shape());
  const Index n = images.dim(0), per = n ? images.size() / n : 0;
  for (Index s = 0; s < n; s += chunk) {
    const Index c = std::min(chunk, n - s);
    Tensor<float> part(Shape{c, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + s * per, images.data() + (s + c) * per, part.data());
    const auto y = g.apply(Var<float>::constant(part)).value();
    std::copy(y.data(), y.data() + y.size(), out.data() + s * per);
  }
  return out;
}

Eigen::MatrixXd proxy_embed(ProxyEmbedding kind, TargetModel<float>& target, const Tensor<float>& images, Index chunk) {
  switch (kind) {
    case ProxyEmbedding::pixels: return flatten_rows(images);
    case ProxyEmbedding::highpass: {
      // Residual after a 3x3 box blur (edge-replicated).
      Tensor<float> hp(images.shape());
      const Index N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c)
          for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
              double s = 0;
              for (Index dy = -1; dy <= 1; ++dy)
                for (Index dx = -1; dx <= 1; ++dx)
                  s += images.at(n, c, std::clamp<Index>(y + dy, 0, H - 1), std::clamp<Index>(x + dx, 0, W - 1));
              hp[((n * C + c) * H + y) * W + x] = images.at(n, c, y, x) - static_cast<float>(s / 9.0);
            }
      return flatten_rows(hp);
    }
    case ProxyEmbedding::target_features: {
      const Index n = images.dim(0), per = n ? images.size() / n : 0;
      Eigen::MatrixXd out;
      for (Index s = 0; s < n; s += chunk) {
        const Index c = std::min(chunk, n - s);
        Tensor<float> part(Shape{c, images.dim(1), images.dim(2), images.dim(3)});
        std::copy(images.data() + s * per, images.data() + (s + c) * per, part.data());
        const auto f = flatten_rows(target_forward(target, Var<float>::constant(part)).features.value());
        if (s == 0) out.resize(n, f.cols());
        out.middleRows(s, c) = f;
      }
      return out;
    }
  }
  throw ConfigError("unknown proxy embedding");
}

namespace {

struct ProxyTracker {
  Tensor<float> x_c, x_a;
  LabelBatch y;
  Eigen::MatrixXd emb_c;
  double a_vs_c = 0;
  const TrainConfig* cfg = nullptr;

  ProxyTracker(const TrainConfig& c, TargetModel<float>& target, const Dataset& data) : cfg(&c) {
    const Index n = std::min<Index>(c.proxy.samples, data.size());
    std::vector<Index> rows(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) rows[static_cast<size_t>(i)] = i;
    x_c = data.images_for(rows);
    y = data.labels_for(rows);
    x_a = Tensor<float>(x_c.shape());
    const Index per = x_c.size() / n;
    Rng rng = seeded(c.seed, 14);
    for (Index s = 0; s < n; s += c.batch_size) {
      const Index k = std::min(c.batch_size, n - s);
      Tensor<float> part(Shape{k, x_c.dim(1), x_c.dim(2), x_c.dim(3)});
      std::copy(x_c.data() + s * per, x_c.data() + (s + k) * per, part.data());
      const auto adv = generate_adversarial(as_attack_model(target), part, slice_labels(y, s, k), c.attack, rng());
      std::copy(adv.data(), adv.data() + adv.size(), x_a.data() + s * per);
    }
    emb_c = proxy_embed(c.proxy.embedding, target, x_c);
    a_vs_c = proxy_a_distance(proxy_embed(c.proxy.embedding, target, x_a), emb_c, probe(0)).distance;
  }

  ProbeConfig probe(long long salt) const {
    ProbeConfig p = cfg->proxy.probe;
    p.split_seed = p.split_seed * 1000003ULL + static_cast<std::uint64_t>(salt);
    return p;
  }

  ProxyRecord record(long long epoch, long long step, Generator<float>& g, TargetModel<float>& target) const {
    const auto hat_c = purify_images(g, x_c), hat_a = purify_images(g, x_a);
    const auto emb_hat_a = proxy_embed(cfg->proxy.embedding, target, hat_a);
    ProxyRecord r;
    r.epoch = epoch;
    r.step = step;
    r.hat_a_vs_hat_c = proxy_a_distance(emb_hat_a, proxy_embed(cfg->proxy.embedding, target, hat_c), probe(1)).distance;
    r.hat_a_vs_c = proxy_a_distance(emb_hat_a, emb_c, probe(2)).distance;
    r.a_vs_c = a_vs_c;
    r.psnr_hat_a = psnr(hat_a, x_c);
    if (target.task_kind() != TaskKind::detection) {
      r.defended_accuracy = mean_of(sample_scores(target, hat_a, y));
      r.defended_clean_accuracy = mean_of(sample_scores(target, hat_c, y));
    }
    return r;
  }
};

void append_line(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << j.dump() << '\n';
}

}  // namespace

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

TrainResult train(const TrainConfig& cfg, TargetModel<float>& target, const Dataset& train_set, const fs::path& out_dir,
                  const std::optional<fs::path>& resume, const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.size() == 0) throw DatasetError("training split is empty");
  if (train_set.task != target.task_kind()) throw ConfigError("dataset task does not match the target model task");
  check_input(target, Shape{1, train_set.images.dim(1), train_set.images.dim(2), train_set.images.dim(3)});
  fs::create_directories(out_dir);

  target.set_frozen(true);
  const std::uint64_t target_hash = params_fingerprint(target.parameters());
  const std::string target_id = target.model_id();

  TrainState state(cfg, train_set.images.dim(1));
  if (resume) restore_checkpoint(*resume, state);
  PerceptualExtractor<float> extractor(train_set.images.dim(1), cfg.perceptual_seed);
  BatchStream stream(train_set, cfg.batch_size, cfg.seed, true, cfg.dataset.augment_crop, cfg.dataset.augment_flip);
  const Index bpe = stream.batches_per_epoch();
  const long long t_max = cfg.total_iterations(bpe);

  TrainResult result;
  result.target_id = target_id;
  std::optional<ProxyTracker> tracker;
  if (cfg.proxy.enabled && t_max > 0) tracker.emplace(cfg, target, train_set);

  const auto metrics_path = out_dir / "metrics.jsonl";
  const auto proxy_path = out_dir / "proxy_a.jsonl";
  if (!resume) {
    std::ofstream(metrics_path, std::ios::trunc);
    std::ofstream(proxy_path, std::ios::trunc);
  }

  while (state.iteration < t_max) {
    if (hooks.stop_after >= 0 && state.iteration >= hooks.stop_after) {
      result.checkpoint = out_dir / ("interrupt-" + std::to_string(state.iteration) + ".bin");
      save_checkpoint(result.checkpoint, state, cfg, target_id);
      result.interrupted = true;
      result.steps = state.iteration;
      result.params_hash = state.params_hash();
      return result;
    }
    const long long epoch = state.iteration / bpe;
    const Batch batch = stream.batch(epoch, static_cast<Index>(state.iteration % bpe));
    StepMetrics m;
    try {
      m = train_step(state, batch, target, extractor, cfg);
    } catch (const NonFiniteLoss& e) {
      const auto ckpt = out_dir / ("last-finite-" + std::to_string(state.iteration) + ".bin");
      save_checkpoint(ckpt, state, cfg, target_id);
      append_line(out_dir / "diagnostics.jsonl",
                  {{"step", state.iteration + 1}, {"error", e.what()}, {"checkpoint", ckpt.string()}});
      throw;
    }
    m.epoch = epoch;
    append_line(metrics_path, m.to_json());
    if (hooks.on_step) hooks.on_step(m);
    if (!hooks.quiet && (m.step % 10 == 0 || m.step == t_max))
      std::cerr << "step " << m.step << "/" << t_max << " L_g " << m.total << " L_GAN_d " << m.parts.L_GAN_d << '\n';

    if (cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 && state.iteration < t_max)
      save_checkpoint(out_dir / ("ckpt-" + std::to_string(state.iteration) + ".bin"), state, cfg, target_id);
    if (tracker && (state.iteration % bpe == 0 || state.iteration == t_max)) {
      auto rec = tracker->record((state.iteration - 1) / bpe, state.iteration, state.generator(), target);
      append_line(proxy_path, rec.to_json());
      if (hooks.on_epoch) hooks.on_epoch(rec);
      if (!hooks.quiet)
        std::cerr << "epoch " << rec.epoch << " proxy-A(x^a,x^c) " << rec.hat_a_vs_hat_c << " proxy-A(x^a,xc) "
                  << rec.hat_a_vs_c << " proxy-A(xa,xc) " << rec.a_vs_c << " def-acc " << rec.defended_accuracy
                  << " clean-acc " << rec.defended_clean_accuracy << '\n';
      result.proxy.push_back(rec);
    }
  }

  if (params_fingerprint(target.parameters()) != target_hash)
    throw std::logic_error("target model parameters changed during purifier training");
  result.checkpoint = out_dir / "final.bin";
  save_checkpoint(result.checkpoint, state, cfg, target_id);
  result.steps = state.iteration;
  result.params_hash = state.params_hash();
  return result;
}

TrainResult train(const TrainConfig& cfg, const fs::path& out_dir, const std::optional<fs::path>& resume,
                  const TrainHooks& hooks) {
  cfg.validate();
  DatasetSpec spec = cfg.dataset;
  spec.split = Split::train;
  const Dataset data = load_dataset(spec);
  auto target = load_target_model(cfg.target_model);
  return train(cfg, *target, data, out_dir, resume, hooks);
}

}  // namespace purify
