// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "purify/training.hpp"

#include <fstream>
#include <limits>

using namespace purify;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  TrainConfig cfg;
  Dataset data;
  std::unique_ptr<TargetModel<float>> target;
  fs::path dir;

  explicit Fixture(const std::string& name) {
    cfg.dataset.channels = 3;
    cfg.dataset.height = cfg.dataset.width = 8;
    cfg.dataset.num_classes = 3;
    cfg.dataset.synthetic.num_classes = 3;
    cfg.dataset.synthetic.n_per_class = 6;
    cfg.dataset.synthetic.height = cfg.dataset.synthetic.width = 8;
    cfg.dataset.synthetic.seed = 5;
    cfg.generator.height = cfg.generator.width = 8;
    cfg.generator.base_filters = 4;
    cfg.generator.num_residual_blocks = 1;
    cfg.discriminator.base_filters = 4;
    cfg.batch_size = 6;
    cfg.epochs = 2;
    cfg.attack.steps = 2;
    cfg.proxy.samples = 20;
    cfg.proxy.probe.epochs = 20;
    cfg.seed = 3;
    data = make_synthetic_dataset(cfg.dataset.synthetic, Split::train);
    Rng rng(1);
    target = make_target_model<float>("cnn_a", TaskKind::classification, Shape{3, 8, 8}, 3, rng);
    target->set_frozen(true);
    dir = fs::temp_directory_path() / ("purify-train-" + name);
    fs::remove_all(dir);
  }
  ~Fixture() { fs::remove_all(dir); }

  Batch first_batch() const { return BatchStream(data, cfg.batch_size, cfg.seed).batch(0, 0); }
};

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("ablation flags map onto loss modes") {
  AblationFlags f;
  CHECK(f.reconstruction_mode() == PixelMode::ours);
  CHECK(f.gan_mode() == PixelMode::ours);
  f.pixel = PixelAblation::traditional;
  CHECK(f.reconstruction_mode() == PixelMode::traditional);
  CHECK(f.gan_mode() == PixelMode::traditional);
  f.pixel = PixelAblation::abla_I;
  CHECK(f.reconstruction_mode() == PixelMode::traditional);
  CHECK(f.gan_mode() == PixelMode::ours);
  f.pixel = PixelAblation::abla_II;
  CHECK(f.reconstruction_mode() == PixelMode::ours);
  CHECK(f.gan_mode() == PixelMode::traditional);

  CHECK_NOTHROW(AblationFlags::pixel_only(PixelAblation::ours).validate());
  CHECK_THROWS_AS((AblationFlags{PixelAblation::ours, FeatureAblation::off, true}.validate()), ConfigError);
  CHECK_THROWS_AS((AblationFlags{PixelAblation::ours, FeatureAblation::abla_II, false}.validate()), ConfigError);
  for (auto s : {"ours", "traditional", "abla_I", "abla_II"}) CHECK(std::string(to_string(parse_pixel_ablation(s))) == s);
  for (auto s : {"ours", "abla_I", "abla_II", "off"}) CHECK(std::string(to_string(parse_feature_ablation(s))) == s);
  CHECK_THROWS_AS(parse_pixel_ablation("abla_III"), ConfigError);
}

TEST_CASE("config validation") {
  Fixture fx("validate");
  CHECK_NOTHROW(fx.cfg.validate());
  auto c = fx.cfg;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = fx.cfg;
  c.generator.height = 16;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = fx.cfg;
  c.max_iterations = 7;
  CHECK(c.total_iterations(3) == 7);
  c.max_iterations.reset();
  CHECK(c.total_iterations(3) == 6);
}

TEST_CASE("learning rate 0 leaves parameters bit-identical, metrics populated") {
  Fixture fx("lr0");
  fx.cfg.optimizer.lr = 0;
  TrainState st(fx.cfg, 3);
  PerceptualExtractor<float> ext(3, fx.cfg.perceptual_seed);
  const auto before = st.params_hash();
  const auto m = train_step(st, fx.first_batch(), *fx.target, ext, fx.cfg);
  CHECK(st.params_hash() == before);
  CHECK(st.iteration == 1);
  CHECK(m.step == 1);
  for (double v : m.parts.values()) CHECK(std::isfinite(v));
  CHECK(m.parts.L_r > 0);
  CHECK(m.parts.L_GAN_d > 0);
  CHECK(m.parts.L_F_task > 0);
  CHECK(m.total == doctest::Approx(total_generator_loss(m.parts, fx.cfg.loss)).epsilon(1e-5));
}

TEST_CASE("same seed and state give identical parameters after a step") {
  Fixture fx("det");
  TrainState a(fx.cfg, 3), b(fx.cfg, 3);
  CHECK(a.params_hash() == b.params_hash());
  PerceptualExtractor<float> ext(3, fx.cfg.perceptual_seed);
  const auto batch = fx.first_batch();
  const auto h0 = a.params_hash();
  train_step(a, batch, *fx.target, ext, fx.cfg);
  train_step(b, batch, *fx.target, ext, fx.cfg);
  CHECK(a.params_hash() == b.params_hash());
  CHECK(a.params_hash() != h0);
}

TEST_CASE("class_aware off reports zero class terms; feature off zeros feature terms") {
  Fixture fx("ca");
  fx.cfg.ablation.class_aware = false;
  TrainState st(fx.cfg, 3);
  PerceptualExtractor<float> ext(3, fx.cfg.perceptual_seed);
  auto m = train_step(st, fx.first_batch(), *fx.target, ext, fx.cfg);
  CHECK(m.parts.L_F_align == 0);
  CHECK(m.parts.L_F_intra == 0);
  CHECK(m.parts.L_F_inter == 0);
  CHECK(m.parts.L_F_task > 0);

  fx.cfg.ablation = AblationFlags::pixel_only(PixelAblation::traditional);
  TrainState st2(fx.cfg, 3);
  m = train_step(st2, fx.first_batch(), *fx.target, ext, fx.cfg);
  CHECK(m.parts.L_F_task == 0);
  CHECK(m.parts.L_F_rec == 0);
  CHECK(m.parts.L_r > 0);

  fx.cfg.ablation = AblationFlags{};
  TrainState st3(fx.cfg, 3);
  m = train_step(st3, fx.first_batch(), *fx.target, ext, fx.cfg);
  CHECK(m.parts.L_F_align > 0);
  CHECK(m.classes > 0);
}

TEST_CASE("non-finite total aborts the step without touching parameters") {
  Fixture fx("nan");
  fx.cfg.loss.lambda4 = std::numeric_limits<double>::infinity();
  TrainState st(fx.cfg, 3);
  PerceptualExtractor<float> ext(3, fx.cfg.perceptual_seed);
  const auto before = st.params_hash();
  CHECK_THROWS_AS(train_step(st, fx.first_batch(), *fx.target, ext, fx.cfg), NonFiniteLoss);
  CHECK(st.params_hash() == before);
  CHECK(st.iteration == 0);
}

TEST_CASE("T_max = 0 writes only the initial checkpoint") {
  Fixture fx("tmax0");
  fx.cfg.max_iterations = 0;
  TrainState fresh(fx.cfg, 3);
  auto r = train(fx.cfg, *fx.target, fx.data, fx.dir);
  CHECK(r.steps == 0);
  CHECK(fs::exists(r.checkpoint));
  CHECK(count_lines(fx.dir / "metrics.jsonl") == 0);
  CHECK(load_generator(r.checkpoint).iteration == 0);
  CHECK(r.params_hash == fresh.params_hash());
}

TEST_CASE("full run: metrics per step, proxy record per epoch, target untouched") {
  Fixture fx("full");
  fx.cfg.checkpoint_every = 2;
  const auto target_id = fx.target->model_id();
  auto r = train(fx.cfg, *fx.target, fx.data, fx.dir);
  CHECK(r.steps == 6);  // 18 samples / batch 6 = 3 per epoch, 2 epochs
  CHECK(count_lines(fx.dir / "metrics.jsonl") == 6);
  CHECK(count_lines(fx.dir / "proxy_a.jsonl") == 2);
  REQUIRE(r.proxy.size() == 2);
  CHECK(r.proxy[0].epoch == 0);
  CHECK(r.proxy[1].epoch == 1);
  for (const auto& p : r.proxy) {
    CHECK(p.hat_a_vs_hat_c >= 0);
    CHECK(p.hat_a_vs_hat_c <= 2);
    CHECK(p.a_vs_c == r.proxy[0].a_vs_c);
  }
  CHECK(fx.target->model_id() == target_id);
  CHECK(r.target_id == target_id);
  CHECK(fs::exists(fx.dir / "ckpt-2.bin"));
  CHECK(fs::exists(fx.dir / "ckpt-4.bin"));
  std::ifstream in(fx.dir / "metrics.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    for (auto name : LossParts::names) CHECK(std::isfinite(j.at(name).get<double>()));
  }
  auto g = load_generator(r.checkpoint);
  CHECK(g.target_id == target_id);
  CHECK(g.iteration == 6);
}

TEST_CASE("interrupt and resume reproduce the uninterrupted final parameters") {
  Fixture fx("resume");
  fx.cfg.proxy.enabled = false;
  auto full = train(fx.cfg, *fx.target, fx.data, fx.dir / "full");
  for (long long k : {1LL, 4LL}) {
    TrainHooks stop;
    stop.stop_after = k;
    auto part = train(fx.cfg, *fx.target, fx.data, fx.dir / ("part" + std::to_string(k)), std::nullopt, stop);
    CHECK(part.interrupted);
    CHECK(part.steps == k);
    auto rest = train(fx.cfg, *fx.target, fx.data, fx.dir / ("part" + std::to_string(k)), part.checkpoint);
    CHECK(rest.steps == full.steps);
    CHECK(rest.params_hash == full.params_hash);
  }
}

TEST_CASE("checkpoint round trip and format tag") {
  Fixture fx("ckpt");
  TrainState a(fx.cfg, 3);
  PerceptualExtractor<float> ext(3, fx.cfg.perceptual_seed);
  train_step(a, fx.first_batch(), *fx.target, ext, fx.cfg);
  fs::create_directories(fx.dir);
  save_checkpoint(fx.dir / "a.bin", a, fx.cfg, "x");
  TrainState b(fx.cfg, 3);
  restore_checkpoint(fx.dir / "a.bin", b);
  CHECK(b.params_hash() == a.params_hash());
  CHECK(b.iteration == 1);
  CHECK(b.rng() == a.rng());
  CHECK(b.opt_g().steps() == a.opt_g().steps());
  CHECK_THROWS_AS(Archive::load(fx.dir / "a.bin", kTargetFormat), ArchiveError);
}

TEST_CASE("target model save/load and supervised training") {
  Fixture fx("target");
  TargetTrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 6;
  auto losses = train_target_model(*fx.target, fx.data, tc);
  CHECK(losses.size() == 3);
  CHECK(losses.back() < losses.front());
  fs::create_directories(fx.dir);
  save_target_model(fx.dir / "t.bin", *fx.target);
  auto back = load_target_model(fx.dir / "t.bin");
  CHECK(back->model_id() == fx.target->model_id());
  CHECK(back->arch() == "cnn_a");
}
