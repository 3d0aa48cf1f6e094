// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "purify/evaluation.hpp"
#include "purify/training.hpp"

#include <gsl/gsl_cdf.h>

#include <cmath>
#include <random>

using namespace purify;

namespace {

struct Setup {
  Dataset train, test;
  std::unique_ptr<TargetModel<float>> model, other;

  explicit Setup(int K = 4) {
    SyntheticConfig sc;
    sc.num_classes = K;
    sc.n_per_class = 10;
    sc.height = sc.width = 8;
    sc.amplitude = 0.15;
    sc.seed = 2;
    train = make_synthetic_dataset(sc, Split::train);
    sc.n_per_class = 4;
    test = make_synthetic_dataset(sc, Split::test);
    Rng rng(4);
    model = make_target_model<float>("cnn_c", TaskKind::classification, Shape{3, 8, 8}, K, rng);
    other = make_target_model<float>("cnn_b", TaskKind::classification, Shape{3, 8, 8}, K, rng);
    TargetTrainConfig tc;
    tc.epochs = 15;
    tc.batch_size = 10;
    train_target_model(*model, train, tc);
    train_target_model(*other, train, tc);
  }
};

AttackSpec pgd(double eps) {
  AttackSpec s;
  s.epsilon = eps;
  s.alpha = eps / 4;
  s.steps = 4;
  return s;
}

// Independent two-tailed paired t-test through GSL's t distribution.
double gsl_paired_p(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m += (a[i] - b[i]) / n;
  double v = 0;
  for (size_t i = 0; i < a.size(); ++i) v += (a[i] - b[i] - m) * (a[i] - b[i] - m);
  v /= n - 1;
  const double t = m / std::sqrt(v / n);
  return 2 * gsl_cdf_tdist_Q(std::fabs(t), n - 1);
}

}  // namespace

TEST_CASE("miou examples") {
  std::vector<int> gt{0, 0, 1, 1, 2, 2, 255, 255};
  CHECK(miou(gt, gt, 3) == 1.0);
  // One class: prediction covers half of the ground-truth region and nothing else.
  std::vector<int> g1{1, 1, 1, 1}, p1{1, 1, 0, 0};
  // class 1: inter 2, union 4. class 0 absent from gt, excluded.
  CHECK(miou(p1, g1, 2) == 0.5);
  // Class 3 absent from both, excluded; ignore pixels do not count even when mispredicted.
  std::vector<int> p2{0, 0, 1, 1, 2, 2, 0, 1};
  CHECK(miou(p2, gt, 4) == 1.0);
  std::vector<int> p3{0, 1, 1, 1, 2, 2, 0, 0};
  // class 0: 1/2, class 1: 2/3, class 2: 1
  CHECK(miou(p3, gt, 3) == doctest::Approx((0.5 + 2.0 / 3.0 + 1.0) / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(miou({0}, {0, 1}, 2), ShapeError);
}

TEST_CASE("paired t-test conventions and symmetry") {
  CHECK(paired_t_test({1, 2, 3}, {1, 2, 3}) == 1.0);
  CHECK(paired_t_test({1, 2, 3, 4}, {2, 3, 4, 5}) == 0.0);
  CHECK_THROWS(paired_t_test({1}, {2}));
  CHECK_THROWS(paired_t_test({1, 2}, {2}));
  // d = [1, 2, 3]: t = 2 / (1 / sqrt 3), df 2; two-tailed p = 1 - t / sqrt(t^2 + 2) for df 2.
  const double t = 2 * std::sqrt(3.0);
  CHECK(paired_t_test({2, 4, 6}, {1, 2, 3}) == doctest::Approx(1 - t / std::sqrt(t * t + 2)).epsilon(1e-12));
}

TEST_CASE("paired t-test matches a reference t distribution on random samples") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(20), b(20);
    for (int i = 0; i < 20; ++i) {
      a[static_cast<size_t>(i)] = g(rng);
      b[static_cast<size_t>(i)] = g(rng) + 0.3 * trial / 20.0;
    }
    const double p = paired_t_test(a, b), ref = gsl_paired_p(a, b);
    CHECK(std::fabs(p - ref) <= 1e-9);
    CHECK(paired_t_test(b, a) == p);
  }
}

TEST_CASE("slice_labels re-indexes detection boxes") {
  LabelBatch y;
  y.task = TaskKind::detection;
  y.images = 3;
  y.boxes = {{0, 0, 0, 1, 1, 1}, {2, 0, 0, 2, 2, 0}, {1, 1, 1, 2, 2, 2}};
  auto s = slice_labels(y, 1, 2);
  REQUIRE(s.boxes.size() == 2);
  CHECK(s.boxes[0].image == 1);
  CHECK(s.boxes[1].image == 0);
  CHECK(s.images == 2);
}

TEST_CASE("evaluate: identity defense, epsilon 0, determinism, schema") {
  Setup st;
  const auto id = identity_defense();
  auto rep = evaluate(*st.model, &id, st.test, {pgd(0.0), pgd(0.1)});
  CHECK(rep.mode == "white_box");
  CHECK(rep.samples == st.test.size());
  CHECK(rep.clean_accuracy > 0.5);
  CHECK(*rep.defended_clean_accuracy == rep.clean_accuracy);
  CHECK(rep.attacks[0].undefended_accuracy == rep.clean_accuracy);
  CHECK(rep.attacks[0].max_linf == 0);
  for (const auto& a : rep.attacks) {
    CHECK(*a.defended_accuracy == a.undefended_accuracy);
    CHECK(a.defended_scores == a.undefended_scores);
    CHECK(a.ball_ok);
    CHECK(*a.p_value == 1.0);
  }
  CHECK(rep.attacks[1].max_linf <= 0.1 + 1e-6);
  CHECK(rep.attacks[1].undefended_accuracy < rep.clean_accuracy);
  CHECK(rep.invariants_ok());

  auto again = evaluate(*st.model, &id, st.test, {pgd(0.0), pgd(0.1)});
  CHECK(again.to_json().dump() == rep.to_json().dump());
  CHECK(again.to_csv() == rep.to_csv());

  const auto j = rep.to_json();
  CHECK(j.at("schema") == "report-v1");
  for (auto key : {"mode", "models", "seed", "samples", "clean_accuracy", "defended_clean_accuracy", "attacks",
                   "target_hash", "invariants_ok"})
    CHECK(j.contains(key));
  CHECK(j.at("attacks").size() == 2);
  CHECK(j.at("attacks")[1].at("spec").at("epsilon") == 0.1);
  const auto csv = rep.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  auto undefended = evaluate(*st.model, nullptr, st.test, {pgd(0.1)});
  CHECK_FALSE(undefended.defended_clean_accuracy.has_value());
  CHECK_FALSE(undefended.attacks[0].defended_accuracy.has_value());
}

TEST_CASE("evaluate: transfer from a substitute, resolution mismatch") {
  Setup st;
  auto rep = evaluate(*st.model, nullptr, st.test, {pgd(0.1)}, st.other.get());
  CHECK(rep.mode == "transfer");
  CHECK(rep.substitute_id == st.other->model_id());
  CHECK(rep.target_id == st.model->model_id());
  CHECK(rep.target_hash_before == rep.target_hash_after);
  Rng rng(1);
  auto wide = make_target_model<float>("cnn_b", TaskKind::classification, Shape{3, 16, 16}, 4, rng);
  CHECK_THROWS_AS(evaluate(*st.model, nullptr, st.test, {pgd(0.1)}, wide.get()), ConfigError);
}

TEST_CASE("model transfer flags the protocol") {
  Setup st;
  const auto id = identity_defense();
  auto same = model_transfer_eval(id, st.model->model_id(), *st.model, st.test, {pgd(0.1)});
  CHECK(same.protocol_warning);
  CHECK_FALSE(same.transfer);
  auto unseen = model_transfer_eval(id, st.model->model_id(), *st.other, st.test, {pgd(0.1)});
  CHECK(unseen.transfer);
  CHECK_FALSE(unseen.protocol_warning);
  CHECK(unseen.mode == "model_transfer");
  CHECK(*unseen.attacks[0].defended_accuracy == unseen.attacks[0].undefended_accuracy);
}

TEST_CASE("bpda: identity surrogate reduces to the plain attack; epsilon 0") {
  Setup st;
  GeneratorConfig gc;
  gc.height = gc.width = 8;
  gc.base_filters = 4;
  gc.num_residual_blocks = 1;
  Rng rng(3);
  Generator<float> g(gc, rng);
  // Perturb the zero-initialized output layer so the purifier is not constant.
  for (auto& p : g.parameters()) {
    auto v = p.var;
    for (Index i = 0; i < v.value().size(); ++i) v.mutable_value()[i] += 0.05f * std::sin(static_cast<float>(i));
  }
  const auto def = as_defense(g);
  auto b = bpda_eval(*st.model, def, nullptr, st.test, pgd(0.1));
  auto plain = evaluate(*st.model, &def, st.test, {pgd(0.1)});
  CHECK(b.mode == "bpda");
  CHECK(b.attacks[0].defended_scores == plain.attacks[0].defended_scores);
  auto zero = bpda_eval(*st.model, def, &g, st.test, pgd(0.0));
  CHECK(*zero.attacks[0].defended_accuracy == *zero.defended_clean_accuracy);
  auto through = bpda_eval(*st.model, def, &g, st.test, pgd(0.1));
  CHECK(through.attacks[0].ball_ok);
  auto exact = bpda_eval(*st.model, def, &g, st.test, pgd(0.1), {}, false);
  CHECK(exact.attacks[0].ball_ok);
}

TEST_CASE("targeted top-9 evaluation at epsilon 0 reduces to clean accuracy") {
  Setup st(10);
  AttackSpec s = pgd(0.0);
  s.targeted = true;
  s.target_rule = TargetRule::top9;
  const auto id = identity_defense();
  auto rep = evaluate(*st.model, &id, st.test, {s});
  CHECK(rep.attacks[0].name == "pgd_ce_top9");
  CHECK(rep.attacks[0].undefended_accuracy == rep.clean_accuracy);
  CHECK(*rep.attacks[0].defended_accuracy == rep.clean_accuracy);
  s.epsilon = 0.1;
  s.alpha = 0.025;
  auto hit = evaluate(*st.model, nullptr, st.test, {s});
  CHECK(hit.attacks[0].undefended_accuracy <= hit.clean_accuracy);
  CHECK(hit.attacks[0].ball_ok);
}
