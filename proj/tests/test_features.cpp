// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "purify/features.hpp"
#include "purify/models.hpp"
#include "grad_check.hpp"

using namespace purify;
using testing::random_tensor;

namespace {

using VD = Var<double>;
VD cst(Tensor<double> t) { return VD::constant(std::move(t)); }

}  // namespace

TEST_CASE("classification grouping buckets rows by label") {
  auto z = cst(Tensor<double>(Shape{3, 2}, 1.0));
  auto s = group_by_class(z, LabelBatch::classification({0, 1, 0}), TaskKind::classification, 2);
  CHECK(s.members.at(0) == std::vector<int>{0, 2});
  CHECK(s.members.at(1) == std::vector<int>{1});
  CHECK(s.total_count == 3);
  CHECK(s.dim() == 2);
  CHECK_THROWS_AS(group_by_class(z, LabelBatch::classification({0, 2, 0}), TaskKind::classification, 2), LabelError);
  CHECK_THROWS_AS(group_by_class(z, LabelBatch::classification({0, 1}), TaskKind::classification, 2), ShapeError);
}

TEST_CASE("label error names the offending index") {
  auto z = cst(Tensor<double>(Shape{3, 2}, 1.0));
  try {
    group_by_class(z, LabelBatch::classification({0, 1, -4}), TaskKind::classification, 2);
    FAIL("expected LabelError");
  } catch (const LabelError& e) {
    CHECK(std::string(e.what()).find("index 2") != std::string::npos);
  }
}

TEST_CASE("segmentation grouping: uniform map, ignore label, constant-label equivalence") {
  Rng rng(1);
  auto f = random_tensor<double>({1, 4, 2, 2}, rng);
  LabelBatch y;
  y.task = TaskKind::segmentation;
  y.images = 1;
  y.map_h = y.map_w = 2;
  y.maps = {3, 3, 3, 3};
  auto s = group_by_class(cst(f), y, TaskKind::segmentation, 5);
  CHECK(s.members.size() == 1);
  CHECK(s.count(3) == 4);

  // Same single label over a larger map equals classification grouping of the flattened pixel rows.
  y.map_h = y.map_w = 8;
  y.maps.assign(64, 3);
  auto seg = group_by_class(cst(f), y, TaskKind::segmentation, 5);
  auto flat = nchw_to_rows(cst(f));
  auto cls = group_by_class(flat, LabelBatch::classification({3, 3, 3, 3}), TaskKind::classification, 5);
  CHECK(seg.rows.value() == cls.rows.value());
  CHECK(seg.members == cls.members);
  auto ca = class_centers(seg), cb = class_centers(cls);
  CHECK(ca.centers.at(3).value() == cb.centers.at(3).value());

  y.map_h = y.map_w = 2;
  y.maps = {255, 1, 1, 255};
  auto ig = group_by_class(cst(f), y, TaskKind::segmentation, 5);
  CHECK(ig.total_count == 2);
  CHECK(ig.count(1) == 2);
}

TEST_CASE("segmentation grouping subsamples with a seeded cap") {
  Rng rng(2);
  auto f = random_tensor<double>({2, 3, 8, 8}, rng);
  LabelBatch y;
  y.task = TaskKind::segmentation;
  y.images = 2;
  y.map_h = y.map_w = 8;
  for (int i = 0; i < 128; ++i) y.maps.push_back(i % 3);
  GroupingOptions opt;
  opt.segmentation_pixel_cap = 20;
  opt.seed = 9;
  auto a = group_by_class(cst(f), y, TaskKind::segmentation, 3, opt);
  auto b = group_by_class(cst(f), y, TaskKind::segmentation, 3, opt);
  CHECK(a.total_count == 20);
  CHECK(a.rows.value() == b.rows.value());
  Index counted = 0;
  for (const auto& [k, idx] : a.members) counted += static_cast<Index>(idx.size());
  CHECK(counted == 20);
  opt.segmentation_pixel_cap = 0;
  CHECK(group_by_class(cst(f), y, TaskKind::segmentation, 3, opt).total_count == 128);
}

TEST_CASE("detection grouping: crop and pool on a constant map") {
  Tensor<double> f(Shape{1, 2, 4, 4});
  for (Index c = 0; c < 2; ++c)
    for (Index i = 0; i < 16; ++i) f[c * 16 + i] = static_cast<double>(c + 1);
  LabelBatch y;
  y.task = TaskKind::detection;
  y.images = 1;
  y.map_h = y.map_w = 16;
  y.boxes = {{0, 0, 0, 5, 5, 1}, {0, 6, 6, 16, 12, 4}};
  auto s = group_by_class(cst(f), y, TaskKind::detection, 5);
  CHECK(s.total_count == 2);
  CHECK(s.count(1) == 1);
  CHECK(s.count(4) == 1);
  CHECK(s.rows.value()[0] == 1.0);
  CHECK(s.rows.value()[1] == 2.0);
  CHECK(s.rows.value()[2] == 1.0);
  CHECK(s.rows.value()[3] == 2.0);
}

TEST_CASE("detection crop rounds out to whole cells") {
  Tensor<double> f(Shape{1, 1, 4, 4});
  for (Index i = 0; i < 16; ++i) f[i] = static_cast<double>(i);
  LabelBatch y;
  y.task = TaskKind::detection;
  y.images = 1;
  y.map_h = y.map_w = 16;
  // Covers pixel columns 3..5 and rows 0..3 -> cells (0,0),(0,1).
  y.boxes = {{0, 3, 0, 6, 4, 0}};
  auto s = group_by_class(cst(f), y, TaskKind::detection, 1);
  CHECK(s.rows.value()[0] == doctest::Approx(0.5));
}

TEST_CASE("centers equal brute-force means and ignore order") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 2 + static_cast<Index>(rng() % 10), l = 1 + static_cast<Index>(rng() % 4);
    const int k = 1 + static_cast<int>(rng() % 4);
    auto z = random_tensor<double>({n, l}, rng);
    std::vector<int> y(static_cast<size_t>(n));
    for (auto& v : y) v = static_cast<int>(rng() % static_cast<unsigned>(k));
    auto c = class_centers(group_by_class(cst(z), LabelBatch::classification(y), TaskKind::classification, k));
    for (int cls = 0; cls < k; ++cls) {
      std::vector<double> sum(static_cast<size_t>(l), 0.0);
      int cnt = 0;
      for (Index i = 0; i < n; ++i)
        if (y[static_cast<size_t>(i)] == cls) {
          ++cnt;
          for (Index j = 0; j < l; ++j) sum[static_cast<size_t>(j)] += z[i * l + j];
        }
      if (cnt == 0) {
        CHECK(c.centers.count(cls) == 0);
        continue;
      }
      CHECK(c.counts.at(cls) == cnt);
      for (Index j = 0; j < l; ++j) CHECK(std::fabs(c.centers.at(cls).value()[j] - sum[static_cast<size_t>(j)] / cnt) < 1e-6);
    }

    // Reversed row order gives the same centers.
    Tensor<double> zr(Shape{n, l});
    std::vector<int> yr(y.rbegin(), y.rend());
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < l; ++j) zr[i * l + j] = z[(n - 1 - i) * l + j];
    auto cr = class_centers(group_by_class(cst(zr), LabelBatch::classification(yr), TaskKind::classification, k));
    for (const auto& [cls, v] : c.centers)
      for (Index j = 0; j < l; ++j) CHECK(std::fabs(cr.centers.at(cls).value()[j] - v.value()[j]) < 1e-12);
  }
}

TEST_CASE("class_centers: single vector and empty set") {
  ClassFeatureSet<double> one{cst(Tensor<double>(Shape{1, 3}, 0.25)), {{2, {0}}}, 1};
  auto c = class_centers(one);
  CHECK(c.centers.at(2).value()[1] == 0.25);
  ClassFeatureSet<double> two{cst(Tensor<double>(Shape{2, 2})), {{0, {0, 1}}}, 2};
  two.rows.mutable_value()[2] = 2.0;
  auto c2 = class_centers(two);
  CHECK(c2.centers.at(0).value()[0] == 1.0);
  CHECK(c2.centers.at(0).value()[1] == 0.0);
  ClassFeatureSet<double> none{cst(Tensor<double>(Shape{0, 2})), {}, 0};
  CHECK_THROWS_AS(class_centers(none), EmptySetError);
}

TEST_CASE("centers are differentiable") {
  Rng rng(4);
  auto at = random_tensor<double>({5, 3}, rng);
  std::vector<int> y{0, 1, 0, 2, 1};
  CHECK(testing::max_grad_error(at, [&](const VD& z) {
          auto s = group_by_class(z, LabelBatch::classification(y), TaskKind::classification, 3).normalized();
          auto c = class_centers(s);
          return sum(square(sub(c.centers.at(0), c.centers.at(1))));
        }) < 1e-6);
}

TEST_CASE("target models: shapes, features, determinism") {
  Rng rng(5);
  ConvClassifier<double> cls("cnn_a", {3, 16, 16}, 10, rng);
  auto x = cst(random_tensor<double>({8, 3, 16, 16}, rng, 0, 1));
  auto o = target_forward<double>(cls, x);
  CHECK(o.outputs.shape() == Shape{8, 10});
  CHECK(o.features.shape() == Shape{8, 64});
  CHECK(target_forward<double>(cls, x).features.value() == o.features.value());
  CHECK_THROWS_AS(target_forward<double>(cls, cst(Tensor<double>(Shape{1, 3, 8, 8}))), ShapeError);

  ConvSegmenter<double> seg({3, 64, 64}, 4, rng);
  auto so = target_forward<double>(seg, cst(random_tensor<double>({1, 3, 64, 64}, rng, 0, 1)));
  CHECK(so.features.shape() == Shape{1, 32, 8, 8});
  CHECK(so.outputs.shape() == Shape{1, 4, 64, 64});

  ConvDetector<double> det({3, 16, 16}, 3, rng);
  auto dout = target_forward<double>(det, cst(random_tensor<double>({2, 3, 16, 16}, rng, 0, 1)));
  CHECK(dout.features.shape() == Shape{2, 32, 4, 4});
  CHECK(dout.outputs.shape() == Shape{2, 8, 4, 4});

  CHECK_THROWS_AS(parse_task_kind("pose"), UnsupportedTask);
  CHECK_THROWS_AS(ConvClassifier<double>("vgg", {3, 16, 16}, 10, rng), ConfigError);
}

TEST_CASE("generator: shape, range, zero-init midpoint, config errors") {
  Rng rng(6);
  GeneratorConfig cfg;
  cfg.height = cfg.width = 32;
  Generator<double> g(cfg, rng);
  auto x = cst(random_tensor<double>({4, 3, 32, 32}, rng, 0, 1));
  auto y = generator_apply(g, x);
  CHECK(y.shape() == x.shape());
  for (Index i = 0; i < y.value().size(); ++i) CHECK(y.value()[i] == 0.5);
  CHECK_THROWS_AS(g.apply(cst(Tensor<double>(Shape{1, 3, 16, 16}))), ConfigError);
  try {
    g.apply(cst(Tensor<double>(Shape{1, 3, 16, 16})));
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("3x32x32") != std::string::npos);
  }
  GeneratorConfig bad;
  bad.height = 18;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("generator: output stays in [0,1] for 1000 random inputs, deterministic, differentiable") {
  Rng rng(7);
  GeneratorConfig cfg;
  cfg.base_filters = 4;
  cfg.num_residual_blocks = 1;
  Generator<double> g(cfg, rng);
  // Randomize the zero-initialised output layer so the range check is not trivial.
  for (auto& p : g.parameters()) {
    auto v = p.var;
    v.mutable_value() = random_tensor<double>(v.shape(), rng, -1, 1);
  }
  for (int b = 0; b < 10; ++b) {
    auto x = cst(random_tensor<double>({100, 3, 16, 16}, rng, -3, 4));
    auto y = g.apply(x).value();
    CHECK(y.array().minCoeff() >= 0.0);
    CHECK(y.array().maxCoeff() <= 1.0);
  }
  auto x = cst(random_tensor<double>({2, 3, 16, 16}, rng, 0, 1));
  CHECK(g.apply(x).value() == g.apply(x).value());

  auto at = random_tensor<double>({1, 3, 16, 16}, rng, 0, 1);
  auto probe = cst(random_tensor<double>({1, 3, 16, 16}, rng));
  auto f = [&](const VD& v) { return sum(mul(g.apply(v), probe)); };
  auto leaf = VD::leaf(at, true);
  backward(f(leaf));
  double worst = 0;
  for (int k = 0; k < 10; ++k) {
    const Index i = static_cast<Index>(rng() % static_cast<std::uint64_t>(at.size()));
    auto p = at, m = at;
    p[i] += 1e-5;
    m[i] -= 1e-5;
    const double fd = (f(cst(p)).item() - f(cst(m)).item()) / 2e-5;
    worst = std::max(worst, std::fabs(fd - leaf.grad()[i]) / std::max(std::fabs(fd), 1e-4));
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("discriminator arity per scale and tap") {
  Rng rng(8);
  Discriminator<double> d1({}, 3, rng);
  auto x = cst(random_tensor<double>({2, 3, 16, 16}, rng, 0, 1));
  auto o1 = discriminator_apply(d1, x);
  CHECK(o1.scores.size() == 1);
  CHECK(o1.taps.size() == 5);
  DiscriminatorConfig two;
  two.scales = 2;
  Discriminator<double> d2(two, 3, rng);
  auto o2 = discriminator_apply(d2, x);
  CHECK(o2.scores.size() == 2);
  CHECK(o2.taps.size() == 10);
  auto again = discriminator_apply(d2, x);
  for (size_t i = 0; i < o2.taps.size(); ++i) CHECK(again.taps[i].value() == o2.taps[i].value());
}
