// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "purify/diagnostics.hpp"

#include <filesystem>
#include <random>

using namespace purify;

namespace {

Eigen::MatrixXd gaussian_cloud(Index n, Index d, double shift, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 1);
  Eigen::MatrixXd m(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) m(i, j) = g(rng) + (j == 0 ? shift : 0.0);
  return m;
}

}  // namespace

TEST_CASE("proxy-A formula endpoints") {
  CHECK(proxy_a_from_error(0.0) == 2.0);
  CHECK(proxy_a_from_error(0.25) == 1.0);
  CHECK(proxy_a_from_error(0.5) == 0.0);
  CHECK(proxy_a_from_error(0.7) == 0.0);
}

TEST_CASE("proxy-A: identical distributions sit near zero") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto a = gaussian_cloud(1000, 5, 0, rng), b = gaussian_cloud(1000, 5, 0, rng);
    ProbeConfig cfg;
    cfg.split_seed = seed;
    auto r = proxy_a_distance(a, b, cfg);
    CHECK(std::fabs(r.distance) <= 0.25);
    CHECK(r.distance >= 0);
    CHECK(r.kappa <= 0.5);
    CHECK(r.test_count == 1000);
  }
}

TEST_CASE("proxy-A: separable sets give 2, monotone in separation") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    ProbeConfig cfg;
    cfg.split_seed = seed;
    double prev = -1;
    for (double shift : {0.0, 2.0, 8.0}) {
      auto a = gaussian_cloud(200, 2, 0, rng), b = gaussian_cloud(200, 2, shift, rng);
      const double d = proxy_a_distance(a, b, cfg).distance;
      CHECK(d >= prev);
      prev = d;
    }
    CHECK(prev == doctest::Approx(2.0).epsilon(0.02));
  }
  std::mt19937_64 rng(7);
  auto a = gaussian_cloud(50, 3, 0, rng), b = gaussian_cloud(50, 3, 100, rng);
  CHECK(proxy_a_distance(a, b).distance == 2.0);
}

TEST_CASE("proxy-A: insufficient data and mismatched dims") {
  Eigen::MatrixXd small = Eigen::MatrixXd::Zero(9, 2), ok = Eigen::MatrixXd::Zero(20, 2), wide = Eigen::MatrixXd::Zero(20, 3);
  CHECK_THROWS_AS(proxy_a_distance(small, ok), InsufficientData);
  CHECK_THROWS_AS(proxy_a_distance(ok, wide), InsufficientData);
}

TEST_CASE("psnr closed forms, cap, symmetry") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.2, 0.7);
  Tensor<double> a(Shape{2, 3, 4, 4});
  for (Index i = 0; i < a.size(); ++i) a[i] = u(rng);
  CHECK(psnr(a, a) == 99.0);
  Tensor<double> b = a;
  b.array() += 0.1;
  CHECK(std::fabs(psnr(a, b) - 20.0) < 1e-9);
  CHECK(psnr(a, b) == psnr(b, a));
  Tensor<double> c = a;
  c.array() += 0.01;
  CHECK(std::fabs(psnr(a, c) - 40.0) < 1e-9);
  CHECK_THROWS_AS(psnr(a, Tensor<double>(Shape{1, 3, 4, 4})), ShapeError);

  // float images: the offset itself is rounded, so only approximately 20 dB.
  Tensor<float> af = a.cast<float>(), bf = af;
  bf.array() += 0.1f;
  CHECK(std::fabs(psnr(af, bf) - 20.0) < 1e-5);
}

TEST_CASE("embedding export round trip") {
  const auto path = std::filesystem::temp_directory_path() / "purify-embed-test.csv";
  Eigen::MatrixXd f(3, 2);
  f << 0.1, 1.0 / 3.0, -2.5e-17, 123456.789012345678, std::nextafter(1.0, 2.0), -0.0;
  auto r = export_embeddings(f, {0, 4, 2}, path);
  CHECK(r.rows == 3);
  CHECK(r.columns == 3);
  CHECK_FALSE(r.empty_warning);
  auto back = read_embeddings(path);
  CHECK(back.labels == std::vector<int>{0, 4, 2});
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 2; ++j) CHECK(back.features(i, j) == f(i, j));

  auto e = export_embeddings(Eigen::MatrixXd(0, 4), {}, path);
  CHECK(e.empty_warning);
  CHECK(read_embeddings(path).features.rows() == 0);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(export_embeddings(f, {0, 1, 2}, "/nonexistent-dir/x.csv"), IoError);
}
