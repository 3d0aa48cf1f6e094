// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace purify {

class InsufficientData : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProbeConfig {
  int epochs = 500;       // full-batch gradient steps
  double lr = 0.5;        // on standardized inputs
  double l2 = 1e-3;
  std::uint64_t split_seed = 0;
};

struct ProxyAReport {
  double kappa = 0;     // probe test error, clamped to [0, 0.5]
  double raw_error = 0; // before clamping
  double distance = 0;  // 2 (1 - 2 kappa)
  std::string probe;
  std::uint64_t split_seed = 0;
  Index train_count = 0, test_count = 0;
};

/// Rows are samples. Each set is split 50/50 into probe-train and probe-test halves; a logistic
/// probe separates the sets and its test error gives kappa.
ProxyAReport proxy_a_distance(const Eigen::MatrixXd& set_a, const Eigen::MatrixXd& set_b, const ProbeConfig& cfg = {});

double proxy_a_from_error(double kappa);

/// (N, ...) tensor to an (N, prod(rest)) double matrix.
Eigen::MatrixXd flatten_rows(const Tensor<float>& t);

inline constexpr double kPsnrCap = 99.0;

/// Per-image PSNR against MAX = 1, averaged over the batch. Identical images give 99 dB.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Index n = a.rank() >= 1 ? a.dim(0) : 1, per = n ? a.size() / n : 0;
  if (n == 0 || per == 0) return kPsnrCap;
  double total = 0;
  for (Index i = 0; i < n; ++i) {
    double mse = 0;
    for (Index j = 0; j < per; ++j) {
      const double d = static_cast<double>(a[i * per + j]) - static_cast<double>(b[i * per + j]);
      mse += d * d;
    }
    mse /= static_cast<double>(per);
    total += mse == 0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
  }
  return total / static_cast<double>(n);
}

struct ExportResult {
  Index rows = 0, columns = 0;
  bool empty_warning = false;
};

/// CSV with columns f0..f{L-1},label; values written with 17 significant digits.
ExportResult export_embeddings(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                               const std::filesystem::path& destination);

struct EmbeddingTable {
  Eigen::MatrixXd features;
  std::vector<int> labels;
};

EmbeddingTable read_embeddings(const std::filesystem::path& source);

}  // namespace purify
