// SPDX-License-Identifier: Apache-2.0
#include "purify/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace purify {

double proxy_a_from_error(double kappa) { return 2.0 * (1.0 - 2.0 * std::clamp(kappa, 0.0, 0.5)); }

ProxyAReport proxy_a_distance(const Eigen::MatrixXd& set_a, const Eigen::MatrixXd& set_b, const ProbeConfig& cfg) {
  if (set_a.rows() < 10 || set_b.rows() < 10)
    throw InsufficientData("proxy_a_distance needs at least 10 samples per set, got " + std::to_string(set_a.rows()) +
                           " and " + std::to_string(set_b.rows()));
  if (set_a.cols() != set_b.cols())
    throw InsufficientData("proxy_a_distance: sets have different dimensionality (" + std::to_string(set_a.cols()) +
                           " vs " + std::to_string(set_b.cols()) + ")");
  std::mt19937_64 rng(cfg.split_seed);
  auto halves = [&](Index n) {
    std::vector<Index> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
  };
  const auto ia = halves(set_a.rows()), ib = halves(set_b.rows());
  const Index ta = set_a.rows() / 2, tb = set_b.rows() / 2;
  const Index d = set_a.cols(), ntr = ta + tb, nte = (set_a.rows() - ta) + (set_b.rows() - tb);
  Eigen::MatrixXd xtr(ntr, d), xte(nte, d);
  Eigen::VectorXd ytr(ntr), yte(nte);
  Index r = 0, s = 0;
  for (Index i = 0; i < set_a.rows(); ++i) {
    if (i < ta) xtr.row(r) = set_a.row(ia[static_cast<size_t>(i)]), ytr[r++] = 0;
    else xte.row(s) = set_a.row(ia[static_cast<size_t>(i)]), yte[s++] = 0;
  }
  for (Index i = 0; i < set_b.rows(); ++i) {
    if (i < tb) xtr.row(r) = set_b.row(ib[static_cast<size_t>(i)]), ytr[r++] = 1;
    else xte.row(s) = set_b.row(ib[static_cast<size_t>(i)]), yte[s++] = 1;
  }
  // Standardize with probe-train statistics.
  const Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(ntr)).sqrt();
  sd = sd.unaryExpr([](double v) { return v > 1e-12 ? v : 1.0; });
  xtr = (xtr.rowwise() - mu).array().rowwise() / sd.array();
  xte = (xte.rowwise() - mu).array().rowwise() / sd.array();

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const Eigen::ArrayXd z = (xtr * w).array() + b;
    const Eigen::VectorXd p = (1.0 / (1.0 + (-z).exp())).matrix();
    const Eigen::VectorXd g = p - ytr;
    w -= cfg.lr * (xtr.transpose() * g / static_cast<double>(ntr) + cfg.l2 * w);
    b -= cfg.lr * g.mean();
  }
  const Eigen::ArrayXd zt = (xte * w).array() + b;
  Index wrong = 0;
  for (Index i = 0; i < nte; ++i) wrong += ((zt[i] > 0) ? 1.0 : 0.0) != yte[i];
  ProxyAReport rep;
  rep.raw_error = static_cast<double>(wrong) / static_cast<double>(nte);
  rep.kappa = std::min(rep.raw_error, 0.5);
  rep.distance = proxy_a_from_error(rep.kappa);
  std::ostringstream desc;
  desc << "logistic probe, standardized inputs (dim " << d << "), " << cfg.epochs << " full-batch GD epochs, lr " << cfg.lr
       << ", l2 " << cfg.l2 << ", 50/50 split";
  rep.probe = desc.str();
  rep.split_seed = cfg.split_seed;
  rep.train_count = ntr;
  rep.test_count = nte;
  return rep;
}

Eigen::MatrixXd flatten_rows(const Tensor<float>& t) {
  const Index n = t.dim(0), d = n ? t.size() / n : 0;
  return Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data(), n, d)
      .cast<double>();
}

ExportResult export_embeddings(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                               const std::filesystem::path& destination) {
  if (static_cast<Index>(labels.size()) != features.rows())
    throw ShapeError("export_embeddings: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(features.rows()) + " rows");
  std::ofstream out(destination);
  if (!out) throw IoError("cannot write embeddings to " + destination.string());
  out << std::setprecision(17);
  for (Index j = 0; j < features.cols(); ++j) out << 'f' << j << ',';
  out << "label\n";
  for (Index i = 0; i < features.rows(); ++i) {
    for (Index j = 0; j < features.cols(); ++j) out << features(i, j) << ',';
    out << labels[static_cast<size_t>(i)] << '\n';
  }
  if (!out) throw IoError("failed writing " + destination.string());
  return {features.rows(), features.cols() + 1, features.rows() == 0};
}

EmbeddingTable read_embeddings(const std::filesystem::path& source) {
  std::ifstream in(source);
  if (!in) throw IoError("cannot read " + source.string());
  std::string line;
  std::getline(in, line);
  const Index cols = static_cast<Index>(std::count(line.begin(), line.end(), ','));
  std::vector<std::vector<double>> rows;
  EmbeddingTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    for (Index j = 0; j < cols; ++j) {
      std::getline(ss, cell, ',');
      row.push_back(std::strtod(cell.c_str(), nullptr));
    }
    std::getline(ss, cell);
    t.labels.push_back(std::stoi(cell));
    rows.push_back(std::move(row));
  }
  t.features.resize(static_cast<Index>(rows.size()), cols);
  for (size_t i = 0; i < rows.size(); ++i)
    for (Index j = 0; j < cols; ++j) t.features(static_cast<Index>(i), j) = rows[i][static_cast<size_t>(j)];
  return t;
}

}  // namespace purify
