// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/losses.hpp"
#include "purify/models.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace purify {

enum class AttackFamily { pgd_ce, pgd_kl, bim, deepfool, cw, loss_selective };
enum class TargetRule { none, top9 };

class GradientUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedCombination : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline AttackFamily parse_attack_family(std::string_view s) {
  if (s == "pgd_ce") return AttackFamily::pgd_ce;
  if (s == "pgd_kl") return AttackFamily::pgd_kl;
  if (s == "bim") return AttackFamily::bim;
  if (s == "deepfool") return AttackFamily::deepfool;
  if (s == "cw") return AttackFamily::cw;
  if (s == "loss_selective") return AttackFamily::loss_selective;
  throw ConfigError("unknown attack family '" + std::string(s) +
                    "' (expected pgd_ce, pgd_kl, bim, deepfool, cw or loss_selective)");
}

inline const char* to_string(AttackFamily f) {
  switch (f) {
    case AttackFamily::pgd_ce: return "pgd_ce";
    case AttackFamily::pgd_kl: return "pgd_kl";
    case AttackFamily::bim: return "bim";
    case AttackFamily::deepfool: return "deepfool";
    case AttackFamily::cw: return "cw";
    case AttackFamily::loss_selective: return "loss_selective";
  }
  return "?";
}

struct AttackSpec {
  AttackFamily family = AttackFamily::pgd_ce;
  double epsilon = 0.031;
  double alpha = 0.0075;
  int steps = 8;
  bool targeted = false;
  TargetRule target_rule = TargetRule::none;
  bool translation_invariant = false;
  int ti_kernel_size = 5;
  bool random_start = true;       // pgd_ce / pgd_kl / cw: uniform noise in the ball before the first step
  double deepfool_overshoot = 0.02;
  std::string selector = "task";  // loss_selective: task | cls | loc

  void validate() const {
    if (!(epsilon >= 0 && epsilon <= 1)) throw ConfigError("attack epsilon must lie in [0, 1]");
    if (!(alpha >= 0) || alpha > epsilon + 1e-12) throw ConfigError("attack alpha must satisfy 0 <= alpha <= epsilon");
    if (steps < 1) throw ConfigError("attack steps must be >= 1");
    if (ti_kernel_size < 1 || ti_kernel_size % 2 == 0) throw ConfigError("ti_kernel_size must be a positive odd integer");
    if (targeted && family == AttackFamily::deepfool)
      throw UnsupportedCombination("targeted mode is not supported for deepfool");
    if (targeted && family == AttackFamily::pgd_kl)
      throw UnsupportedCombination("targeted mode is not supported for pgd_kl");
    if (targeted && target_rule == TargetRule::none)
      throw UnsupportedCombination("targeted mode needs a target rule (top9) or explicit targets");
  }

  static AttackSpec training_default() {
    AttackSpec s;
    s.family = AttackFamily::pgd_kl;
    s.alpha = 0.0175;
    s.steps = 4;
    return s;
  }
};

/// Differentiable map from images to task outputs, the thing an attacker computes gradients through.
template <typename T>
struct AttackModel {
  std::function<Var<T>(const Var<T>&)> forward;
  TaskKind task = TaskKind::classification;
  int num_classes = 0;
};

template <typename T>
AttackModel<T> as_attack_model(TargetModel<T>& m) {
  return {[&m](const Var<T>& x) { return target_forward(m, x).outputs; }, m.task_kind(), m.num_classes()};
}

/// Attacker view of target(purifier(x)).
template <typename T>
AttackModel<T> as_attack_model(TargetModel<T>& m, Generator<T>& purifier) {
  return {[&m, &purifier](const Var<T>& x) { return target_forward(m, purifier.apply(x)).outputs; }, m.task_kind(),
          m.num_classes()};
}

/// Scalar objective the attack ascends: outputs and labels to a loss.
template <typename T>
using LossSelector = std::function<Var<T>(const Var<T>& outputs, const LabelBatch& y)>;

/// clip(x + clip(x_adv - x, -eps, eps), 0, 1)
template <typename T>
Tensor<T> project_linf(const Tensor<T>& x_adv, const Tensor<T>& x, double epsilon) {
  if (x_adv.shape() != x.shape()) throw ShapeError("project_linf: " + shape_str(x_adv.shape()) + " vs " + shape_str(x.shape()));
  const T e = static_cast<T>(epsilon);
  Tensor<T> out(x.shape());
  out.array() = (x.array() + (x_adv.array() - x.array()).cwiseMax(-e).cwiseMin(e)).cwiseMax(T(0)).cwiseMin(T(1));
  return out;
}

/// Normalized Gaussian kernel of odd size with sigma = size / 3.
inline std::vector<double> gaussian_kernel(int size) {
  std::vector<double> k(static_cast<size_t>(size * size));
  const double sigma = size / 3.0, c = (size - 1) / 2.0;
  double total = 0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double v = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2 * sigma * sigma));
      k[static_cast<size_t>(i * size + j)] = v;
      total += v;
    }
  for (auto& v : k) v /= total;
  return k;
}

/// Per-channel smoothing with a zero-padded Gaussian kernel.
template <typename T>
Tensor<T> smooth_gradient(const Tensor<T>& g, int size) {
  if (size == 1) return g;
  const auto k = gaussian_kernel(size);
  const int r = size / 2;
  const Index planes = g.dim(0) * g.dim(1), h = g.dim(2), w = g.dim(3);
  Tensor<T> out(g.shape());
  for (Index p = 0; p < planes; ++p) {
    const T* src = g.data() + p * h * w;
    T* dst = out.data() + p * h * w;
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        double acc = 0;
        for (int di = -r; di <= r; ++di)
          for (int dj = -r; dj <= r; ++dj) {
            const Index y = i + di, x = j + dj;
            if (y < 0 || y >= h || x < 0 || x >= w) continue;
            acc += k[static_cast<size_t>((di + r) * size + dj + r)] * static_cast<double>(src[y * w + x]);
          }
        dst[i * w + j] = static_cast<T>(acc);
      }
  }
  return out;
}

namespace detail {

template <typename T>
Var<T> as_rows(const Var<T>& out) {
  return out.value().rank() == 4 ? nchw_to_rows(out) : out;
}

// max_{j != y} z_j - z_y, summed over rows.
template <typename T>
Var<T> cw_margin(const Var<T>& logits, const std::vector<int>& y) {
  const Index n = logits.dim(0), k = logits.dim(1);
  std::vector<int> other(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    int best = -1;
    for (Index j = 0; j < k; ++j)
      if (j != y[static_cast<size_t>(i)] && (best < 0 || logits.value()[i * k + j] > logits.value()[i * k + best]))
        best = static_cast<int>(j);
    other[static_cast<size_t>(i)] = best;
  }
  return sum(sub(pick(logits, std::span<const int>(other)), pick(logits, std::span<const int>(y))));
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const Index n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[static_cast<size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
Var<T> checked_forward(const AttackModel<T>& model, const Var<T>& x) {
  auto out = model.forward(x);
  if (!out.defined() || !out.requires_grad())
    throw GradientUnavailable("attack model output carries no gradient with respect to its input");
  return out;
}

template <typename T>
LossSelector<T> default_selector(const AttackSpec& spec, const AttackModel<T>& model) {
  if (spec.family == AttackFamily::loss_selective && spec.selector != "task") {
    if (model.task != TaskKind::detection)
      throw UnsupportedCombination("selector '" + spec.selector + "' needs a detection model");
    const int k = model.num_classes;
    if (spec.selector == "cls") return [k](const Var<T>& o, const LabelBatch& y) { return detection_losses(o, y, k).cls; };
    if (spec.selector == "loc") return [k](const Var<T>& o, const LabelBatch& y) { return detection_losses(o, y, k).loc; };
    throw ConfigError("unknown loss selector '" + spec.selector + "' (expected task, cls or loc)");
  }
  const TaskKind task = model.task;
  const int k = model.num_classes;
  return [task, k](const Var<T>& o, const LabelBatch& y) { return task_loss(o, y, task, k); };
}

template <typename T>
Tensor<T> deepfool(const AttackModel<T>& model, const Tensor<T>& x, const std::vector<int>& y, const AttackSpec& spec) {
  if (model.task != TaskKind::classification) throw UnsupportedCombination("deepfool supports classification models only");
  Tensor<T> cur = x;
  const Index n = x.dim(0), per = x.size() / std::max<Index>(n, 1);
  std::vector<bool> active(static_cast<size_t>(n), true);
  Tensor<T> total = Tensor<T>::zeros(x.shape());
  for (int it = 0; it < spec.steps; ++it) {
    auto xv = Var<T>::leaf(project_linf(cur, x, 1.0), true);
    auto logits = checked_forward(model, xv);
    const Index k = logits.dim(1);
    auto pred = argmax_rows(logits.value());
    bool any = false;
    for (Index i = 0; i < n; ++i) {
      if (pred[static_cast<size_t>(i)] != y[static_cast<size_t>(i)]) active[static_cast<size_t>(i)] = false;
      any = any || active[static_cast<size_t>(i)];
    }
    if (!any) break;
    // Per-class input gradients; rows are independent so summing over the batch is exact.
    std::vector<Tensor<T>> grads;
    for (Index c = 0; c < k; ++c) {
      xv.zero_grad();
      std::vector<int> col(static_cast<size_t>(n), static_cast<int>(c));
      backward(sum(pick(logits, std::span<const int>(col))));
      grads.push_back(xv.grad());
    }
    for (Index i = 0; i < n; ++i) {
      if (!active[static_cast<size_t>(i)]) continue;
      const int yi = y[static_cast<size_t>(i)];
      double best = std::numeric_limits<double>::infinity();
      Index best_c = -1;
      double best_f = 0, best_norm = 0;
      for (Index c = 0; c < k; ++c) {
        if (c == yi) continue;
        const double f = static_cast<double>(logits.value()[i * k + c] - logits.value()[i * k + yi]);
        double norm = 0;
        for (Index p = 0; p < per; ++p) norm += std::fabs(static_cast<double>(grads[c][i * per + p] - grads[yi][i * per + p]));
        const double dist = std::fabs(f) / (norm + 1e-12);
        if (dist < best) best = dist, best_c = c, best_f = f, best_norm = norm;
      }
      if (best_c < 0 || best_norm == 0) continue;
      const double step = (std::fabs(best_f) + 1e-4) / best_norm;
      for (Index p = 0; p < per; ++p) {
        const double w = static_cast<double>(grads[best_c][i * per + p] - grads[yi][i * per + p]);
        total[i * per + p] += static_cast<T>(step * (w > 0 ? 1 : (w < 0 ? -1 : 0)));
        cur[i * per + p] = static_cast<T>(static_cast<double>(x[i * per + p]) +
                                          (1 + spec.deepfool_overshoot) * static_cast<double>(total[i * per + p]));
      }
    }
  }
  return project_linf(cur, x, spec.epsilon);
}

}  // namespace detail

/// The 9 classes with the highest scores other than the true one, ordered by score. Rank r
/// of the result gives one target per sample.
template <typename T>
std::vector<std::vector<int>> top_runner_up_targets(const Tensor<T>& logits, const std::vector<int>& y, int count = 9) {
  const Index n = logits.dim(0), k = logits.dim(1);
  if (count > k - 1) throw UnsupportedCombination("need at least " + std::to_string(count + 1) + " classes for top-" + std::to_string(count) + " targets");
  std::vector<std::vector<int>> out(static_cast<size_t>(count), std::vector<int>(static_cast<size_t>(n)));
  for (Index i = 0; i < n; ++i) {
    std::vector<int> order;
    for (Index j = 0; j < k; ++j)
      if (j != y[static_cast<size_t>(i)]) order.push_back(static_cast<int>(j));
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits[i * k + a] > logits[i * k + b]; });
    for (int r = 0; r < count; ++r) out[static_cast<size_t>(r)][static_cast<size_t>(i)] = order[static_cast<size_t>(r)];
  }
  return out;
}

/// L-inf bounded adversarial batch. In targeted mode `targets` holds one class per sample;
/// without it the top runner-up class is used.
template <typename T>
Tensor<T> generate_adversarial(const AttackModel<T>& model, const Tensor<T>& x, const LabelBatch& y,
                               const AttackSpec& spec, std::uint64_t seed,
                               const std::optional<std::vector<int>>& targets = std::nullopt,
                               const LossSelector<T>& selector = {}) {
  spec.validate();
  if (x.rank() != 4) throw ShapeError("generate_adversarial expects (N,C,H,W) images");
  if (spec.targeted && model.task != TaskKind::classification)
    throw UnsupportedCombination("targeted attacks are implemented for classification only");
  if (spec.epsilon == 0) return x;
  if (spec.family == AttackFamily::deepfool) return detail::deepfool(model, x, y.classes, spec);

  Rng rng(seed);
  const auto& labels = y.classes;
  std::vector<int> goal;
  if (spec.targeted) {
    if (targets) {
      goal = *targets;
    } else {
      auto clean = model.forward(Var<T>::constant(x)).value();
      goal = top_runner_up_targets(clean, labels, 1)[0];
    }
    if (static_cast<Index>(goal.size()) != x.dim(0)) throw ShapeError("one target class per sample required");
  }

  Tensor<T> p_clean;
  if (spec.family == AttackFamily::pgd_kl) {
    auto lp = log_softmax(detail::as_rows(model.forward(Var<T>::constant(x))));
    p_clean = lp.value();
    p_clean.array() = p_clean.array().exp();
  }
  auto objective = [&](const Var<T>& out) -> Var<T> {
    switch (spec.family) {
      case AttackFamily::pgd_kl:
        // KL(p_clean || p_adv) up to a constant.
        return scale(sum(mul(Var<T>::constant(p_clean), log_softmax(detail::as_rows(out)))), T(-1));
      case AttackFamily::cw:
        if (model.task != TaskKind::classification) throw UnsupportedCombination("cw supports classification models only");
        return spec.targeted ? scale(detail::cw_margin(out, goal), T(-1)) : detail::cw_margin(out, labels);
      case AttackFamily::loss_selective:
        return selector ? selector(out, y) : detail::default_selector<T>(spec, model)(out, y);
      default:
        if (spec.targeted) return scale(cross_entropy(out, std::span<const int>(goal)), T(-1));
        return task_loss(out, y, model.task, model.num_classes);
    }
  };

  Tensor<T> cur = x;
  const bool noise = spec.random_start && spec.family != AttackFamily::bim;
  if (noise) {
    std::uniform_real_distribution<double> u(-spec.epsilon, spec.epsilon);
    for (Index i = 0; i < cur.size(); ++i) cur[i] += static_cast<T>(u(rng));
    cur = project_linf(cur, x, spec.epsilon);
  }
  const T a = static_cast<T>(spec.alpha);
  for (int it = 0; it < spec.steps; ++it) {
    auto xv = Var<T>::leaf(cur, true);
    auto out = detail::checked_forward(model, xv);
    backward(objective(out));
    if (xv.grad().empty()) throw GradientUnavailable("attack objective does not depend on the input");
    Tensor<T> g = spec.translation_invariant ? smooth_gradient(xv.grad(), spec.ti_kernel_size) : xv.grad();
    cur.array() += a * g.array().sign();
    cur = project_linf(cur, x, spec.epsilon);
  }
  return cur;
}

}  // namespace purify
