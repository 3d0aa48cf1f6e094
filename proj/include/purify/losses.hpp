// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/features.hpp"
#include "purify/models.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace purify {

enum class PixelMode { ours, traditional };
enum class FeatureMode { ours, abla_feature_I };
enum class ClassAwareMode { ours, abla_feature_II };
enum class InterMode { literal, hinge };

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double lambda1 = 0.1;    // class-center alignment
  double lambda2 = 1.0;    // inter-class separation
  double lambda3 = 0.005;  // intra-class compactness
  double lambda4 = 50.0;   // pixel + GAN + task + feature reconstruction group
  double margin = 1.0;     // M in the inter-class term
  InterMode inter_mode = InterMode::hinge;
  bool normalize_features = true;

  void validate() const {
    if (!(lambda1 > 0 && lambda2 > 0 && lambda3 > 0 && lambda4 > 0))
      throw ConfigError("loss weights lambda1..lambda4 must be positive");
    if (!(margin > 0)) throw ConfigError("margin M must be positive");
  }
};

/// Scalar values of every objective term, for logging.
struct LossParts {
  double L_r = 0, L_p = 0, L_m = 0, L_GAN_g = 0, L_GAN_d = 0;
  double L_F_task = 0, L_F_rec = 0, L_F_align = 0, L_F_inter = 0, L_F_intra = 0;

  static constexpr std::array<const char*, 10> names{"L_r",      "L_p",     "L_m",       "L_GAN_g",   "L_GAN_d",
                                                     "L_F_task", "L_F_rec", "L_F_align", "L_F_inter", "L_F_intra"};

  std::array<double, 10> values() const {
    return {L_r, L_p, L_m, L_GAN_g, L_GAN_d, L_F_task, L_F_rec, L_F_align, L_F_inter, L_F_intra};
  }
};

template <typename T>
Var<T> zero_loss() {
  return Var<T>::constant(Tensor<T>::scalar(T(0)));
}

// ---------------------------------------------------------------------------
// Pixel level
// ---------------------------------------------------------------------------

template <typename T>
struct PixelLosses {
  Var<T> reconstruction;  // L_r
  Var<T> perceptual;      // L_p
};

/// ours:        L_r = E|x^_c - x_c| + E|x^_a - x^_c|
/// traditional: L_r = E|x^_c - x_c| + E|x^_a - x_c|
/// L_p applies the same pairing to extractor features.
template <typename T>
PixelLosses<T> pixel_losses(const Var<T>& x_hat_c, const Var<T>& x_c, const Var<T>& x_hat_a,
                            PerceptualExtractor<T>& extractor, PixelMode mode) {
  if (x_hat_c.shape() != x_c.shape() || x_hat_a.shape() != x_c.shape())
    throw ShapeError("pixel_losses: shapes " + shape_str(x_hat_c.shape()) + ", " + shape_str(x_c.shape()) + ", " +
                     shape_str(x_hat_a.shape()));
  const Var<T>& anchor = mode == PixelMode::ours ? x_hat_c : x_c;
  auto r = add(mean_abs_diff(x_hat_c, x_c), mean_abs_diff(x_hat_a, anchor));
  const Index n = x_c.dim(0);
  auto f = extractor(concat0<T>({x_hat_c, x_hat_a, x_c}));
  auto f_hc = slice0(f, 0, n), f_ha = slice0(f, n, n), f_c = slice0(f, 2 * n, n);
  const Var<T>& f_anchor = mode == PixelMode::ours ? f_hc : f_c;
  auto p = add(mean_abs_diff(f_hc, f_c), mean_abs_diff(f_ha, f_anchor));
  return {r, p};
}

// ---------------------------------------------------------------------------
// Adversarial (LSGAN) terms
// ---------------------------------------------------------------------------

template <typename T>
struct GanLosses {
  Var<T> discriminator;  // L_GAN_d
  Var<T> generator;      // L_GAN_g
  Var<T> matching;       // L_m
};

namespace detail {

template <typename T>
Var<T> lsgan(const Var<T>& score, T target) {
  return mean(square(add_scalar(score, -target)));
}

// Mean over scales of a per-scale term.
template <typename T, typename F>
Var<T> over_scales(size_t scales, F term) {
  Var<T> acc = term(0);
  for (size_t s = 1; s < scales; ++s) acc = add(acc, term(s));
  return scales > 1 ? scale(acc, T(1) / static_cast<T>(scales)) : acc;
}

template <typename T>
Var<T> sum_taps(const std::vector<Var<T>>& a, const std::vector<Var<T>>& b) {
  Var<T> acc = zero_loss<T>();
  for (size_t i = 0; i < a.size(); ++i) acc = add(acc, mean_abs_diff(a[i], b[i]));
  return acc;
}

}  // namespace detail

/// ours:        d = E(D(x^_c)-1)^2 + E(D(x^_a))^2,  g = E(D(x^_a)-1)^2,  m = sum_l E|F_l(x^_c) - F_l(x^_a)|
/// traditional: d = E(D(x_c)-1)^2 + E(D(x^_c))^2 + E(D(x^_a))^2,
///              g = E(D(x^_c)-1)^2 + E(D(x^_a)-1)^2,
///              m = sum_l E|F_l(x^_a) - F_l(x_c)| + E|F_l(x^_c) - F_l(x_c)|
/// Score terms are averaged over discriminator scales; taps are summed.
template <typename T>
GanLosses<T> gan_losses(Discriminator<T>& d, const Var<T>& x_hat_c, const Var<T>& x_hat_a, PixelMode mode,
                        const std::optional<Var<T>>& x_c = std::nullopt) {
  if (mode == PixelMode::traditional && !x_c) throw ConfigError("gan_losses: traditional mode needs the clean batch x_c");
  auto oc = d.apply(x_hat_c);
  auto oa = d.apply(x_hat_a);
  const size_t scales = oc.scores.size();
  GanLosses<T> out;
  if (mode == PixelMode::ours) {
    out.discriminator = detail::over_scales<T>(scales, [&](size_t s) {
      return add(detail::lsgan(oc.scores[s], T(1)), detail::lsgan(oa.scores[s], T(0)));
    });
    out.generator = detail::over_scales<T>(scales, [&](size_t s) { return detail::lsgan(oa.scores[s], T(1)); });
    out.matching = detail::sum_taps(oc.taps, oa.taps);
  } else {
    auto ox = d.apply(*x_c);
    out.discriminator = detail::over_scales<T>(scales, [&](size_t s) {
      return add(add(detail::lsgan(ox.scores[s], T(1)), detail::lsgan(oc.scores[s], T(0))),
                 detail::lsgan(oa.scores[s], T(0)));
    });
    out.generator = detail::over_scales<T>(scales, [&](size_t s) {
      return add(detail::lsgan(oc.scores[s], T(1)), detail::lsgan(oa.scores[s], T(1)));
    });
    out.matching = add(detail::sum_taps(oa.taps, ox.taps), detail::sum_taps(oc.taps, ox.taps));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task losses
// ---------------------------------------------------------------------------

template <typename T>
struct DetectionLosses {
  Var<T> cls;
  Var<T> loc;
};

/// Dense detection targets: a cell whose centre lies inside a box takes that box's class and
/// normalized corners (later boxes win); other cells are background (class K).
template <typename T>
DetectionLosses<T> detection_losses(const Var<T>& head, const LabelBatch& labels, int num_classes) {
  const auto& s = head.shape();
  if (s.size() != 4 || s[1] != num_classes + 5) throw ShapeError("detection head must be (N, K+5, h, w)");
  const Index n = s[0], h = s[2], w = s[3];
  const double H = static_cast<double>(labels.map_h), W = static_cast<double>(labels.map_w);
  if (H <= 0 || W <= 0) throw ShapeError("detection labels need the input resolution (map_h, map_w)");
  std::vector<int> cls(static_cast<size_t>(n * h * w), num_classes);
  std::vector<int> pos;
  Tensor<T> target(Shape{n * h * w, 4});
  for (const Box& b : labels.boxes) {
    if (b.label < 0 || b.label >= num_classes) throw LabelError("box label " + std::to_string(b.label) + " out of range");
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const double cy = (static_cast<double>(i) + 0.5) * H / static_cast<double>(h);
        const double cx = (static_cast<double>(j) + 0.5) * W / static_cast<double>(w);
        if (cy < b.y0 || cy >= b.y1 || cx < b.x0 || cx >= b.x1) continue;
        const Index cell = (b.image * h + i) * w + j;
        cls[static_cast<size_t>(cell)] = b.label;
        target[cell * 4 + 0] = static_cast<T>(b.x0 / W);
        target[cell * 4 + 1] = static_cast<T>(b.y0 / H);
        target[cell * 4 + 2] = static_cast<T>(b.x1 / W);
        target[cell * 4 + 3] = static_cast<T>(b.y1 / H);
      }
  }
  for (size_t c = 0; c < cls.size(); ++c)
    if (cls[c] != num_classes) pos.push_back(static_cast<int>(c));
  auto rows = nchw_to_rows(head);
  DetectionLosses<T> out;
  out.cls = cross_entropy(slice_cols(rows, 0, num_classes + 1), std::span<const int>(cls));
  if (pos.empty()) {
    out.loc = zero_loss<T>();
  } else {
    auto pred = gather_rows(slice_cols(rows, num_classes + 1, 4), std::span<const int>(pos));
    std::vector<int> all(pos.size());
    for (size_t i = 0; i < pos.size(); ++i) all[i] = static_cast<int>(i);
    Tensor<T> tgt(Shape{static_cast<Index>(pos.size()), 4});
    for (size_t i = 0; i < pos.size(); ++i)
      for (Index c = 0; c < 4; ++c) tgt[static_cast<Index>(i) * 4 + c] = target[pos[i] * 4 + c];
    out.loc = mean_abs_diff(pred, Var<T>::constant(std::move(tgt)));
  }
  return out;
}

/// The loss the target model was trained with: cross-entropy for classification and
/// segmentation, cls + loc for detection.
template <typename T>
Var<T> task_loss(const Var<T>& outputs, const LabelBatch& labels, TaskKind task, int num_classes) {
  if (labels.task != task) throw LabelError(std::string("labels are for ") + to_string(labels.task) + ", model is " + to_string(task));
  switch (task) {
    case TaskKind::classification: return cross_entropy(outputs, std::span<const int>(labels.classes));
    case TaskKind::segmentation: {
      if (outputs.value().rank() != 4 || outputs.dim(2) != labels.map_h || outputs.dim(3) != labels.map_w)
        throw ShapeError("segmentation logits do not match label map size");
      return cross_entropy(nchw_to_rows(outputs), std::span<const int>(labels.maps), labels.ignore_label);
    }
    case TaskKind::detection: {
      auto d = detection_losses(outputs, labels, num_classes);
      return add(d.cls, d.loc);
    }
  }
  throw UnsupportedTask("unsupported task kind");
}

// ---------------------------------------------------------------------------
// Feature level
// ---------------------------------------------------------------------------

/// Target-model outputs for x^_c, x^_a (attached) and x_c (constant), from one batched pass.
template <typename T>
struct TripletForward {
  Var<T> out_hat_c, out_hat_a;
  Var<T> z_hat_c, z_hat_a, z_c;
};

template <typename T>
TripletForward<T> forward_triplet(TargetModel<T>& model, const Var<T>& x_hat_c, const Var<T>& x_hat_a, const Var<T>& x_c) {
  const Index n = x_c.dim(0);
  auto o = target_forward(model, concat0<T>({x_hat_c, x_hat_a, x_c.detach()}));
  TripletForward<T> t;
  t.out_hat_c = slice0(o.outputs, 0, n);
  t.out_hat_a = slice0(o.outputs, n, n);
  t.z_hat_c = slice0(o.features, 0, n);
  t.z_hat_a = slice0(o.features, n, n);
  t.z_c = slice0(o.features, 2 * n, n).detach();
  return t;
}

template <typename T>
struct FeatureLosses {
  Var<T> task;            // L_F_task
  Var<T> reconstruction;  // L_F_rec
};

/// task = L_o(x^_c, y) + L_o(x^_a, y)
/// ours:           rec = E|z^_c - z_c| + E|z^_a - z_c|
/// abla_feature_I: rec = E|z^_c - z_c| + E|z^_a - z^_c|
template <typename T>
FeatureLosses<T> feature_losses(const TripletForward<T>& f, const LabelBatch& y, TaskKind task, int num_classes,
                                FeatureMode mode) {
  FeatureLosses<T> out;
  out.task = add(task_loss(f.out_hat_c, y, task, num_classes), task_loss(f.out_hat_a, y, task, num_classes));
  const Var<T>& anchor = mode == FeatureMode::ours ? f.z_c : f.z_hat_c;
  out.reconstruction = add(mean_abs_diff(f.z_hat_c, f.z_c), mean_abs_diff(f.z_hat_a, anchor));
  return out;
}

template <typename T>
FeatureLosses<T> feature_losses(TargetModel<T>& model, const Var<T>& x_hat_c, const Var<T>& x_hat_a, const Var<T>& x_c,
                                const LabelBatch& y, FeatureMode mode) {
  return feature_losses(forward_triplet(model, x_hat_c, x_hat_a, x_c), y, model.task_kind(), model.num_classes(), mode);
}

template <typename T>
struct ClassAwareLosses {
  Var<T> align, intra, inter;
  Var<T> total;  // lambda1 * align + lambda2 * inter + lambda3 * intra
  bool empty_alignment = false;  // no class shared by the clean and adversarial sets
  int classes = 0;               // participating classes
};

/// align = sum_k E|m_c(k) - m^_a(k)|
/// intra = sum_k E|z^_a(k) - m^_a(k)|
/// inter = sum_k sum_{i != k} (M - E|m^_a(k) - m^_a(i)|), each term clamped at 0 in hinge mode.
/// Only classes present in both center sets take part.
template <typename T>
ClassAwareLosses<T> class_aware_losses(const ClassCenters<T>& clean_centers, const ClassFeatureSet<T>& adv_features,
                                       const ClassCenters<T>& adv_centers, const LossWeights& w) {
  std::vector<int> shared;
  for (const auto& [k, _] : adv_centers.centers)
    if (clean_centers.centers.count(k) && adv_features.count(k) > 0) shared.push_back(k);
  ClassAwareLosses<T> out;
  out.align = out.intra = out.inter = out.total = zero_loss<T>();
  out.classes = static_cast<int>(shared.size());
  if (shared.empty()) {
    out.empty_alignment = true;
    return out;
  }
  for (int k : shared) {
    const auto& ma = adv_centers.centers.at(k);
    out.align = add(out.align, mean_abs_diff(clean_centers.centers.at(k), ma));
    const auto& idx = adv_features.members.at(k);
    auto zk = gather_rows(adv_features.rows, std::span<const int>(idx));
    out.intra = add(out.intra, mean_abs_diff(zk, repeat_rows(ma, static_cast<Index>(idx.size()))));
  }
  for (int k : shared)
    for (int i : shared) {
      if (i == k) continue;
      auto term = add_scalar(scale(mean_abs_diff(adv_centers.centers.at(k), adv_centers.centers.at(i)), T(-1)),
                             static_cast<T>(w.margin));
      out.inter = add(out.inter, w.inter_mode == InterMode::hinge ? relu(term) : term);
    }
  out.total = add(add(scale(out.align, static_cast<T>(w.lambda1)), scale(out.inter, static_cast<T>(w.lambda2))),
                  scale(out.intra, static_cast<T>(w.lambda3)));
  return out;
}

/// Picks the clean reference per mode (z_c for ours, z^_c for abla_feature_II), groups, optionally
/// L2-normalizes, and evaluates the class-aware terms.
template <typename T>
ClassAwareLosses<T> class_aware_from_features(const TripletForward<T>& f, const LabelBatch& y, TaskKind task,
                                              int num_classes, const LossWeights& w, ClassAwareMode mode,
                                              const GroupingOptions& grouping = {}) {
  const Var<T>& clean = mode == ClassAwareMode::ours ? f.z_c : f.z_hat_c;
  auto clean_set = group_by_class(clean, y, task, num_classes, grouping);
  auto adv_set = group_by_class(f.z_hat_a, y, task, num_classes, grouping);
  if (w.normalize_features) {
    clean_set = clean_set.normalized();
    adv_set = adv_set.normalized();
  }
  if (adv_set.total_count == 0 || clean_set.total_count == 0) {
    ClassAwareLosses<T> out;
    out.align = out.intra = out.inter = out.total = zero_loss<T>();
    out.empty_alignment = true;
    return out;
  }
  return class_aware_losses(class_centers(clean_set), adv_set, class_centers(adv_set), w);
}

// ---------------------------------------------------------------------------
// Overall generator objective
// ---------------------------------------------------------------------------

template <typename T>
struct GeneratorTerms {
  Var<T> r = zero_loss<T>(), p = zero_loss<T>(), m = zero_loss<T>(), gan_g = zero_loss<T>();
  Var<T> f_task = zero_loss<T>(), f_rec = zero_loss<T>();
  Var<T> f_align = zero_loss<T>(), f_inter = zero_loss<T>(), f_intra = zero_loss<T>();
};

inline void check_finite(const char* name, double v) {
  if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite loss term ") + name + " = " + std::to_string(v));
}

/// lambda4 (L_r + L_p + L_m + L_GAN_g + L_F_task + L_F_rec) + lambda1 L_F_align + lambda2 L_F_inter + lambda3 L_F_intra
template <typename T>
Var<T> total_generator_loss(const GeneratorTerms<T>& t, const LossWeights& w) {
  const std::pair<const char*, const Var<T>*> named[] = {
      {"L_r", &t.r},           {"L_p", &t.p},           {"L_m", &t.m},
      {"L_GAN_g", &t.gan_g},   {"L_F_task", &t.f_task}, {"L_F_rec", &t.f_rec},
      {"L_F_align", &t.f_align}, {"L_F_inter", &t.f_inter}, {"L_F_intra", &t.f_intra}};
  for (const auto& [name, v] : named) check_finite(name, static_cast<double>(v->item()));
  auto group = add(add(add(t.r, t.p), add(t.m, t.gan_g)), add(t.f_task, t.f_rec));
  return add(add(scale(group, static_cast<T>(w.lambda4)), scale(t.f_align, static_cast<T>(w.lambda1))),
             add(scale(t.f_inter, static_cast<T>(w.lambda2)), scale(t.f_intra, static_cast<T>(w.lambda3))));
}

inline double total_generator_loss(const LossParts& p, const LossWeights& w) {
  const auto v = p.values();
  for (size_t i = 0; i < v.size(); ++i)
    if (i != 4) check_finite(LossParts::names[i], v[i]);
  return w.lambda4 * (p.L_r + p.L_p + p.L_m + p.L_GAN_g + p.L_F_task + p.L_F_rec) + w.lambda1 * p.L_F_align +
         w.lambda2 * p.L_F_inter + w.lambda3 * p.L_F_intra;
}

}  // namespace purify
