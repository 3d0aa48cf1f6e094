// SPDX-License-Identifier: Apache-2.0
#include "purify/evaluation.hpp"

#include "purify/diagnostics.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace purify {

LabelBatch slice_labels(const LabelBatch& y, Index start, Index count) {
  LabelBatch out;
  out.task = y.task;
  out.map_h = y.map_h;
  out.map_w = y.map_w;
  out.ignore_label = y.ignore_label;
  out.images = count;
  switch (y.task) {
    case TaskKind::classification:
      out.classes.assign(y.classes.begin() + start, y.classes.begin() + start + count);
      break;
    case TaskKind::segmentation: {
      const Index px = y.map_h * y.map_w;
      out.maps.assign(y.maps.begin() + start * px, y.maps.begin() + (start + count) * px);
      break;
    }
    case TaskKind::detection:
      for (const auto& b : y.boxes)
        if (b.image >= start && b.image < start + count) {
          Box c = b;
          c.image -= static_cast<int>(start);
          out.boxes.push_back(c);
        }
      break;
  }
  return out;
}

std::vector<double> sample_scores(TargetModel<float>& model, const Tensor<float>& images, const LabelBatch& y,
                                  const Defense* defense, Index chunk) {
  if (model.task_kind() == TaskKind::detection) throw UnsupportedTask("per-image scores are not defined for detection");
  const Index n = images.dim(0), per = n ? images.size() / n : 0;
  if (y.batch_size() != n) throw ShapeError("sample_scores: labels for " + std::to_string(y.batch_size()) + " images, got " + std::to_string(n));
  std::vector<double> scores;
  scores.reserve(static_cast<size_t>(n));
  for (Index s = 0; s < n; s += chunk) {
    const Index c = std::min(chunk, n - s);
    Tensor<float> part(Shape{c, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + s * per, images.data() + (s + c) * per, part.data());
    Var<float> x = Var<float>::constant(part);
    if (defense) x = Var<float>::constant((*defense)(part));
    const auto out = target_forward(model, x).outputs.value();
    if (model.task_kind() == TaskKind::classification) {
      const Index K = out.dim(1);
      for (Index i = 0; i < c; ++i) {
        const float* row = out.data() + i * K;
        const Index arg = std::max_element(row, row + K) - row;
        scores.push_back(arg == y.classes[static_cast<size_t>(s + i)] ? 1.0 : 0.0);
      }
    } else {
      const Index K = out.dim(1), H = out.dim(2), W = out.dim(3);
      for (Index i = 0; i < c; ++i) {
        Index right = 0, valid = 0;
        for (Index p = 0; p < H * W; ++p) {
          const int gt = y.maps[static_cast<size_t>((s + i) * H * W + p)];
          if (gt == y.ignore_label) continue;
          Index arg = 0;
          for (Index k = 1; k < K; ++k)
            if (out[((i * K + k) * H * W) + p] > out[((i * K + arg) * H * W) + p]) arg = k;
          right += arg == gt;
          ++valid;
        }
        scores.push_back(valid ? static_cast<double>(right) / static_cast<double>(valid) : 0.0);
      }
    }
  }
  return scores;
}

Defense as_defense(Generator<float>& g) {
  return [&g](const Tensor<float>& x) { return g.apply(Var<float>::constant(x)).value(); };
}

Defense identity_defense() {
  return [](const Tensor<float>& x) { return x; };
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string attack_name(const AttackSpec& s) {
  std::string name = to_string(s.family);
  if (s.translation_invariant) name = "ti_" + name;
  if (s.targeted) name += "_top9";
  return name;
}

nlohmann::json attack_to_json(const AttackSpec& s) {
  return {{"family", to_string(s.family)},
          {"epsilon", s.epsilon},
          {"alpha", s.alpha},
          {"steps", s.steps},
          {"targeted", s.targeted},
          {"target_rule", s.target_rule == TargetRule::top9 ? "top9" : "none"},
          {"translation_invariant", s.translation_invariant},
          {"ti_kernel_size", s.ti_kernel_size},
          {"random_start", s.random_start},
          {"deepfool_overshoot", s.deepfool_overshoot},
          {"selector", s.selector}};
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdULL;
  h ^= h >> 33;
  return h;
}

Tensor<float> rows_of(const Tensor<float>& t, Index start, Index count) {
  const Index per = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = count;
  Tensor<float> out(s);
  std::copy(t.data() + start * per, t.data() + (start + count) * per, out.data());
  return out;
}

void put_rows(Tensor<float>& dst, const Tensor<float>& src, Index start) {
  const Index per = dst.size() / dst.dim(0);
  std::copy(src.data(), src.data() + src.size(), dst.data() + start * per);
}

double linf(const Tensor<float>& a, const Tensor<float>& b) {
  return static_cast<double>((a.array() - b.array()).abs().maxCoeff());
}

bool in_domain(const Tensor<float>& a) { return a.array().minCoeff() >= 0.0f && a.array().maxCoeff() <= 1.0f; }

std::vector<int> predict(TargetModel<float>& model, const Tensor<float>& x, const Defense* defense) {
  Var<float> in = Var<float>::constant(defense ? (*defense)(x) : x);
  return detail::argmax_rows(target_forward(model, in).outputs.value());
}

struct Attacker {
  AttackModel<float> model;
  std::string id;
};

// Shared driver: `attacker` crafts the examples, `target` (optionally behind `defense`) is scored.
EvalReport run_eval(TargetModel<float>& target, const Defense* defense, const Dataset& data,
                    const std::vector<AttackSpec>& attacks, const Attacker& attacker, const EvalOptions& opt) {
  if (data.size() == 0) throw DatasetError("evaluation split is empty");
  check_input(target, Shape{1, data.images.dim(1), data.images.dim(2), data.images.dim(3)});
  EvalReport rep;
  rep.seed = opt.seed;
  rep.defended = defense != nullptr;
  rep.target_id = target.model_id();
  rep.target_hash_before = params_fingerprint(target.parameters());
  const Index n = opt.limit > 0 ? std::min(opt.limit, data.size()) : data.size();
  rep.samples = n;
  std::vector<Index> rows(static_cast<size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  const Tensor<float> x = data.images_for(rows);
  const LabelBatch y = data.labels_for(rows);

  rep.clean_accuracy = mean_of(sample_scores(target, x, y, nullptr, opt.chunk));
  if (defense) rep.defended_clean_accuracy = mean_of(sample_scores(target, x, y, defense, opt.chunk));

  for (size_t ai = 0; ai < attacks.size(); ++ai) {
    const AttackSpec& spec = attacks[ai];
    spec.validate();
    AttackResult res;
    res.spec = spec;
    res.name = attack_name(spec);
    res.seed = mix(opt.seed, ai);
    if (spec.targeted) {
      if (target.task_kind() != TaskKind::classification)
        throw UnsupportedCombination("targeted evaluation is defined for classification only");
      const int count = spec.target_rule == TargetRule::top9 ? 9 : 1;
      std::vector<double> und(static_cast<size_t>(n), 1.0), def(static_cast<size_t>(n), 1.0);
      double psnr_sum = 0;
      int psnr_n = 0;
      for (Index s = 0; s < n; s += opt.chunk) {
        const Index c = std::min(opt.chunk, n - s);
        const auto xs = rows_of(x, s, c);
        const auto ys = slice_labels(y, s, c);
        const auto clean_logits = attacker.model.forward(Var<float>::constant(xs)).value();
        const auto goals = top_runner_up_targets(clean_logits, ys.classes, count);
        for (int r = 0; r < count; ++r) {
          const auto adv = generate_adversarial(attacker.model, xs, ys, spec, mix(res.seed, static_cast<std::uint64_t>(s * 16 + r)),
                                                goals[static_cast<size_t>(r)]);
          res.max_linf = std::max(res.max_linf, linf(adv, xs));
          res.ball_ok = res.ball_ok && in_domain(adv);
          const auto pu = predict(target, adv, nullptr);
          for (Index i = 0; i < c; ++i)
            if (pu[static_cast<size_t>(i)] == goals[static_cast<size_t>(r)][static_cast<size_t>(i)]) und[static_cast<size_t>(s + i)] = 0;
          if (defense) {
            const auto pd = predict(target, adv, defense);
            for (Index i = 0; i < c; ++i)
              if (pd[static_cast<size_t>(i)] == goals[static_cast<size_t>(r)][static_cast<size_t>(i)]) def[static_cast<size_t>(s + i)] = 0;
            psnr_sum += psnr((*defense)(adv), xs) * static_cast<double>(c);
            psnr_n += static_cast<int>(c);
          }
        }
      }
      res.undefended_scores = und;
      if (defense) {
        res.defended_scores = def;
        res.psnr = psnr_sum / psnr_n;
      }
    } else {
      Tensor<float> adv_all(x.shape());
      for (Index s = 0; s < n; s += opt.chunk) {
        const Index c = std::min(opt.chunk, n - s);
        const auto xs = rows_of(x, s, c);
        const auto adv = generate_adversarial(attacker.model, xs, slice_labels(y, s, c), spec, mix(res.seed, static_cast<std::uint64_t>(s)));
        put_rows(adv_all, adv, s);
      }
      // Re-check every consumed example rather than trusting the generator.
      res.max_linf = linf(adv_all, x);
      res.ball_ok = in_domain(adv_all);
      res.undefended_scores = sample_scores(target, adv_all, y, nullptr, opt.chunk);
      if (defense) {
        res.defended_scores = sample_scores(target, adv_all, y, defense, opt.chunk);
        Tensor<float> purified(x.shape());
        for (Index s = 0; s < n; s += opt.chunk) {
          const Index c = std::min(opt.chunk, n - s);
          put_rows(purified, (*defense)(rows_of(adv_all, s, c)), s);
        }
        res.psnr = psnr(purified, x);
      }
    }
    res.ball_ok = res.ball_ok && res.max_linf <= spec.epsilon + 1e-6;
    res.undefended_accuracy = mean_of(res.undefended_scores);
    if (defense) {
      res.defended_accuracy = mean_of(res.defended_scores);
      res.p_value = paired_t_test(res.defended_scores, res.undefended_scores);
    }
    rep.attacks.push_back(std::move(res));
  }
  rep.target_hash_after = params_fingerprint(target.parameters());
  return rep;
}

}  // namespace

bool EvalReport::invariants_ok() const {
  if (target_hash_before != target_hash_after) return false;
  for (const auto& a : attacks)
    if (!a.ball_ok) return false;
  return true;
}

nlohmann::json EvalReport::to_json() const {
  using nlohmann::json;
  auto hex = [](std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
  };
  json j;
  j["schema"] = kReportSchema;
  j["mode"] = mode;
  j["models"] = {{"target", target_id},
                 {"substitute", substitute_id},
                 {"surrogate", surrogate_id},
                 {"generator_trained_on", generator_target_id}};
  j["defended"] = defended;
  j["transfer"] = transfer;
  j["protocol_warning"] = protocol_warning;
  j["seed"] = seed;
  j["samples"] = samples;
  j["clean_accuracy"] = clean_accuracy;
  j["defended_clean_accuracy"] = defended_clean_accuracy ? json(*defended_clean_accuracy) : json(nullptr);
  j["target_hash"] = {{"before", hex(target_hash_before)}, {"after", hex(target_hash_after)}};
  j["invariants_ok"] = invariants_ok();
  json list = json::array();
  for (const auto& a : attacks) {
    json e;
    e["name"] = a.name;
    e["spec"] = attack_to_json(a.spec);
    e["seed"] = a.seed;
    e["undefended_accuracy"] = a.undefended_accuracy;
    e["defended_accuracy"] = a.defended_accuracy ? json(*a.defended_accuracy) : json(nullptr);
    e["psnr"] = a.psnr ? json(*a.psnr) : json(nullptr);
    e["p_value"] = a.p_value ? json(*a.p_value) : json(nullptr);
    e["max_linf"] = a.max_linf;
    e["epsilon_ball_ok"] = a.ball_ok;
    list.push_back(e);
  }
  j["attacks"] = list;
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "attack,family,epsilon,alpha,steps,targeted,seed,clean_accuracy,defended_clean_accuracy,undefended_accuracy,"
         "defended_accuracy,psnr,p_value,max_linf,epsilon_ball_ok\n";
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  for (const auto& a : attacks) {
    out << a.name << ',' << to_string(a.spec.family) << ',' << a.spec.epsilon << ',' << a.spec.alpha << ','
        << a.spec.steps << ',' << (a.spec.targeted ? 1 : 0) << ',' << a.seed << ',' << clean_accuracy << ',';
    opt(defended_clean_accuracy);
    out << ',' << a.undefended_accuracy << ',';
    opt(a.defended_accuracy);
    out << ',';
    opt(a.psnr);
    out << ',';
    opt(a.p_value);
    out << ',' << a.max_linf << ',' << (a.ball_ok ? 1 : 0) << '\n';
  }
  return out.str();
}

EvalReport evaluate(TargetModel<float>& target, const Defense* defense, const Dataset& data,
                    const std::vector<AttackSpec>& attacks, TargetModel<float>* substitute, const EvalOptions& opt) {
  TargetModel<float>& source = substitute ? *substitute : target;
  if (substitute && substitute->input_shape() != target.input_shape())
    throw ConfigError("substitute input " + shape_str(substitute->input_shape()) + " differs from target input " +
                      shape_str(target.input_shape()) + "; resizing is not supported");
  source.set_frozen(true);
  target.set_frozen(true);
  auto rep = run_eval(target, defense, data, attacks, {as_attack_model(source), source.model_id()}, opt);
  rep.mode = substitute ? "transfer" : "white_box";
  if (substitute) rep.substitute_id = substitute->model_id();
  return rep;
}

EvalReport model_transfer_eval(const Defense& generator, const std::string& trained_target_id,
                               TargetModel<float>& unseen_target, const Dataset& data,
                               const std::vector<AttackSpec>& attacks, TargetModel<float>* substitute,
                               const EvalOptions& opt) {
  auto rep = evaluate(unseen_target, &generator, data, attacks, substitute, opt);
  rep.mode = "model_transfer";
  rep.generator_target_id = trained_target_id;
  rep.transfer = trained_target_id != unseen_target.model_id();
  rep.protocol_warning = !rep.transfer;
  return rep;
}

EvalReport bpda_eval(TargetModel<float>& target, const Defense& defense, Generator<float>* surrogate,
                     const Dataset& data, const AttackSpec& spec, const EvalOptions& opt, bool straight_through) {
  target.set_frozen(true);
  AttackModel<float> m = as_attack_model(target);
  if (surrogate) {
    m.forward = [&target, surrogate, straight_through](const Var<float>& x) {
      Var<float> through;
      if (straight_through) {
        // Forward value is surrogate(x); the gradient passes straight to x.
        const auto y = surrogate->apply(Var<float>::constant(x.value())).value();
        Tensor<float> delta(y.shape());
        delta.array() = y.array() - x.value().array();
        through = add(x, Var<float>::constant(delta));
      } else {
        through = surrogate->apply(x);
      }
      return target_forward(target, through).outputs;
    };
  }
  auto rep = run_eval(target, &defense, data, {spec}, {m, target.model_id()}, opt);
  rep.mode = "bpda";
  rep.surrogate_id = surrogate ? "generator" : "identity";
  return rep;
}

double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes, int ignore_label) {
  if (pred.size() != gt.size()) throw ShapeError("miou: prediction and ground truth differ in size");
  std::vector<long long> inter(static_cast<size_t>(num_classes), 0), uni(static_cast<size_t>(num_classes), 0),
      present(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < gt.size(); ++i) {
    const int g = gt[i], p = pred[i];
    if (g == ignore_label) continue;
    if (g >= 0 && g < num_classes) ++present[static_cast<size_t>(g)];
    for (int k : {g, p}) {
      if (k < 0 || k >= num_classes) continue;
      if (k == p && k == g) {
        ++inter[static_cast<size_t>(k)];
        ++uni[static_cast<size_t>(k)];
        break;
      }
      ++uni[static_cast<size_t>(k)];
    }
  }
  double total = 0;
  int classes = 0;
  for (int k = 0; k < num_classes; ++k) {
    if (!present[static_cast<size_t>(k)]) continue;
    total += static_cast<double>(inter[static_cast<size_t>(k)]) / static_cast<double>(uni[static_cast<size_t>(k)]);
    ++classes;
  }
  return classes ? total / classes : 0.0;
}

double paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: lists differ in length");
  const size_t n = a.size();
  if (n < 2) throw std::invalid_argument("paired_t_test needs n >= 2");
  double mean = 0;
  for (size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0;
  for (size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0) return mean == 0 ? 1.0 : 0.0;
  const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(n - 1));
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

}  // namespace purify
