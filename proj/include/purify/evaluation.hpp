// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/attacks.hpp"
#include "purify/data.hpp"
#include "purify/models.hpp"

#include "json.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace purify {

inline constexpr const char* kReportSchema = "report-v1";

/// Image-to-image defense applied in front of the target model.
using Defense = std::function<Tensor<float>(const Tensor<float>&)>;

Defense as_defense(Generator<float>& g);
Defense identity_defense();

/// Rows [start, start + count) of a label batch; detection boxes are re-indexed.
LabelBatch slice_labels(const LabelBatch& y, Index start, Index count);

/// Per-image score: 1/0 top-1 correctness for classification, pixel accuracy (ignore label
/// excluded) for segmentation. Detection scoring is not provided.
std::vector<double> sample_scores(TargetModel<float>& model, const Tensor<float>& images, const LabelBatch& y,
                                  const Defense* defense = nullptr, Index chunk = 100);

double mean_of(const std::vector<double>& v);

std::string attack_name(const AttackSpec& s);
nlohmann::json attack_to_json(const AttackSpec& s);

struct AttackResult {
  AttackSpec spec;
  std::string name;
  std::uint64_t seed = 0;
  double undefended_accuracy = 0;
  std::optional<double> defended_accuracy;
  std::optional<double> psnr;  // purified adversarial vs clean
  std::optional<double> p_value;  // paired t-test, defended vs undefended per-image scores
  double max_linf = 0;            // re-measured on the consumed examples
  bool ball_ok = true;
  std::vector<double> undefended_scores, defended_scores;
};

struct EvalReport {
  std::string mode = "white_box";  // white_box | transfer | model_transfer | bpda
  std::string target_id, substitute_id, surrogate_id, generator_target_id;
  bool defended = false;
  bool transfer = false;           // generator protects a model it was not trained with
  bool protocol_warning = false;   // model_transfer_eval on the training target
  std::uint64_t seed = 0;
  Index samples = 0;
  double clean_accuracy = 0;
  std::optional<double> defended_clean_accuracy;
  std::vector<AttackResult> attacks;
  std::uint64_t target_hash_before = 0, target_hash_after = 0;

  bool invariants_ok() const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

struct EvalOptions {
  std::uint64_t seed = 0;
  Index limit = 0;  // 0 = the whole split
  Index chunk = 100;
};

/// Adversarial examples come from `substitute` when given (transfer setting), otherwise from the
/// target itself. Undefended accuracy scores target(x_adv); defended scores target(G(x_adv)).
/// Targeted specs run once per runner-up class; an image counts as robust only if every targeted
/// attempt misses its target.
EvalReport evaluate(TargetModel<float>& target, const Defense* defense, const Dataset& data,
                    const std::vector<AttackSpec>& attacks, TargetModel<float>* substitute = nullptr,
                    const EvalOptions& opt = {});

/// evaluate() with a purifier trained against `trained_target_id` protecting `unseen_target`.
EvalReport model_transfer_eval(const Defense& generator, const std::string& trained_target_id,
                               TargetModel<float>& unseen_target, const Dataset& data,
                               const std::vector<AttackSpec>& attacks, TargetModel<float>* substitute = nullptr,
                               const EvalOptions& opt = {});

/// Attacker differentiates through target(surrogate(x)), with the surrogate replaced by the
/// identity on the backward pass when `straight_through`; the examples then hit target(defense(x)).
EvalReport bpda_eval(TargetModel<float>& target, const Defense& defense, Generator<float>* surrogate,
                     const Dataset& data, const AttackSpec& spec, const EvalOptions& opt = {},
                     bool straight_through = true);

/// Mean IoU over classes present in the ground truth; ignore_label pixels are skipped.
double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes, int ignore_label = 255);

/// Two-tailed paired t-test. All-zero differences give p = 1; constant non-zero differences p = 0.
double paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace purify
