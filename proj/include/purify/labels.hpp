// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/tensor.hpp"

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace purify {

enum class TaskKind { classification, segmentation, detection };

class UnsupportedTask : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "segmentation") return TaskKind::segmentation;
  if (s == "detection") return TaskKind::detection;
  throw UnsupportedTask("unsupported task kind '" + std::string(s) + "'");
}

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::classification: return "classification";
    case TaskKind::segmentation: return "segmentation";
    case TaskKind::detection: return "detection";
  }
  return "?";
}

/// Axis-aligned ground-truth box in input pixel coordinates, half-open [x0, x1) x [y0, y1).
struct Box {
  int image = 0;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int label = 0;
};

/// Ground truth for one batch. Only the member matching `task` is populated.
struct LabelBatch {
  TaskKind task = TaskKind::classification;
  std::vector<int> classes;  // classification: one per image
  std::vector<int> maps;     // segmentation: N * map_h * map_w, row-major
  Index map_h = 0, map_w = 0;
  std::vector<Box> boxes;  // detection
  Index images = 0;        // batch size for segmentation/detection
  int ignore_label = 255;

  static LabelBatch classification(std::vector<int> y) {
    LabelBatch b;
    b.images = static_cast<Index>(y.size());
    b.classes = std::move(y);
    return b;
  }

  Index batch_size() const { return task == TaskKind::classification ? static_cast<Index>(classes.size()) : images; }
};

}  // namespace purify
