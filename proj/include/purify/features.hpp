// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/labels.hpp"
#include "purify/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace purify {

class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class EmptySetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Feature vectors as rows of one (M, L) tensor plus the row indices belonging to each class.
template <typename T>
struct ClassFeatureSet {
  Var<T> rows;
  std::map<int, std::vector<int>> members;
  Index total_count = 0;

  Index dim() const { return rows.defined() && rows.value().rank() == 2 ? rows.dim(1) : 0; }

  Index count(int k) const {
    auto it = members.find(k);
    return it == members.end() ? 0 : static_cast<Index>(it->second.size());
  }

  /// Same grouping with every row scaled to unit L2 norm.
  ClassFeatureSet normalized() const { return {l2_normalize_rows(rows), members, total_count}; }
};

/// Per-class arithmetic means, each a (1, L) row. Empty classes are absent.
template <typename T>
struct ClassCenters {
  std::map<int, Var<T>> centers;
  std::map<int, Index> counts;
};

struct GroupingOptions {
  Index segmentation_pixel_cap = 4096;  // 0 disables subsampling
  std::uint64_t seed = 0;
};

namespace detail {

inline void check_label(int y, int k, size_t where) {
  if (y < 0 || y >= k)
    throw LabelError("label " + std::to_string(y) + " at index " + std::to_string(where) + " outside [0, " +
                     std::to_string(k) + ")");
}

}  // namespace detail

/// Buckets target-model features into K classes.
///  classification: features (N, L), one label per row.
///  segmentation:   features (N, L, h, w); label maps are resized to h x w by nearest neighbour and
///                  ignore-label pixels are dropped.
///  detection:      features (N, L, h, w); each box is cropped (rounded out to whole cells) and mean
///                  pooled to a single vector. Overlapping boxes crop independently.
template <typename T>
ClassFeatureSet<T> group_by_class(const Var<T>& features, const LabelBatch& labels, TaskKind task, int num_classes,
                                  const GroupingOptions& opt = {}) {
  ClassFeatureSet<T> out;
  switch (task) {
    case TaskKind::classification: {
      if (features.value().rank() != 2) throw ShapeError("classification features must be (N, L)");
      if (static_cast<Index>(labels.classes.size()) != features.dim(0))
        throw ShapeError("got " + std::to_string(labels.classes.size()) + " labels for " +
                         std::to_string(features.dim(0)) + " feature rows");
      for (size_t i = 0; i < labels.classes.size(); ++i) {
        detail::check_label(labels.classes[i], num_classes, i);
        out.members[labels.classes[i]].push_back(static_cast<int>(i));
      }
      out.rows = features;
      out.total_count = static_cast<Index>(labels.classes.size());
      return out;
    }
    case TaskKind::segmentation: {
      const auto& s = features.shape();
      if (s.size() != 4) throw ShapeError("segmentation features must be (N, L, h, w)");
      const Index n = s[0], h = s[2], w = s[3], H = labels.map_h, W = labels.map_w;
      if (static_cast<Index>(labels.maps.size()) != n * H * W) throw ShapeError("segmentation label maps do not match batch");
      std::vector<int> keep, cls;
      for (Index b = 0; b < n; ++b)
        for (Index i = 0; i < h; ++i)
          for (Index j = 0; j < w; ++j) {
            const Index si = std::min(H - 1, static_cast<Index>((static_cast<double>(i) + 0.5) * H / h));
            const Index sj = std::min(W - 1, static_cast<Index>((static_cast<double>(j) + 0.5) * W / w));
            const size_t src = static_cast<size_t>((b * H + si) * W + sj);
            const int y = labels.maps[src];
            if (y == labels.ignore_label) continue;
            detail::check_label(y, num_classes, src);
            keep.push_back(static_cast<int>((b * h + i) * w + j));
            cls.push_back(y);
          }
      std::vector<size_t> order(keep.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      if (opt.segmentation_pixel_cap > 0 && static_cast<Index>(keep.size()) > opt.segmentation_pixel_cap) {
        Rng rng(opt.seed);
        std::vector<size_t> picked;
        std::sample(order.begin(), order.end(), std::back_inserter(picked),
                    static_cast<size_t>(opt.segmentation_pixel_cap), rng);
        order = std::move(picked);
      }
      std::vector<int> rows;
      for (size_t r = 0; r < order.size(); ++r) {
        rows.push_back(keep[order[r]]);
        out.members[cls[order[r]]].push_back(static_cast<int>(r));
      }
      out.rows = gather_rows(nchw_to_rows(features), std::span<const int>(rows));
      out.total_count = static_cast<Index>(rows.size());
      return out;
    }
    case TaskKind::detection: {
      const auto& s = features.shape();
      if (s.size() != 4) throw ShapeError("detection features must be (N, L, h, w)");
      const Index n = s[0], h = s[2], w = s[3];
      if (labels.map_h <= 0 || labels.map_w <= 0) throw ShapeError("detection labels need the input resolution (map_h, map_w)");
      const double sy = static_cast<double>(labels.map_h) / static_cast<double>(h);
      const double sx = static_cast<double>(labels.map_w) / static_cast<double>(w);
      auto grid = nchw_to_rows(features);
      std::vector<Var<T>> pooled;
      for (size_t bi = 0; bi < labels.boxes.size(); ++bi) {
        const Box& box = labels.boxes[bi];
        detail::check_label(box.label, num_classes, bi);
        if (box.image < 0 || box.image >= n) throw LabelError("box " + std::to_string(bi) + " refers to a missing image");
        const Index y0 = std::clamp<Index>(static_cast<Index>(std::floor(box.y0 / sy)), 0, h - 1);
        const Index x0 = std::clamp<Index>(static_cast<Index>(std::floor(box.x0 / sx)), 0, w - 1);
        const Index y1 = std::clamp<Index>(static_cast<Index>(std::ceil(box.y1 / sy)), y0 + 1, h);
        const Index x1 = std::clamp<Index>(static_cast<Index>(std::ceil(box.x1 / sx)), x0 + 1, w);
        std::vector<int> cells;
        for (Index i = y0; i < y1; ++i)
          for (Index j = x0; j < x1; ++j) cells.push_back(static_cast<int>((box.image * h + i) * w + j));
        pooled.push_back(mean_rows(gather_rows(grid, std::span<const int>(cells))));
        out.members[box.label].push_back(static_cast<int>(bi));
      }
      if (pooled.empty()) {
        out.rows = Var<T>::constant(Tensor<T>(Shape{0, s[1]}));
      } else {
        out.rows = concat0(pooled);
      }
      out.total_count = static_cast<Index>(pooled.size());
      return out;
    }
  }
  throw UnsupportedTask("unsupported task kind");
}

template <typename T>
ClassCenters<T> class_centers(const ClassFeatureSet<T>& cfs) {
  ClassCenters<T> out;
  for (const auto& [k, idx] : cfs.members) {
    if (idx.empty()) continue;
    out.centers[k] = mean_rows(gather_rows(cfs.rows, std::span<const int>(idx)));
    out.counts[k] = static_cast<Index>(idx.size());
  }
  if (out.centers.empty()) throw EmptySetError("class_centers: every class is empty");
  return out;
}

}  // namespace purify
