// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/labels.hpp"
#include "purify/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace purify {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }
Split parse_split(const std::string& s);

/// Class-conditional smooth random textures. Each class owns a fixed per-channel template
/// (Gaussian-filtered white noise, unit std). A sample is brightness + scaled template at a
/// random offset, plus pixel noise, clipped to [0,1].
struct SyntheticConfig {
  int num_classes = 10;
  Index n_per_class = 100;
  Index channels = 3, height = 16, width = 16;
  double amplitude = 0.05;
  double amplitude_jitter = 0.3;  // scale drawn from amplitude * U(1 - j, 1 + j)
  double brightness_lo = 0.35, brightness_hi = 0.65;
  double noise = 0.02;
  double template_sigma = 1.5;
  Index max_shift = 2;
  std::uint64_t seed = 0;
};

struct DatasetSpec {
  enum class Source { directory, builtin_synthetic };
  Source source = Source::builtin_synthetic;
  TaskKind task = TaskKind::classification;
  std::filesystem::path root;  // directory source
  Index channels = 3, height = 16, width = 16;
  int num_classes = 10;
  Split split = Split::train;
  bool augment_crop = false;
  bool augment_flip = false;
  SyntheticConfig synthetic;

  void validate() const;
};

/// In-memory split. Images are (N, C, H, W) in [0,1]; ids identify samples across splits.
struct Dataset {
  TaskKind task = TaskKind::classification;
  int num_classes = 0;
  Tensor<float> images;
  std::vector<int> labels;  // classification
  std::vector<int> maps;    // segmentation, N * H * W
  std::vector<std::uint64_t> ids;

  Index size() const { return images.empty() ? 0 : images.dim(0); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  LabelBatch labels_for(const std::vector<Index>& rows) const;
  Tensor<float> images_for(const std::vector<Index>& rows) const;
  Dataset subset(const std::vector<Index>& rows) const;
};

Dataset make_synthetic_dataset(const SyntheticConfig& cfg, Split split);

/// root/<split>/<class_index>/*.png for classification; root/<split>/images/*.png with
/// root/<split>/labels/*.png (same file names, class index per pixel) for segmentation.
Dataset load_directory(const DatasetSpec& spec);

Dataset load_dataset(const DatasetSpec& spec);

struct Batch {
  Tensor<float> images;
  LabelBatch labels;
  std::vector<Index> rows;
};

/// Deterministic epoch order: the permutation for (seed, epoch) is fixed, so a resumed run sees
/// the same batches. The final short batch is kept.
class BatchStream {
 public:
  BatchStream(const Dataset& data, Index batch_size, std::uint64_t seed, bool shuffle = true, bool augment_crop = false,
              bool augment_flip = false);

  Index batches_per_epoch() const;
  std::vector<Batch> epoch(long long epoch_index) const;
  Batch batch(long long epoch_index, Index batch_index) const;

 private:
  std::vector<Index> order(long long epoch_index) const;

  const Dataset* data_;
  Index batch_size_;
  std::uint64_t seed_;
  bool shuffle_, crop_, flip_;
};

/// Pads by H/8 (the 32 -> 40 rule scaled to the resolution), takes a random crop, optionally flips.
Tensor<float> augment(const Tensor<float>& images, Rng& rng, bool crop, bool flip);

/// 8-bit PNG I/O. Grey images load as one channel; RGB(A) as three.
Tensor<float> read_png(const std::filesystem::path& path, Index* channels_out = nullptr);
void write_png(const std::filesystem::path& path, const Tensor<float>& chw);
std::vector<int> read_label_png(const std::filesystem::path& path, Index* h, Index* w);
void write_label_png(const std::filesystem::path& path, const std::vector<int>& labels, Index h, Index w);

/// Writes `data` as PNGs under root/<split>/<class>/ in the loader's layout.
void export_directory(const Dataset& data, const std::filesystem::path& root, Split split);

/// JSON manifest with per-class counts and per-sample checksums.
std::string dataset_manifest(const Dataset& data, const std::string& name);

std::uint64_t sample_checksum(const Dataset& data, Index row);

}  // namespace purify
