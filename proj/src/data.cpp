// SPDX-License-Identifier: Apache-2.0
#include "purify/data.hpp"

#include "json.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>

namespace purify {

namespace fs = std::filesystem;

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw DatasetError("unknown split '" + s + "' (expected train or test)");
}

void DatasetSpec::validate() const {
  if (num_classes < 2) throw DatasetError("dataset needs at least 2 classes");
  if (channels < 1 || height < 1 || width < 1) throw DatasetError("dataset resolution must be positive");
  if (source == Source::builtin_synthetic) {
    if (task != TaskKind::classification) throw DatasetError("the builtin synthetic set is classification only");
    if (synthetic.n_per_class < 1) throw DatasetError("synthetic dataset: n_per_class must be >= 1 (empty split)");
  } else if (root.empty()) {
    throw DatasetError("directory dataset needs a root path");
  }
}

namespace {

Rng stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return Rng(seq);
}

// 1-D Gaussian weights truncated at 4 sigma.
std::vector<double> gauss1d(double sigma) {
  const int r = static_cast<int>(4.0 * sigma + 0.5);
  std::vector<double> k(static_cast<size_t>(2 * r + 1));
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  return k;
}

// Separable blur with periodic boundary on a p x p plane.
void blur_wrap(std::vector<double>& plane, Index p, double sigma) {
  const auto k = gauss1d(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(plane.size());
  auto wrap = [p](Index i) { return ((i % p) + p) % p; };
  for (Index y = 0; y < p; ++y)
    for (Index x = 0; x < p; ++x) {
      double acc = 0;
      for (int d = -r; d <= r; ++d) acc += k[static_cast<size_t>(d + r)] * plane[static_cast<size_t>(y * p + wrap(x + d))];
      tmp[static_cast<size_t>(y * p + x)] = acc;
    }
  for (Index y = 0; y < p; ++y)
    for (Index x = 0; x < p; ++x) {
      double acc = 0;
      for (int d = -r; d <= r; ++d) acc += k[static_cast<size_t>(d + r)] * tmp[static_cast<size_t>(wrap(y + d) * p + x)];
      plane[static_cast<size_t>(y * p + x)] = acc;
    }
}

}  // namespace

Dataset make_synthetic_dataset(const SyntheticConfig& cfg, Split split) {
  if (cfg.num_classes < 2) throw DatasetError("synthetic dataset needs K >= 2");
  if (cfg.n_per_class < 1) throw DatasetError("synthetic dataset: n_per_class must be >= 1 (empty split)");
  const Index c = cfg.channels, h = cfg.height, w = cfg.width, s = cfg.max_shift;
  const Index p = std::max(h, w) + 2 * s;

  // Templates are shared by both splits.
  Rng trng = stream(cfg.seed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> templates;
  for (int k = 0; k < cfg.num_classes; ++k) {
    std::vector<double> t(static_cast<size_t>(c * p * p));
    for (Index ch = 0; ch < c; ++ch) {
      std::vector<double> plane(static_cast<size_t>(p * p));
      for (auto& v : plane) v = normal(trng);
      blur_wrap(plane, p, cfg.template_sigma);
      std::copy(plane.begin(), plane.end(), t.begin() + ch * p * p);
    }
    const double mean = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
    double var = 0;
    for (double v : t) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(t.size()));
    for (auto& v : t) v /= sd;
    templates.push_back(std::move(t));
  }

  Rng rng = stream(cfg.seed, split == Split::train ? 1 : 2);
  std::uniform_real_distribution<double> bright(cfg.brightness_lo, cfg.brightness_hi);
  std::uniform_real_distribution<double> jitter(1.0 - cfg.amplitude_jitter, 1.0 + cfg.amplitude_jitter);
  std::uniform_int_distribution<Index> shift(0, 2 * s);

  const Index n = cfg.n_per_class * cfg.num_classes;
  Dataset d;
  d.task = TaskKind::classification;
  d.num_classes = cfg.num_classes;
  d.images = Tensor<float>(Shape{n, c, h, w});
  Index row = 0;
  for (int k = 0; k < cfg.num_classes; ++k)
    for (Index i = 0; i < cfg.n_per_class; ++i, ++row) {
      const double amp = cfg.amplitude * jitter(rng), b = bright(rng);
      const Index dx = shift(rng), dy = shift(rng);
      const auto& t = templates[static_cast<size_t>(k)];
      float* out = d.images.data() + row * c * h * w;
      for (Index ch = 0; ch < c; ++ch)
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            const double v = b + amp * t[static_cast<size_t>(ch * p * p + (y + dy) * p + x + dx)] + cfg.noise * normal(rng);
            out[(ch * h + y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
      d.labels.push_back(k);
      d.ids.push_back((static_cast<std::uint64_t>(split == Split::train ? 1 : 2) << 48) | static_cast<std::uint64_t>(row));
    }
  // Interleave classes so unshuffled prefixes are balanced.
  std::vector<Index> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return d.subset(perm);
}

LabelBatch Dataset::labels_for(const std::vector<Index>& rows) const {
  LabelBatch b;
  b.task = task;
  b.images = static_cast<Index>(rows.size());
  if (task == TaskKind::classification) {
    for (Index r : rows) b.classes.push_back(labels[static_cast<size_t>(r)]);
  } else if (task == TaskKind::segmentation) {
    b.map_h = images.dim(2);
    b.map_w = images.dim(3);
    const Index px = b.map_h * b.map_w;
    for (Index r : rows) b.maps.insert(b.maps.end(), maps.begin() + r * px, maps.begin() + (r + 1) * px);
  } else {
    throw UnsupportedTask("detection datasets are not loaded by this toolkit");
  }
  return b;
}

Tensor<float> Dataset::images_for(const std::vector<Index>& rows) const {
  const Index per = images.size() / std::max<Index>(size(), 1);
  Shape s = images.shape();
  s[0] = static_cast<Index>(rows.size());
  Tensor<float> out(s);
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(images.data() + rows[i] * per, per, out.data() + static_cast<Index>(i) * per);
  return out;
}

Dataset Dataset::subset(const std::vector<Index>& rows) const {
  Dataset d;
  d.task = task;
  d.num_classes = num_classes;
  d.images = images_for(rows);
  const Index px = images.dim(2) * images.dim(3);
  for (Index r : rows) {
    if (!labels.empty()) d.labels.push_back(labels[static_cast<size_t>(r)]);
    if (!maps.empty()) d.maps.insert(d.maps.end(), maps.begin() + r * px, maps.begin() + (r + 1) * px);
    if (!ids.empty()) d.ids.push_back(ids[static_cast<size_t>(r)]);
  }
  return d;
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<FILE, FileCloser>;

struct RawImage {
  Index w = 0, h = 0, c = 0;
  std::vector<unsigned char> px;
};

RawImage read_raw(const fs::path& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw DatasetError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw DatasetError(path.string() + " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DatasetError("corrupt PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  RawImage img;
  img.w = png_get_image_width(png, info);
  img.h = png_get_image_height(png, info);
  img.c = png_get_channels(png, info);
  const size_t stride = png_get_rowbytes(png, info);
  img.px.resize(stride * static_cast<size_t>(img.h));
  std::vector<png_bytep> rows(static_cast<size_t>(img.h));
  for (Index y = 0; y < img.h; ++y) rows[static_cast<size_t>(y)] = img.px.data() + static_cast<size_t>(y) * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_raw(const fs::path& path, const RawImage& img) {
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw DatasetError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DatasetError("failed writing PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (Index y = 0; y < img.h; ++y)
    png_write_row(png, const_cast<png_bytep>(img.px.data() + static_cast<size_t>(y * img.w * img.c)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Tensor<float> read_png(const fs::path& path, Index* channels_out) {
  auto img = read_raw(path);
  if (channels_out) *channels_out = img.c;
  Tensor<float> t(Shape{img.c, img.h, img.w});
  for (Index y = 0; y < img.h; ++y)
    for (Index x = 0; x < img.w; ++x)
      for (Index ch = 0; ch < img.c; ++ch)
        t[(ch * img.h + y) * img.w + x] = static_cast<float>(img.px[static_cast<size_t>((y * img.w + x) * img.c + ch)]) / 255.0f;
  return t;
}

void write_png(const fs::path& path, const Tensor<float>& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3)) throw ShapeError("write_png expects (1|3, H, W)");
  RawImage img{chw.dim(2), chw.dim(1), chw.dim(0), {}};
  img.px.resize(static_cast<size_t>(img.w * img.h * img.c));
  for (Index y = 0; y < img.h; ++y)
    for (Index x = 0; x < img.w; ++x)
      for (Index ch = 0; ch < img.c; ++ch) {
        const float v = std::clamp(chw[(ch * img.h + y) * img.w + x], 0.0f, 1.0f);
        img.px[static_cast<size_t>((y * img.w + x) * img.c + ch)] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  write_raw(path, img);
}

std::vector<int> read_label_png(const fs::path& path, Index* h, Index* w) {
  auto img = read_raw(path);
  if (img.c != 1) throw DatasetError("label map " + path.string() + " must be single-channel");
  *h = img.h;
  *w = img.w;
  return {img.px.begin(), img.px.end()};
}

void write_label_png(const fs::path& path, const std::vector<int>& labels, Index h, Index w) {
  RawImage img{w, h, 1, {}};
  for (int v : labels) {
    if (v < 0 || v > 255) throw DatasetError("label value " + std::to_string(v) + " does not fit in 8 bits");
    img.px.push_back(static_cast<unsigned char>(v));
  }
  write_raw(path, img);
}

namespace {

std::vector<fs::path> pngs_in(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

void append_image(std::vector<float>& pixels, const Tensor<float>& img, const DatasetSpec& spec, const fs::path& p) {
  if (img.dim(1) != spec.height || img.dim(2) != spec.width)
    throw DatasetError(p.string() + " is " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(1)) +
                       ", expected " + std::to_string(spec.width) + "x" + std::to_string(spec.height));
  if (img.dim(0) == spec.channels) {
    pixels.insert(pixels.end(), img.data(), img.data() + img.size());
  } else if (img.dim(0) == 1) {
    for (Index ch = 0; ch < spec.channels; ++ch) pixels.insert(pixels.end(), img.data(), img.data() + img.size());
  } else {
    throw DatasetError(p.string() + " has " + std::to_string(img.dim(0)) + " channels, expected " +
                       std::to_string(spec.channels));
  }
}

}  // namespace

Dataset load_directory(const DatasetSpec& spec) {
  const fs::path dir = spec.root / to_string(spec.split);
  if (!fs::is_directory(dir)) throw DatasetError("dataset directory " + dir.string() + " is unreadable or missing");
  Dataset d;
  d.task = spec.task;
  d.num_classes = spec.num_classes;
  std::vector<float> pixels;
  std::uint64_t next_id = static_cast<std::uint64_t>(spec.split == Split::train ? 1 : 2) << 48;
  if (spec.task == TaskKind::classification) {
    for (int k = 0; k < spec.num_classes; ++k) {
      const fs::path cdir = dir / std::to_string(k);
      if (!fs::is_directory(cdir)) continue;
      for (const auto& p : pngs_in(cdir)) {
        append_image(pixels, read_png(p), spec, p);
        d.labels.push_back(k);
        d.ids.push_back(next_id++);
      }
    }
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_directory()) continue;
      const std::string name = e.path().filename().string();
      const bool numeric = !name.empty() && std::all_of(name.begin(), name.end(), ::isdigit);
      if (!numeric || std::stoi(name) >= spec.num_classes)
        throw DatasetError("class directory '" + name + "' does not match labels 0.." + std::to_string(spec.num_classes - 1));
    }
  } else if (spec.task == TaskKind::segmentation) {
    const fs::path idir = dir / "images", ldir = dir / "labels";
    if (!fs::is_directory(idir) || !fs::is_directory(ldir))
      throw DatasetError("segmentation split needs images/ and labels/ under " + dir.string());
    for (const auto& p : pngs_in(idir)) {
      const fs::path lp = ldir / p.filename();
      if (!fs::exists(lp)) throw DatasetError("label file mismatch: no " + lp.string() + " for " + p.string());
      append_image(pixels, read_png(p), spec, p);
      Index h = 0, w = 0;
      auto m = read_label_png(lp, &h, &w);
      if (h != spec.height || w != spec.width) throw DatasetError("label map " + lp.string() + " size mismatch");
      for (int v : m)
        if (v != 255 && v >= spec.num_classes) throw DatasetError("label " + std::to_string(v) + " in " + lp.string() + " out of range");
      d.maps.insert(d.maps.end(), m.begin(), m.end());
      d.ids.push_back(next_id++);
    }
    if (pngs_in(ldir).size() != pngs_in(idir).size()) throw DatasetError("label file mismatch: counts differ in " + dir.string());
  } else {
    throw UnsupportedTask("directory loading supports classification and segmentation");
  }
  const Index n = static_cast<Index>(d.ids.size());
  if (n == 0) throw DatasetError("no images found under " + dir.string());
  Tensor<float>::Storage store = Eigen::Map<Tensor<float>::Storage>(pixels.data(), static_cast<Index>(pixels.size()));
  d.images = Tensor<float>(Shape{n, spec.channels, spec.height, spec.width}, std::move(store));
  return d;
}

Dataset load_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.source == DatasetSpec::Source::directory) return load_directory(spec);
  SyntheticConfig cfg = spec.synthetic;
  cfg.num_classes = spec.num_classes;
  cfg.channels = spec.channels;
  cfg.height = spec.height;
  cfg.width = spec.width;
  return make_synthetic_dataset(cfg, spec.split);
}

void export_directory(const Dataset& data, const fs::path& root, Split split) {
  const fs::path dir = root / to_string(split);
  for (Index i = 0; i < data.size(); ++i) {
    const Index per = data.images.size() / data.size();
    const auto s = data.sample_shape();
    Tensor<float> img(s);
    std::copy_n(data.images.data() + i * per, per, img.data());
    char name[32];
    std::snprintf(name, sizeof name, "%06lld.png", static_cast<long long>(i));
    if (data.task == TaskKind::classification) {
      const fs::path cdir = dir / std::to_string(data.labels[static_cast<size_t>(i)]);
      fs::create_directories(cdir);
      write_png(cdir / name, img);
    } else {
      fs::create_directories(dir / "images");
      fs::create_directories(dir / "labels");
      write_png(dir / "images" / name, img);
      const Index px = s[1] * s[2];
      write_label_png(dir / "labels" / name, std::vector<int>(data.maps.begin() + i * px, data.maps.begin() + (i + 1) * px),
                      s[1], s[2]);
    }
  }
}

std::uint64_t sample_checksum(const Dataset& data, Index row) {
  const Index per = data.images.size() / data.size();
  std::uint64_t h = fnv1a(data.images.data() + row * per, static_cast<size_t>(per) * sizeof(float));
  if (!data.labels.empty()) h = fnv1a(&data.labels[static_cast<size_t>(row)], sizeof(int), h);
  return h;
}

std::string dataset_manifest(const Dataset& data, const std::string& name) {
  nlohmann::json j;
  j["name"] = name;
  j["task"] = to_string(data.task);
  j["num_classes"] = data.num_classes;
  j["count"] = data.size();
  j["shape"] = data.sample_shape();
  std::map<int, Index> per_class;
  for (int y : data.labels) ++per_class[y];
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [k, n] : per_class) counts[std::to_string(k)] = n;
  j["class_counts"] = counts;
  nlohmann::json samples = nlohmann::json::array();
  std::uint64_t all = 1469598103934665603ULL;
  for (Index i = 0; i < data.size(); ++i) {
    const auto c = sample_checksum(data, i);
    all = fnv1a(&c, sizeof c, all);
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(c));
    samples.push_back({{"id", data.ids.empty() ? static_cast<std::uint64_t>(i) : data.ids[static_cast<size_t>(i)]},
                       {"checksum", hex}});
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(all));
  j["checksum"] = hex;
  j["samples"] = samples;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

Tensor<float> augment(const Tensor<float>& images, Rng& rng, bool crop, bool flip) {
  if (!crop && !flip) return images;
  const Index n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const Index pad = std::max<Index>(1, h / 8);
  Tensor<float> out(images.shape());
  std::uniform_int_distribution<Index> off(0, 2 * pad);
  std::bernoulli_distribution coin(0.5);
  for (Index b = 0; b < n; ++b) {
    const Index dy = crop ? off(rng) - pad : 0, dx = crop ? off(rng) - pad : 0;
    const bool mirror = flip && coin(rng);
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const Index sy = y + dy, sx0 = x + dx;
          const Index sx = mirror ? w - 1 - sx0 : sx0;
          const bool inside = sy >= 0 && sy < h && sx0 >= 0 && sx0 < w;
          out[((b * c + ch) * h + y) * w + x] = inside ? images[((b * c + ch) * h + sy) * w + sx] : 0.0f;
        }
  }
  return out;
}

BatchStream::BatchStream(const Dataset& data, Index batch_size, std::uint64_t seed, bool shuffle, bool augment_crop,
                         bool augment_flip)
    : data_(&data), batch_size_(batch_size), seed_(seed), shuffle_(shuffle), crop_(augment_crop), flip_(augment_flip) {
  if (batch_size < 1) throw DatasetError("batch size must be >= 1");
  if (data.size() == 0) throw DatasetError("dataset is empty");
}

Index BatchStream::batches_per_epoch() const { return (data_->size() + batch_size_ - 1) / batch_size_; }

std::vector<Index> BatchStream::order(long long epoch_index) const {
  std::vector<Index> idx(static_cast<size_t>(data_->size()));
  std::iota(idx.begin(), idx.end(), 0);
  if (shuffle_) {
    Rng rng = stream(seed_, 1000 + static_cast<std::uint64_t>(epoch_index));
    std::shuffle(idx.begin(), idx.end(), rng);
  }
  return idx;
}

Batch BatchStream::batch(long long epoch_index, Index batch_index) const {
  const auto idx = order(epoch_index);
  const Index lo = batch_index * batch_size_, hi = std::min(data_->size(), lo + batch_size_);
  if (lo >= hi) throw DatasetError("batch index out of range");
  Batch b;
  b.rows.assign(idx.begin() + lo, idx.begin() + hi);
  b.images = data_->images_for(b.rows);
  if (crop_ || flip_) {
    Rng rng = stream(seed_ ^ 0x9e3779b97f4a7c15ULL, static_cast<std::uint64_t>(epoch_index) * 100003ULL +
                                                        static_cast<std::uint64_t>(batch_index));
    b.images = augment(b.images, rng, crop_, flip_);
  }
  b.labels = data_->labels_for(b.rows);
  return b;
}

std::vector<Batch> BatchStream::epoch(long long epoch_index) const {
  std::vector<Batch> out;
  for (Index i = 0; i < batches_per_epoch(); ++i) out.push_back(batch(epoch_index, i));
  return out;
}

}  // namespace purify
