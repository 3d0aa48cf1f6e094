// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace purify {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor. Image batches are NCHW, feature batches are (N, L).
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using Storage = Eigen::Array<T, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(Storage::Constant(numel(shape_), fill)) {}
  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](Index i) { return data_[i]; }
  T operator[](Index i) const { return data_[i]; }

  T& at(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  T at(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  /// Row-major matrix view; rows * cols must equal size().
  Eigen::Map<MatrixRM<T>> matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return Eigen::Map<MatrixRM<T>>(data_.data(), rows, cols);
  }
  Eigen::Map<const MatrixRM<T>> matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return Eigen::Map<const MatrixRM<T>>(data_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, data_.template cast<U>());
  }

  /// Rows [start, start + count) along the leading dimension.
  Tensor slice0(Index start, Index count) const {
    const Index inner = shape_.empty() || shape_[0] == 0 ? 0 : size() / shape_[0];
    if (start < 0 || count < 0 || start + count > shape_.at(0)) throw ShapeError("slice0 out of range");
    Shape s = shape_;
    s[0] = count;
    return Tensor(std::move(s), data_.segment(start * inner, count * inner));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows * cols != size())
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) + " on " + shape_str(shape_));
  }

  Shape shape_;
  Storage data_;
};

template <typename T>
Tensor<T> concat0(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat0 of nothing");
  Shape s = parts.front()->shape();
  Index total = 0, lead = 0;
  for (const auto* p : parts) {
    Shape tail_a(p->shape().begin() + 1, p->shape().end());
    Shape tail_b(s.begin() + 1, s.end());
    if (tail_a != tail_b) throw ShapeError("concat0 shape mismatch " + shape_str(p->shape()) + " vs " + shape_str(s));
    total += p->size();
    lead += p->dim(0);
  }
  typename Tensor<T>::Storage data(total);
  Index off = 0;
  for (const auto* p : parts) {
    data.segment(off, p->size()) = p->array();
    off += p->size();
  }
  s[0] = lead;
  return Tensor<T>(std::move(s), std::move(data));
}

template <typename T>
Tensor<T> concat0(const Tensor<T>& a, const Tensor<T>& b) {
  return concat0<T>({&a, &b});
}

/// FNV-1a over the raw bytes; used for parameter and dataset fingerprints.
inline std::uint64_t fnv1a(const void* bytes, size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
std::uint64_t fingerprint(const Tensor<T>& t, std::uint64_t h = 1469598103934665603ULL) {
  return fnv1a(t.data(), static_cast<size_t>(t.size()) * sizeof(T), h);
}

}  // namespace purify
