// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <span>

namespace purify {

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Elementwise map with derivative dy/dx expressed from (x, y).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
  Tensor<T> out(a.shape(), a.value().array().unaryExpr(f));
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, dfdx](Node<T>& self) {
    if (!an->requires_grad) return;
    typename Tensor<T>::Storage g =
        self.grad.array() * an->value.array().binaryExpr(self.value.array(), dfdx);
    an->accumulate(g);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape(), a.value().array() + b.value().array());
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) an->accumulate(self.grad.array());
    if (bn->requires_grad) bn->accumulate(self.grad.array());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape(), a.value().array() - b.value().array());
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) an->accumulate(self.grad.array());
    if (bn->requires_grad) bn->accumulate(-self.grad.array());
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape(), a.value().array() * b.value().array());
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) an->accumulate(self.grad.array() * bn->value.array());
    if (bn->requires_grad) bn->accumulate(self.grad.array() * an->value.array());
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape(), a.value().array() * s);
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, s](Node<T>& self) { an->accumulate(self.grad.array() * s); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape(), a.value().array() + s);
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an](Node<T>& self) { an->accumulate(self.grad.array()); });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::abs(x); },
                       [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return detail::unary(a, [slope](T x) { return x > T(0) ? x : slope * x; },
                       [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(a.value().array().sum());
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an](Node<T>& self) {
    an->accumulate(Tensor<T>::Storage::Constant(an->value.size(), self.grad[0]));
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  if (a.value().size() == 0) throw ShapeError("mean of empty tensor");
  const T n = static_cast<T>(a.value().size());
  Tensor<T> out = Tensor<T>::scalar(a.value().array().sum() / n);
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, n](Node<T>& self) {
    an->accumulate(Tensor<T>::Storage::Constant(an->value.size(), self.grad[0] / n));
  });
}

/// mean(|a - b|), the E||.||_1 used throughout the objective.
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  return mean(abs(sub(a, b)));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an](Node<T>& self) { an->accumulate(self.grad.array()); });
}

/// Flattens all but the leading dimension.
template <typename T>
Var<T> flatten(const Var<T>& a) {
  const Index n = a.dim(0);
  return reshape(a, Shape{n, n == 0 ? 0 : a.value().size() / n});
}

template <typename T>
Var<T> concat0(const std::vector<Var<T>>& parts) {
  std::vector<const Tensor<T>*> vals;
  for (const auto& p : parts) vals.push_back(&p.value());
  Tensor<T> out = purify::concat0<T>(vals);
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op<T>(std::move(out), parts, [nodes](Node<T>& self) {
    Index off = 0;
    for (const auto& n : nodes) {
      const Index sz = n->value.size();
      if (n->requires_grad) n->accumulate(self.grad.array().segment(off, sz));
      off += sz;
    }
  });
}

template <typename T>
Var<T> slice0(const Var<T>& a, Index start, Index count) {
  Tensor<T> out = a.value().slice0(start, count);
  const Index off = count == 0 ? 0 : start * (out.size() / count);
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, off](Node<T>& self) {
    typename Tensor<T>::Storage g = Tensor<T>::Storage::Zero(an->value.size());
    g.segment(off, self.grad.size()) = self.grad.array();
    an->accumulate(g);
  });
}

/// y = x W^T + b with x (N, F), W (O, F), b (O).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.value().rank() != 2 || w.value().rank() != 2 || x.dim(1) != w.dim(1) || b.value().size() != w.dim(0))
    throw ShapeError("linear: x " + shape_str(x.shape()) + " W " + shape_str(w.shape()));
  const Index n = x.dim(0), f = x.dim(1), o = w.dim(0);
  Tensor<T> out(Shape{n, o});
  auto X = x.value().matrix(n, f);
  auto W = w.value().matrix(o, f);
  out.matrix(n, o).noalias() = X * W.transpose();
  out.matrix(n, o).rowwise() += b.value().array().matrix().transpose();
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op<T>(std::move(out), {x, w, b}, [xn, wn, bn, n, f, o](Node<T>& self) {
    auto G = self.grad.matrix(n, o);
    if (xn->requires_grad) {
      Tensor<T> gx(Shape{n, f});
      gx.matrix(n, f).noalias() = G * wn->value.matrix(o, f);
      xn->accumulate(gx.array());
    }
    if (wn->requires_grad) {
      Tensor<T> gw(Shape{o, f});
      gw.matrix(o, f).noalias() = G.transpose() * xn->value.matrix(n, f);
      wn->accumulate(gw.array());
    }
    if (bn->requires_grad) bn->accumulate(G.colwise().sum().transpose().array());
  });
}

namespace detail {

struct ConvGeom {
  Index n, cin, h, w, cout, k, stride, pad, ho, wo;
  Index patch() const { return cin * k * k; }
  Index out_px() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox * stride - pad + kx lies inside [0, w).
inline void valid_range(Index w, Index wo, Index stride, Index pad, Index kx, Index& lo, Index& hi) {
  const Index off = kx - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  hi = w - off <= 0 ? 0 : std::min(wo, (w - off - 1) / stride + 1);
  if (hi < lo) hi = lo;
}

// cols is (cin*k*k, n*ho*wo), row-major.
template <typename T>
void im2col(const T* x, const ConvGeom& g, MatrixRM<T>& cols) {
  cols.setZero(g.patch(), g.n * g.out_px());
  const Index ncols = g.n * g.out_px();
  for (Index c = 0; c < g.cin; ++c)
    for (Index ky = 0; ky < g.k; ++ky) {
      Index ylo, yhi;
      valid_range(g.h, g.ho, g.stride, g.pad, ky, ylo, yhi);
      for (Index kx = 0; kx < g.k; ++kx) {
        Index xlo, xhi;
        valid_range(g.w, g.wo, g.stride, g.pad, kx, xlo, xhi);
        T* row = cols.data() + ((c * g.k + ky) * g.k + kx) * ncols;
        for (Index b = 0; b < g.n; ++b) {
          const T* plane = x + (b * g.cin + c) * g.h * g.w;
          T* dst = row + b * g.out_px();
          for (Index oy = ylo; oy < yhi; ++oy) {
            const T* src = plane + (oy * g.stride - g.pad + ky) * g.w + (kx - g.pad);
            T* out = dst + oy * g.wo;
            for (Index ox = xlo; ox < xhi; ++ox) out[ox] = src[ox * g.stride];
          }
        }
      }
    }
}

template <typename T>
void col2im(const MatrixRM<T>& cols, const ConvGeom& g, T* dx) {
  const Index ncols = g.n * g.out_px();
  for (Index c = 0; c < g.cin; ++c)
    for (Index ky = 0; ky < g.k; ++ky) {
      Index ylo, yhi;
      valid_range(g.h, g.ho, g.stride, g.pad, ky, ylo, yhi);
      for (Index kx = 0; kx < g.k; ++kx) {
        Index xlo, xhi;
        valid_range(g.w, g.wo, g.stride, g.pad, kx, xlo, xhi);
        const T* row = cols.data() + ((c * g.k + ky) * g.k + kx) * ncols;
        for (Index b = 0; b < g.n; ++b) {
          T* plane = dx + (b * g.cin + c) * g.h * g.w;
          const T* src = row + b * g.out_px();
          for (Index oy = ylo; oy < yhi; ++oy) {
            T* dst = plane + (oy * g.stride - g.pad + ky) * g.w + (kx - g.pad);
            const T* in = src + oy * g.wo;
            for (Index ox = xlo; ox < xhi; ++ox) dst[ox * g.stride] += in[ox];
          }
        }
      }
    }
}

}  // namespace detail

/// 2-D cross-correlation, NCHW input, weight (Cout, Cin, k, k), bias (Cout).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, Index stride, Index pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || b.value().size() != ws[0])
    throw ShapeError("conv2d: x " + shape_str(xs) + " W " + shape_str(ws));
  detail::ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(xs));

  auto cols = std::make_shared<MatrixRM<T>>();
  detail::im2col(x.value().data(), g, *cols);
  auto W = w.value().matrix(g.cout, g.patch());
  MatrixRM<T> y = W * (*cols);  // (cout, n*ho*wo)
  y.colwise() += b.value().array().matrix();

  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  for (Index bi = 0; bi < g.n; ++bi)
    out.matrix(g.n * g.cout, g.out_px()).middleRows(bi * g.cout, g.cout) = y.middleCols(bi * g.out_px(), g.out_px());

  auto xn = x.node(), wn = w.node(), bn = b.node();
  if (!w.requires_grad() && !b.requires_grad()) cols.reset();
  if (!x.requires_grad() && !w.requires_grad() && !b.requires_grad()) return Var<T>::constant(std::move(out));
  if (!w.requires_grad() && cols) cols.reset();
  return make_op<T>(std::move(out), {x, w, b}, [xn, wn, bn, g, cols](Node<T>& self) {
    MatrixRM<T> gy(g.cout, g.n * g.out_px());
    auto G = self.grad.matrix(g.n * g.cout, g.out_px());
    for (Index bi = 0; bi < g.n; ++bi) gy.middleCols(bi * g.out_px(), g.out_px()) = G.middleRows(bi * g.cout, g.cout);
    if (bn->requires_grad) bn->accumulate(gy.rowwise().sum().array());
    if (wn->requires_grad) {
      Tensor<T> gw(wn->value.shape());
      gw.matrix(g.cout, g.patch()).noalias() = gy * cols->transpose();
      wn->accumulate(gw.array());
    }
    if (xn->requires_grad) {
      MatrixRM<T> gcols = wn->value.matrix(g.cout, g.patch()).transpose() * gy;
      Tensor<T> gx(xn->value.shape());
      detail::col2im(gcols, g, gx.data());
      xn->accumulate(gx.array());
    }
  });
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, Index factor) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("upsample_nearest expects NCHW");
  const Index planes = s[0] * s[1], h = s[2], w = s[3], H = h * factor, W = w * factor;
  Tensor<T> out(Shape{s[0], s[1], H, W});
  const T* src = x.value().data();
  T* dst = out.data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < H; ++y)
      for (Index xx = 0; xx < W; ++xx) dst[(p * H + y) * W + xx] = src[(p * h + y / factor) * w + xx / factor];
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, planes, h, w, H, W, factor](Node<T>& self) {
    typename Tensor<T>::Storage g = Tensor<T>::Storage::Zero(planes * h * w);
    const T* gs = self.grad.data();
    for (Index p = 0; p < planes; ++p)
      for (Index y = 0; y < H; ++y)
        for (Index xx = 0; xx < W; ++xx) g[(p * h + y / factor) * w + xx / factor] += gs[(p * H + y) * W + xx];
    xn->accumulate(g);
  });
}

/// Non-overlapping k x k average pooling; H and W must be divisible by k.
template <typename T>
Var<T> avg_pool(const Var<T>& x, Index k) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[2] % k || s[3] % k) throw ShapeError("avg_pool: bad input " + shape_str(s));
  const Index planes = s[0] * s[1], H = s[2], W = s[3], h = H / k, w = W / k;
  const T inv = T(1) / static_cast<T>(k * k);
  Tensor<T> out(Shape{s[0], s[1], h, w});
  const T* src = x.value().data();
  T* dst = out.data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < H; ++y)
      for (Index xx = 0; xx < W; ++xx) dst[(p * h + y / k) * w + xx / k] += src[(p * H + y) * W + xx] * inv;
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, planes, h, w, H, W, k, inv](Node<T>& self) {
    typename Tensor<T>::Storage g(planes * H * W);
    const T* gs = self.grad.data();
    for (Index p = 0; p < planes; ++p)
      for (Index y = 0; y < H; ++y)
        for (Index xx = 0; xx < W; ++xx) g[(p * H + y) * W + xx] = gs[(p * h + y / k) * w + xx / k] * inv;
    xn->accumulate(g);
  });
}

/// (N, C, H, W) -> (N, C) spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("global_avg_pool expects NCHW");
  const Index planes = s[0] * s[1], px = s[2] * s[3];
  Tensor<T> out(Shape{s[0], s[1]});
  out.matrix(planes, 1) = x.value().matrix(planes, px).rowwise().mean();
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, planes, px](Node<T>& self) {
    Tensor<T> g(xn->value.shape());
    g.matrix(planes, px) = (self.grad.matrix(planes, 1) / static_cast<T>(px)).replicate(1, px);
    xn->accumulate(g.array());
  });
}

/// (N, C, H, W) -> (N*H*W, C): one row per spatial position.
template <typename T>
Var<T> nchw_to_rows(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("nchw_to_rows expects NCHW");
  const Index n = s[0], c = s[1], px = s[2] * s[3];
  Tensor<T> out(Shape{n * px, c});
  for (Index b = 0; b < n; ++b)
    out.matrix(n * px, c).middleRows(b * px, px) = x.value().matrix(n * c, px).middleRows(b * c, c).transpose();
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, n, c, px](Node<T>& self) {
    Tensor<T> g(xn->value.shape());
    for (Index b = 0; b < n; ++b)
      g.matrix(n * c, px).middleRows(b * c, c) = self.grad.matrix(n * px, c).middleRows(b * px, px).transpose();
    xn->accumulate(g.array());
  });
}

/// Row-wise log-softmax of (N, K) logits.
template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  if (x.value().rank() != 2) throw ShapeError("log_softmax expects (N, K)");
  const Index n = x.dim(0), k = x.dim(1);
  Tensor<T> out(x.shape());
  auto X = x.value().matrix(n, k);
  auto Y = out.matrix(n, k);
  for (Index i = 0; i < n; ++i) {
    const T m = X.row(i).maxCoeff();
    const T lse = m + std::log((X.row(i).array() - m).exp().sum());
    Y.row(i) = X.row(i).array() - lse;
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, n, k](Node<T>& self) {
    auto G = self.grad.matrix(n, k);
    auto Y = self.value.matrix(n, k);
    Tensor<T> gx(Shape{n, k});
    auto GX = gx.matrix(n, k);
    for (Index i = 0; i < n; ++i) GX.row(i) = G.row(i).array() - Y.row(i).array().exp() * G.row(i).sum();
    xn->accumulate(gx.array());
  });
}

/// Picks x[i, cols[i]] from an (N, K) tensor, giving (N).
template <typename T>
Var<T> pick(const Var<T>& x, std::span<const int> cols) {
  if (x.value().rank() != 2 || static_cast<Index>(cols.size()) != x.dim(0)) throw ShapeError("pick: bad shapes");
  const Index n = x.dim(0), k = x.dim(1);
  Tensor<T> out(Shape{n});
  std::vector<int> idx(cols.begin(), cols.end());
  for (Index i = 0; i < n; ++i) {
    if (idx[i] < 0 || idx[i] >= k) throw std::out_of_range("pick: column out of range");
    out[i] = x.value()[i * k + idx[i]];
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, idx, k](Node<T>& self) {
    typename Tensor<T>::Storage g = Tensor<T>::Storage::Zero(xn->value.size());
    for (size_t i = 0; i < idx.size(); ++i) g[static_cast<Index>(i) * k + idx[i]] = self.grad[static_cast<Index>(i)];
    xn->accumulate(g);
  });
}

/// Mean cross-entropy over rows whose label differs from `ignore`. Empty selections give 0.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels, int ignore = -1) {
  const Index n = logits.dim(0), k = logits.dim(1);
  std::vector<int> rows, cls;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y == ignore) continue;
    if (y < 0 || y >= k) throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    rows.push_back(static_cast<int>(i));
    cls.push_back(y);
  }
  auto lp = log_softmax(logits);
  if (rows.empty()) return Var<T>::constant(Tensor<T>::scalar(T(0)));
  std::vector<int> flat(static_cast<size_t>(n), 0);
  Tensor<T> mask(Shape{n});
  for (size_t j = 0; j < rows.size(); ++j) {
    flat[static_cast<size_t>(rows[j])] = cls[j];
    mask[rows[j]] = T(1);
  }
  auto picked = mul(pick(lp, std::span<const int>(flat)), Var<T>::constant(std::move(mask)));
  return scale(sum(picked), T(-1) / static_cast<T>(rows.size()));
}

/// Columns [start, start + count) of an (M, L) tensor.
template <typename T>
Var<T> slice_cols(const Var<T>& x, Index start, Index count) {
  if (x.value().rank() != 2 || start < 0 || start + count > x.dim(1)) throw ShapeError("slice_cols: bad range");
  const Index m = x.dim(0), l = x.dim(1);
  Tensor<T> out(Shape{m, count});
  out.matrix(m, count) = x.value().matrix(m, l).middleCols(start, count);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, m, l, start, count](Node<T>& self) {
    Tensor<T> g(Shape{m, l});
    g.matrix(m, l).middleCols(start, count) = self.grad.matrix(m, count);
    xn->accumulate(g.array());
  });
}

/// Rows of x (M, L) at the given indices.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const int> rows) {
  if (x.value().rank() != 2) throw ShapeError("gather_rows expects (M, L)");
  const Index m = x.dim(0), l = x.dim(1), r = static_cast<Index>(rows.size());
  std::vector<int> idx(rows.begin(), rows.end());
  Tensor<T> out(Shape{r, l});
  auto X = x.value().matrix(m, l);
  auto O = out.matrix(r, l);
  for (Index i = 0; i < r; ++i) {
    if (idx[i] < 0 || idx[i] >= m) throw std::out_of_range("gather_rows: row out of range");
    O.row(i) = X.row(idx[i]);
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, idx, m, l](Node<T>& self) {
    Tensor<T> g(Shape{m, l});
    auto G = g.matrix(m, l);
    auto S = self.grad.matrix(static_cast<Index>(idx.size()), l);
    for (size_t i = 0; i < idx.size(); ++i) G.row(idx[i]) += S.row(static_cast<Index>(i));
    xn->accumulate(g.array());
  });
}

/// (M, L) -> (1, L) column means.
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
  if (x.value().rank() != 2 || x.dim(0) == 0) throw ShapeError("mean_rows expects non-empty (M, L)");
  const Index m = x.dim(0), l = x.dim(1);
  Tensor<T> out(Shape{1, l});
  out.matrix(1, l) = x.value().matrix(m, l).colwise().mean();
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, m, l](Node<T>& self) {
    Tensor<T> g(Shape{m, l});
    g.matrix(m, l) = (self.grad.matrix(1, l) / static_cast<T>(m)).replicate(m, 1);
    xn->accumulate(g.array());
  });
}

/// (1, L) -> (n, L).
template <typename T>
Var<T> repeat_rows(const Var<T>& x, Index n) {
  if (x.value().rank() != 2 || x.dim(0) != 1) throw ShapeError("repeat_rows expects (1, L)");
  const Index l = x.dim(1);
  Tensor<T> out(Shape{n, l});
  out.matrix(n, l) = x.value().matrix(1, l).replicate(n, 1);
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, n, l](Node<T>& self) {
    xn->accumulate(self.grad.matrix(n, l).colwise().sum().transpose().array());
  });
}

/// Scales each row of (M, L) to unit L2 norm (norm floored at eps).
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  if (x.value().rank() != 2) throw ShapeError("l2_normalize_rows expects (M, L)");
  const Index m = x.dim(0), l = x.dim(1);
  Eigen::Array<T, Eigen::Dynamic, 1> norms = x.value().matrix(m, l).rowwise().norm().array().max(eps);
  Tensor<T> out(Shape{m, l});
  out.matrix(m, l) = x.value().matrix(m, l).array().colwise() / norms;
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, m, l, norms, eps](Node<T>& self) {
    auto G = self.grad.matrix(m, l);
    auto Y = self.value.matrix(m, l);
    Tensor<T> gx(Shape{m, l});
    auto GX = gx.matrix(m, l);
    for (Index i = 0; i < m; ++i) {
      if (norms[i] <= eps) {
        GX.row(i) = G.row(i) / eps;
      } else {
        GX.row(i) = (G.row(i) - Y.row(i) * G.row(i).dot(Y.row(i))) / norms[i];
      }
    }
    xn->accumulate(gx.array());
  });
}

}  // namespace purify
