#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>

#include "chadet/tensor.hpp"

namespace chadet {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatX<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatX<T>>;

namespace detail {

// Per-axis broadcast: extents must be equal or 1 on the smaller operand.
inline Shape4 broadcast_shape(const Shape4& a, const Shape4& b) {
  Shape4 out;
  for (int i = 0; i < 4; ++i) {
    int ai = a[i], bi = b[i];
    require(ai == bi || ai == 1 || bi == 1,
            "broadcast mismatch on axis " + std::to_string(i) + ": " +
                a.str() + " vs " + b.str());
    out[i] = std::max(ai, bi);
  }
  return out;
}

template <typename T>
inline void accumulate_broadcast_grad(Tensor<T>& input, const Tensor<T>& out,
                                      const std::vector<T>& contrib) {
  // contrib is laid out in `out` shape; reduce over axes where input has
  // extent 1.
  input.ensure_grad();
  T* g = input.grad();
  const Shape4& is = input.shape();
  const Shape4& os = out.shape();
  if (is == os) {
    for (std::int64_t i = 0; i < out.numel(); ++i) g[i] += contrib[i];
    return;
  }
  size_t oi = 0;
  for (int b = 0; b < os[0]; ++b)
    for (int c = 0; c < os[1]; ++c)
      for (int y = 0; y < os[2]; ++y)
        for (int x = 0; x < os[3]; ++x, ++oi) {
          g[input.idx(is[0] == 1 ? 0 : b, is[1] == 1 ? 0 : c,
                      is[2] == 1 ? 0 : y, is[3] == 1 ? 0 : x)] += contrib[oi];
        }
}

template <typename T>
inline T broadcast_read(const Tensor<T>& t, int b, int c, int y, int x) {
  const Shape4& s = t.shape();
  return t.at(s[0] == 1 ? 0 : b, s[1] == 1 ? 0 : c, s[2] == 1 ? 0 : y,
              s[3] == 1 ? 0 : x);
}

}  // namespace detail

enum class BinaryKind { add, sub, mul, div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  Shape4 os = detail::broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(os);
  T* o = out.data();
  const bool same = a.shape() == b.shape();
  auto apply = [kind](T x, T y) -> T {
    switch (kind) {
      case BinaryKind::add: return x + y;
      case BinaryKind::sub: return x - y;
      case BinaryKind::mul: return x * y;
      case BinaryKind::div: return x / y;
    }
    return T(0);
  };
  if (same) {
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = apply(pa[i], pb[i]);
  } else {
    size_t i = 0;
    for (int bb = 0; bb < os[0]; ++bb)
      for (int c = 0; c < os[1]; ++c)
        for (int y = 0; y < os[2]; ++y)
          for (int x = 0; x < os[3]; ++x, ++i)
            o[i] = apply(detail::broadcast_read(a, bb, c, y, x),
                         detail::broadcast_read(b, bb, c, y, x));
  }

  if (recording(a, b)) {
    out.requires_grad = true;
    Tensor<T> ca = a, cb = b, co = out;
    Tape<T>::active()->record([ca, cb, co, kind]() mutable {
      if (!co.has_grad()) return;
      const std::vector<T>& g = co.grad_vec();
      std::int64_t n = co.numel();
      const Shape4& os = co.shape();
      if (ca.requires_grad) {
        std::vector<T> contrib(static_cast<size_t>(n));
        size_t i = 0;
        for (int bb = 0; bb < os[0]; ++bb)
          for (int c = 0; c < os[1]; ++c)
            for (int y = 0; y < os[2]; ++y)
              for (int x = 0; x < os[3]; ++x, ++i) {
                switch (kind) {
                  case BinaryKind::add:
                  case BinaryKind::sub:
                    contrib[i] = g[i];
                    break;
                  case BinaryKind::mul:
                    contrib[i] = g[i] * detail::broadcast_read(cb, bb, c, y, x);
                    break;
                  case BinaryKind::div:
                    contrib[i] = g[i] / detail::broadcast_read(cb, bb, c, y, x);
                    break;
                }
              }
        detail::accumulate_broadcast_grad(ca, co, contrib);
      }
      if (cb.requires_grad) {
        std::vector<T> contrib(static_cast<size_t>(n));
        size_t i = 0;
        for (int bb = 0; bb < os[0]; ++bb)
          for (int c = 0; c < os[1]; ++c)
            for (int y = 0; y < os[2]; ++y)
              for (int x = 0; x < os[3]; ++x, ++i) {
                T bv, av;
                switch (kind) {
                  case BinaryKind::add:
                    contrib[i] = g[i];
                    break;
                  case BinaryKind::sub:
                    contrib[i] = -g[i];
                    break;
                  case BinaryKind::mul:
                    contrib[i] = g[i] * detail::broadcast_read(ca, bb, c, y, x);
                    break;
                  case BinaryKind::div:
                    av = detail::broadcast_read(ca, bb, c, y, x);
                    bv = detail::broadcast_read(cb, bb, c, y, x);
                    contrib[i] = -g[i] * av / (bv * bv);
                    break;
                }
              }
        detail::accumulate_broadcast_grad(cb, co, contrib);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::mul);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::div);
}

enum class UnaryKind {
  sigmoid,
  relu,
  leaky_relu,  // negative slope 0.1
  abs,
  exp,
  neg,
  log
};

template <typename T>
Tensor<T> unary(const Tensor<T>& a, UnaryKind kind) {
  Tensor<T> out(a.shape());
  const T* p = a.data();
  T* o = out.data();
  std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    T x = p[i];
    switch (kind) {
      case UnaryKind::sigmoid: o[i] = T(1) / (T(1) + std::exp(-x)); break;
      case UnaryKind::relu: o[i] = x > T(0) ? x : T(0); break;
      case UnaryKind::leaky_relu: o[i] = x > T(0) ? x : T(0.1) * x; break;
      case UnaryKind::abs: o[i] = std::abs(x); break;
      case UnaryKind::exp: o[i] = std::exp(x); break;
      case UnaryKind::neg: o[i] = -x; break;
      case UnaryKind::log: o[i] = std::log(x); break;
    }
  }
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, kind]() mutable {
      if (!co.has_grad()) return;
      const std::vector<T>& g = co.grad_vec();
      ca.ensure_grad();
      T* ga = ca.grad();
      const T* p = ca.data();
      const T* y = co.data();
      std::int64_t n = ca.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        T d = T(0);
        switch (kind) {
          case UnaryKind::sigmoid: d = y[i] * (T(1) - y[i]); break;
          case UnaryKind::relu: d = p[i] > T(0) ? T(1) : T(0); break;
          case UnaryKind::leaky_relu: d = p[i] > T(0) ? T(1) : T(0.1); break;
          case UnaryKind::abs: d = p[i] > T(0) ? T(1) : (p[i] < T(0) ? T(-1) : T(0)); break;
          case UnaryKind::exp: d = y[i]; break;
          case UnaryKind::neg: d = T(-1); break;
          case UnaryKind::log: d = T(1) / p[i]; break;
        }
        ga[i] += g[i] * d;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) { return unary(a, UnaryKind::sigmoid); }
template <typename T>
Tensor<T> relu(const Tensor<T>& a) { return unary(a, UnaryKind::relu); }
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a) { return unary(a, UnaryKind::leaky_relu); }
template <typename T>
Tensor<T> abs(const Tensor<T>& a) { return unary(a, UnaryKind::abs); }
template <typename T>
Tensor<T> exp(const Tensor<T>& a) { return unary(a, UnaryKind::exp); }
template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return unary(a, UnaryKind::neg); }

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + s;
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      for (std::int64_t i = 0; i < ca.numel(); ++i)
        ca.grad()[i] += co.grad_vec()[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, s]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      for (std::int64_t i = 0; i < ca.numel(); ++i)
        ca.grad()[i] += co.grad_vec()[i] * s;
    });
  }
  return out;
}

enum class ReduceKind { sum, mean };

// Reduce over the given axes; reduced extents become 1.
template <typename T>
Tensor<T> reduce(const Tensor<T>& a, ReduceKind kind,
                 const std::vector<int>& axes) {
  std::array<bool, 4> red{false, false, false, false};
  for (int ax : axes) {
    require(ax >= 0 && ax < 4, "reduce axis out of range");
    require(a.shape()[ax] > 0, "empty reduction over axis " + std::to_string(ax));
    red[static_cast<size_t>(ax)] = true;
  }
  Shape4 os = a.shape();
  std::int64_t count = 1;
  for (int i = 0; i < 4; ++i)
    if (red[static_cast<size_t>(i)]) {
      count *= os[i];
      os[i] = 1;
    }
  Tensor<T> out(os);
  const Shape4& is = a.shape();
  for (int b = 0; b < is[0]; ++b)
    for (int c = 0; c < is[1]; ++c)
      for (int y = 0; y < is[2]; ++y)
        for (int x = 0; x < is[3]; ++x)
          out.at(red[0] ? 0 : b, red[1] ? 0 : c, red[2] ? 0 : y,
                 red[3] ? 0 : x) += a.at(b, c, y, x);
  T scale = kind == ReduceKind::mean ? T(1) / static_cast<T>(count) : T(1);
  if (kind == ReduceKind::mean)
    for (std::int64_t i = 0; i < out.numel(); ++i) out.data()[i] *= scale;

  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, red, scale]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      T* g = ca.grad();
      const Shape4& is = ca.shape();
      for (int b = 0; b < is[0]; ++b)
        for (int c = 0; c < is[1]; ++c)
          for (int y = 0; y < is[2]; ++y)
            for (int x = 0; x < is[3]; ++x)
              g[ca.idx(b, c, y, x)] +=
                  scale * co.grad_vec()[co.idx(red[0] ? 0 : b, red[1] ? 0 : c,
                                               red[2] ? 0 : y, red[3] ? 0 : x)];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  return reduce(a, ReduceKind::sum, {0, 1, 2, 3});
}
template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return reduce(a, ReduceKind::mean, {0, 1, 2, 3});
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& a) {
  return reduce(a, ReduceKind::mean, {2, 3});
}

// Non-overlapping k x k average pooling (stride k).
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& a, int k) {
  const Shape4& s = a.shape();
  require(s[2] % k == 0 && s[3] % k == 0,
          "avg_pool2d: spatial extents " + s.str() +
              " not divisible by kernel " + std::to_string(k));
  Shape4 os{s[0], s[1], s[2] / k, s[3] / k};
  Tensor<T> out(os);
  T inv = T(1) / static_cast<T>(k * k);
  for (int b = 0; b < s[0]; ++b)
    for (int c = 0; c < s[1]; ++c)
      for (int oy = 0; oy < os[2]; ++oy)
        for (int ox = 0; ox < os[3]; ++ox) {
          T acc = T(0);
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              acc += a.at(b, c, oy * k + dy, ox * k + dx);
          out.at(b, c, oy, ox) = acc * inv;
        }
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, k, inv]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      const Shape4& os = co.shape();
      for (int b = 0; b < os[0]; ++b)
        for (int c = 0; c < os[1]; ++c)
          for (int oy = 0; oy < os[2]; ++oy)
            for (int ox = 0; ox < os[3]; ++ox) {
              T g = co.grad_vec()[co.idx(b, c, oy, ox)] * inv;
              for (int dy = 0; dy < k; ++dy)
                for (int dx = 0; dx < k; ++dx)
                  ca.grad()[ca.idx(b, c, oy * k + dy, ox * k + dx)] += g;
            }
    });
  }
  return out;
}

namespace detail {

// im2col for a single batch element: cols is (in_c*kh*kw) x (oh*ow).
template <typename T>
void im2col(const Tensor<T>& x, int b, int kh, int kw, int stride, int pad,
            int oh, int ow, MatX<T>& cols) {
  const Shape4& s = x.shape();
  cols.setZero(s[1] * kh * kw, oh * ow);
  for (int c = 0; c < s[1]; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        int row = (c * kh + ky) * kw + kx;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= s[2]) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= s[3]) continue;
            cols(row, oy * ow + ox) = x.at(b, c, iy, ix);
          }
        }
      }
}

// Adjoint of im2col: scatter cols back into the (grad of the) image.
template <typename T>
void col2im_accum(const MatX<T>& cols, int kh, int kw, int stride, int pad,
                  int oh, int ow, int channels, int ih, int iw, T* img) {
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        int row = (c * kh + ky) * kw + kx;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= ih) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= iw) continue;
            img[(static_cast<size_t>(c) * ih + iy) * iw + ix] +=
                cols(row, oy * ow + ox);
          }
        }
      }
}

}  // namespace detail

// Dense 2D convolution; weight is (out_c, in_c, kh, kw).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int pad) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  require(xs[1] == ws[1], "conv2d: input channel axis " +
                              std::to_string(xs[1]) + " != weight in_c " +
                              std::to_string(ws[1]));
  require(bias.numel() == ws[0], "conv2d: bias length != out_c");
  require(stride >= 1, "conv2d: stride must be positive");
  require(xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[3],
          "conv2d: padded input smaller than kernel");
  int oh = (xs[2] + 2 * pad - ws[2]) / stride + 1;
  int ow = (xs[3] + 2 * pad - ws[3]) / stride + 1;
  Tensor<T> out(Shape4{xs[0], ws[0], oh, ow});

  CMapM<T> wmat(w.data(), ws[0], ws[1] * ws[2] * ws[3]);
  MatX<T> cols;
  for (int b = 0; b < xs[0]; ++b) {
    detail::im2col(x, b, ws[2], ws[3], stride, pad, oh, ow, cols);
    MapM<T> y(out.data() + out.idx(b, 0, 0, 0), ws[0], oh * ow);
    y.noalias() = wmat * cols;
    for (int oc = 0; oc < ws[0]; ++oc)
      y.row(oc).array() += bias.data()[oc];
  }

  if (Tape<T>::active() &&
      (x.requires_grad || w.requires_grad || bias.requires_grad)) {
    out.requires_grad = true;
    Tensor<T> cx = x, cw = w, cb = bias, co = out;
    int s = stride, p = pad;
    Tape<T>::active()->record([cx, cw, cb, co, s, p]() mutable {
      if (!co.has_grad()) return;
      const Shape4& xs = cx.shape();
      const Shape4& ws = cw.shape();
      const Shape4& os = co.shape();
      int oh = os[2], ow = os[3];
      CMapM<T> wmat(cw.data(), ws[0], ws[1] * ws[2] * ws[3]);
      MatX<T> cols;
      for (int b = 0; b < xs[0]; ++b) {
        CMapM<T> gy(co.grad_vec().data() + co.idx(b, 0, 0, 0), ws[0], oh * ow);
        if (cw.requires_grad || cx.requires_grad)
          detail::im2col(cx, b, ws[2], ws[3], s, p, oh, ow, cols);
        if (cw.requires_grad) {
          cw.ensure_grad();
          MapM<T> gw(cw.grad(), ws[0], ws[1] * ws[2] * ws[3]);
          gw.noalias() += gy * cols.transpose();
        }
        if (cx.requires_grad) {
          cx.ensure_grad();
          MatX<T> gcols = wmat.transpose() * gy;
          detail::col2im_accum(gcols, ws[2], ws[3], s, p, oh, ow, xs[1], xs[2],
                               xs[3], cx.grad() + cx.idx(b, 0, 0, 0));
        }
        if (cb.requires_grad) {
          cb.ensure_grad();
          for (int oc = 0; oc < ws[0]; ++oc)
            cb.grad()[oc] += gy.row(oc).sum();
        }
      }
    });
  }
  return out;
}

// Per-channel convolution; weight is (c, 1, kh, kw).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& bias, int stride, int pad) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  require(ws[0] == xs[1] && ws[1] == 1,
          "depthwise_conv2d: weight channel count " + std::to_string(ws[0]) +
              " != input channels " + std::to_string(xs[1]));
  require(bias.numel() == xs[1], "depthwise_conv2d: bias length != channels");
  int kh = ws[2], kw = ws[3];
  int oh = (xs[2] + 2 * pad - kh) / stride + 1;
  int ow = (xs[3] + 2 * pad - kw) / stride + 1;
  Tensor<T> out(Shape4{xs[0], xs[1], oh, ow});
  for (int b = 0; b < xs[0]; ++b)
    for (int c = 0; c < xs[1]; ++c)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T acc = bias.data()[c];
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= xs[2]) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= xs[3]) continue;
              acc += x.at(b, c, iy, ix) * w.at(c, 0, ky, kx);
            }
          }
          out.at(b, c, oy, ox) = acc;
        }
  if (Tape<T>::active() &&
      (x.requires_grad || w.requires_grad || bias.requires_grad)) {
    out.requires_grad = true;
    Tensor<T> cx = x, cw = w, cb = bias, co = out;
    int s = stride, p = pad;
    Tape<T>::active()->record([cx, cw, cb, co, s, p]() mutable {
      if (!co.has_grad()) return;
      const Shape4& xs = cx.shape();
      const Shape4& ws = cw.shape();
      const Shape4& os = co.shape();
      if (cx.requires_grad) cx.ensure_grad();
      if (cw.requires_grad) cw.ensure_grad();
      if (cb.requires_grad) cb.ensure_grad();
      for (int b = 0; b < xs[0]; ++b)
        for (int c = 0; c < xs[1]; ++c)
          for (int oy = 0; oy < os[2]; ++oy)
            for (int ox = 0; ox < os[3]; ++ox) {
              T g = co.grad_vec()[co.idx(b, c, oy, ox)];
              if (cb.requires_grad) cb.grad()[c] += g;
              for (int ky = 0; ky < ws[2]; ++ky) {
                int iy = oy * s - p + ky;
                if (iy < 0 || iy >= xs[2]) continue;
                for (int kx = 0; kx < ws[3]; ++kx) {
                  int ix = ox * s - p + kx;
                  if (ix < 0 || ix >= xs[3]) continue;
                  if (cx.requires_grad)
                    cx.grad()[cx.idx(b, c, iy, ix)] += g * cw.at(c, 0, ky, kx);
                  if (cw.requires_grad)
                    cw.grad()[cw.idx(c, 0, ky, kx)] += g * cx.at(b, c, iy, ix);
                }
              }
            }
    });
  }
  return out;
}

// Transposed convolution; weight is (in_c, out_c, kh, kw). Forward is the
// adjoint of conv2d with the same stride/pad, so with stride 2, kernel 3,
// pad 1, output_padding 1 the spatial extents exactly double.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& bias, int stride, int pad,
                            int output_padding = 0) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  require(stride >= 1, "transposed_conv2d: stride must be >= 1");
  require(xs[1] == ws[0], "transposed_conv2d: input channels " +
                              std::to_string(xs[1]) + " != weight in_c " +
                              std::to_string(ws[0]));
  require(output_padding < stride,
          "transposed_conv2d: output_padding must be < stride");
  int out_c = ws[1], kh = ws[2], kw = ws[3];
  require(bias.numel() == out_c, "transposed_conv2d: bias length != out_c");
  int oh = (xs[2] - 1) * stride - 2 * pad + kh + output_padding;
  int ow = (xs[3] - 1) * stride - 2 * pad + kw + output_padding;
  require(oh > 0 && ow > 0, "transposed_conv2d: invalid stride/padding combination");
  Tensor<T> out(Shape4{xs[0], out_c, oh, ow});

  // weight viewed as (in_c) x (out_c*kh*kw)
  CMapM<T> wmat(w.data(), ws[0], out_c * kh * kw);
  for (int b = 0; b < xs[0]; ++b) {
    CMapM<T> xmat(x.data() + x.idx(b, 0, 0, 0), xs[1], xs[2] * xs[3]);
    MatX<T> cols = wmat.transpose() * xmat;  // (out_c*kh*kw) x (ih*iw)
    detail::col2im_accum(cols, kh, kw, stride, pad, xs[2], xs[3], out_c, oh,
                         ow, out.data() + out.idx(b, 0, 0, 0));
    MapM<T> y(out.data() + out.idx(b, 0, 0, 0), out_c, oh * ow);
    for (int oc = 0; oc < out_c; ++oc)
      y.row(oc).array() += bias.data()[oc];
  }

  if (Tape<T>::active() &&
      (x.requires_grad || w.requires_grad || bias.requires_grad)) {
    out.requires_grad = true;
    Tensor<T> cx = x, cw = w, cb = bias, co = out;
    int s = stride, p = pad;
    Tape<T>::active()->record([cx, cw, cb, co, s, p]() mutable {
      if (!co.has_grad()) return;
      const Shape4& xs = cx.shape();
      const Shape4& ws = cw.shape();
      const Shape4& os = co.shape();
      int out_c = ws[1], kh = ws[2], kw = ws[3];
      CMapM<T> wmat(cw.data(), ws[0], out_c * kh * kw);
      Tensor<T> gout(os);
      std::copy(co.grad_vec().begin(), co.grad_vec().end(), gout.data());
      MatX<T> gcols;
      for (int b = 0; b < xs[0]; ++b) {
        // grad wrt x is a plain conv of the output grad with the weight
        detail::im2col(gout, b, kh, kw, s, p, xs[2], xs[3], gcols);
        if (cx.requires_grad) {
          cx.ensure_grad();
          MapM<T> gx(cx.grad() + cx.idx(b, 0, 0, 0), xs[1], xs[2] * xs[3]);
          gx.noalias() += wmat * gcols;
        }
        if (cw.requires_grad) {
          cw.ensure_grad();
          CMapM<T> xmat(cx.data() + cx.idx(b, 0, 0, 0), xs[1],
                        xs[2] * xs[3]);
          MapM<T> gw(cw.grad(), ws[0], out_c * kh * kw);
          gw.noalias() += xmat * gcols.transpose();
        }
        if (cb.requires_grad) {
          cb.ensure_grad();
          CMapM<T> gy(co.grad_vec().data() + co.idx(b, 0, 0, 0), out_c,
                      os[2] * os[3]);
          for (int oc = 0; oc < out_c; ++oc)
            cb.grad()[oc] += gy.row(oc).sum();
        }
      }
    });
  }
  return out;
}

// Batched matrix product over the last two axes; leading extents must be
// equal or 1 (broadcast).
template <typename T>
Tensor<T> matmul_batched(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4& as = a.shape();
  const Shape4& bs = b.shape();
  require(as[3] == bs[2], "matmul_batched: inner dimensions " +
                              std::to_string(as[3]) + " and " +
                              std::to_string(bs[2]) + " do not agree");
  for (int i = 0; i < 2; ++i)
    require(as[i] == bs[i] || as[i] == 1 || bs[i] == 1,
            "matmul_batched: leading extents not broadcastable");
  Shape4 os{std::max(as[0], bs[0]), std::max(as[1], bs[1]), as[2], bs[3]};
  Tensor<T> out(os);
  int m = as[2], k = as[3], n = bs[3];
  for (int i = 0; i < os[0]; ++i)
    for (int j = 0; j < os[1]; ++j) {
      CMapM<T> ma(a.data() + a.idx(as[0] == 1 ? 0 : i, as[1] == 1 ? 0 : j, 0, 0),
                  m, k);
      CMapM<T> mb(b.data() + b.idx(bs[0] == 1 ? 0 : i, bs[1] == 1 ? 0 : j, 0, 0),
                  k, n);
      MapM<T> mo(out.data() + out.idx(i, j, 0, 0), m, n);
      mo.noalias() = ma * mb;
    }
  if (recording(a, b)) {
    out.requires_grad = true;
    Tensor<T> ca = a, cb = b, co = out;
    Tape<T>::active()->record([ca, cb, co]() mutable {
      if (!co.has_grad()) return;
      const Shape4& as = ca.shape();
      const Shape4& bs = cb.shape();
      const Shape4& os = co.shape();
      int m = as[2], k = as[3], n = bs[3];
      if (ca.requires_grad) ca.ensure_grad();
      if (cb.requires_grad) cb.ensure_grad();
      for (int i = 0; i < os[0]; ++i)
        for (int j = 0; j < os[1]; ++j) {
          CMapM<T> gy(co.grad_vec().data() + co.idx(i, j, 0, 0), m, n);
          if (ca.requires_grad) {
            CMapM<T> mb(cb.data() + cb.idx(bs[0] == 1 ? 0 : i,
                                           bs[1] == 1 ? 0 : j, 0, 0), k, n);
            MapM<T> ga(ca.grad() + ca.idx(as[0] == 1 ? 0 : i,
                                          as[1] == 1 ? 0 : j, 0, 0), m, k);
            ga.noalias() += gy * mb.transpose();
          }
          if (cb.requires_grad) {
            CMapM<T> ma(ca.data() + ca.idx(as[0] == 1 ? 0 : i,
                                           as[1] == 1 ? 0 : j, 0, 0), m, k);
            MapM<T> gb(cb.grad() + cb.idx(bs[0] == 1 ? 0 : i,
                                          bs[1] == 1 ? 0 : j, 0, 0), k, n);
            gb.noalias() += ma.transpose() * gy;
          }
        }
    });
  }
  return out;
}

// Swap the last two axes.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  const Shape4& s = a.shape();
  Tensor<T> out(Shape4{s[0], s[1], s[3], s[2]});
  for (int b = 0; b < s[0]; ++b)
    for (int c = 0; c < s[1]; ++c)
      for (int y = 0; y < s[2]; ++y)
        for (int x = 0; x < s[3]; ++x)
          out.at(b, c, x, y) = a.at(b, c, y, x);
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      const Shape4& s = ca.shape();
      for (int b = 0; b < s[0]; ++b)
        for (int c = 0; c < s[1]; ++c)
          for (int y = 0; y < s[2]; ++y)
            for (int x = 0; x < s[3]; ++x)
              ca.grad()[ca.idx(b, c, y, x)] += co.grad_vec()[co.idx(b, c, x, y)];
    });
  }
  return out;
}

// Numerically stable softmax along one axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  require(axis >= 0 && axis < 4, "softmax: axis out of range");
  const Shape4& s = a.shape();
  Tensor<T> out(s);
  int extent = s[axis];
  // iterate over all positions with the softmax axis fixed at 0
  Shape4 iter = s;
  iter[axis] = 1;
  std::array<int, 4> pos{};
  for (pos[0] = 0; pos[0] < iter[0]; ++pos[0])
    for (pos[1] = 0; pos[1] < iter[1]; ++pos[1])
      for (pos[2] = 0; pos[2] < iter[2]; ++pos[2])
        for (pos[3] = 0; pos[3] < iter[3]; ++pos[3]) {
          auto at = [&](int i) {
            std::array<int, 4> q = pos;
            q[static_cast<size_t>(axis)] = i;
            return a.idx(q[0], q[1], q[2], q[3]);
          };
          T mx = a.data()[at(0)];
          for (int i = 1; i < extent; ++i) mx = std::max(mx, a.data()[at(i)]);
          T denom = T(0);
          for (int i = 0; i < extent; ++i) {
            T e = std::exp(a.data()[at(i)] - mx);
            out.data()[at(i)] = e;
            denom += e;
          }
          for (int i = 0; i < extent; ++i) out.data()[at(i)] /= denom;
        }
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, axis]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      const Shape4& s = ca.shape();
      int extent = s[axis];
      Shape4 iter = s;
      iter[axis] = 1;
      std::array<int, 4> pos{};
      for (pos[0] = 0; pos[0] < iter[0]; ++pos[0])
        for (pos[1] = 0; pos[1] < iter[1]; ++pos[1])
          for (pos[2] = 0; pos[2] < iter[2]; ++pos[2])
            for (pos[3] = 0; pos[3] < iter[3]; ++pos[3]) {
              auto at = [&](int i) {
                std::array<int, 4> q = pos;
                q[static_cast<size_t>(axis)] = i;
                return ca.idx(q[0], q[1], q[2], q[3]);
              };
              T dot = T(0);
              for (int i = 0; i < extent; ++i)
                dot += co.grad_vec()[at(i)] * co.data()[at(i)];
              for (int i = 0; i < extent; ++i)
                ca.grad()[at(i)] +=
                    co.data()[at(i)] * (co.grad_vec()[at(i)] - dot);
            }
    });
  }
  return out;
}

// Channel slice [start, start+len).
template <typename T>
Tensor<T> narrow_channels(const Tensor<T>& a, int start, int len) {
  const Shape4& s = a.shape();
  require(start >= 0 && len > 0 && start + len <= s[1],
          "narrow_channels: slice out of range");
  Tensor<T> out(Shape4{s[0], len, s[2], s[3]});
  for (int b = 0; b < s[0]; ++b)
    for (int c = 0; c < len; ++c)
      for (int y = 0; y < s[2]; ++y)
        for (int x = 0; x < s[3]; ++x)
          out.at(b, c, y, x) = a.at(b, start + c, y, x);
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, start]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      const Shape4& os = co.shape();
      for (int b = 0; b < os[0]; ++b)
        for (int c = 0; c < os[1]; ++c)
          for (int y = 0; y < os[2]; ++y)
            for (int x = 0; x < os[3]; ++x)
              ca.grad()[ca.idx(b, start + c, y, x)] +=
                  co.grad_vec()[co.idx(b, c, y, x)];
    });
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& a, int n) {
  const Shape4& s = a.shape();
  require(n > 0 && s[1] % n == 0,
          "split_channels: channel count " + std::to_string(s[1]) +
              " not divisible by " + std::to_string(n));
  int step = s[1] / n;
  std::vector<Tensor<T>> parts;
  parts.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    parts.push_back(narrow_channels(a, i * step, step));
  return parts;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_channels: empty input list");
  const Shape4& s0 = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape4& s = p.shape();
    require(s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3],
            "concat_channels: non-channel extent mismatch: " + s.str() +
                " vs " + s0.str());
    total += s[1];
  }
  Tensor<T> out(Shape4{s0[0], total, s0[2], s0[3]});
  int off = 0;
  for (const auto& p : parts) {
    const Shape4& s = p.shape();
    for (int b = 0; b < s[0]; ++b)
      for (int c = 0; c < s[1]; ++c)
        for (int y = 0; y < s[2]; ++y)
          for (int x = 0; x < s[3]; ++x)
            out.at(b, off + c, y, x) = p.at(b, c, y, x);
    off += s[1];
  }
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad;
  if (Tape<T>::active() && needs) {
    out.requires_grad = true;
    std::vector<Tensor<T>> cp = parts;
    Tensor<T> co = out;
    Tape<T>::active()->record([cp, co]() mutable {
      if (!co.has_grad()) return;
      int off = 0;
      for (auto& p : cp) {
        const Shape4& s = p.shape();
        if (p.requires_grad) {
          p.ensure_grad();
          for (int b = 0; b < s[0]; ++b)
            for (int c = 0; c < s[1]; ++c)
              for (int y = 0; y < s[2]; ++y)
                for (int x = 0; x < s[3]; ++x)
                  p.grad()[p.idx(b, c, y, x)] +=
                      co.grad_vec()[co.idx(b, off + c, y, x)];
        }
        off += s[1];
      }
    });
  }
  return out;
}

// Spatial crop: rows [y0, y0+h), cols [x0, x0+w).
template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& a, int y0, int h, int x0, int w) {
  const Shape4& s = a.shape();
  require(y0 >= 0 && x0 >= 0 && y0 + h <= s[2] && x0 + w <= s[3] && h > 0 && w > 0,
          "crop_spatial: window out of range");
  Tensor<T> out(Shape4{s[0], s[1], h, w});
  for (int b = 0; b < s[0]; ++b)
    for (int c = 0; c < s[1]; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out.at(b, c, y, x) = a.at(b, c, y0 + y, x0 + x);
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, y0, x0]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      const Shape4& os = co.shape();
      for (int b = 0; b < os[0]; ++b)
        for (int c = 0; c < os[1]; ++c)
          for (int y = 0; y < os[2]; ++y)
            for (int x = 0; x < os[3]; ++x)
              ca.grad()[ca.idx(b, c, y0 + y, x0 + x)] +=
                  co.grad_vec()[co.idx(b, c, y, x)];
    });
  }
  return out;
}

// Partition (b, c, h, w) into non-overlapping ws x ws windows of flattened
// tokens: output (b * (h/ws) * (w/ws), 1, ws*ws, c).
template <typename T>
Tensor<T> window_partition(const Tensor<T>& a, int ws) {
  const Shape4& s = a.shape();
  require(s[2] % ws == 0 && s[3] % ws == 0,
          "window_partition: window side " + std::to_string(ws) +
              " does not divide spatial extents " + s.str());
  int ny = s[2] / ws, nx = s[3] / ws;
  Tensor<T> out(Shape4{s[0] * ny * nx, 1, ws * ws, s[1]});
  for (int b = 0; b < s[0]; ++b)
    for (int wy = 0; wy < ny; ++wy)
      for (int wx = 0; wx < nx; ++wx) {
        int win = (b * ny + wy) * nx + wx;
        for (int ty = 0; ty < ws; ++ty)
          for (int tx = 0; tx < ws; ++tx)
            for (int c = 0; c < s[1]; ++c)
              out.at(win, 0, ty * ws + tx, c) =
                  a.at(b, c, wy * ws + ty, wx * ws + tx);
      }
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, ws]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      const Shape4& s = ca.shape();
      int ny = s[2] / ws, nx = s[3] / ws;
      for (int b = 0; b < s[0]; ++b)
        for (int wy = 0; wy < ny; ++wy)
          for (int wx = 0; wx < nx; ++wx) {
            int win = (b * ny + wy) * nx + wx;
            for (int ty = 0; ty < ws; ++ty)
              for (int tx = 0; tx < ws; ++tx)
                for (int c = 0; c < s[1]; ++c)
                  ca.grad()[ca.idx(b, c, wy * ws + ty, wx * ws + tx)] +=
                      co.grad_vec()[co.idx(win, 0, ty * ws + tx, c)];
          }
    });
  }
  return out;
}

// Inverse of window_partition; (b*ny*nx, 1, ws*ws, c) -> (b, c, h, w).
template <typename T>
Tensor<T> window_unpartition(const Tensor<T>& a, int ws, int batch, int h,
                             int w) {
  const Shape4& s = a.shape();
  int ny = h / ws, nx = w / ws;
  require(h % ws == 0 && w % ws == 0 && s[0] == batch * ny * nx &&
              s[2] == ws * ws,
          "window_unpartition: shape " + s.str() + " inconsistent with target");
  int c = s[3];
  Tensor<T> out(Shape4{batch, c, h, w});
  for (int b = 0; b < batch; ++b)
    for (int wy = 0; wy < ny; ++wy)
      for (int wx = 0; wx < nx; ++wx) {
        int win = (b * ny + wy) * nx + wx;
        for (int ty = 0; ty < ws; ++ty)
          for (int tx = 0; tx < ws; ++tx)
            for (int ch = 0; ch < c; ++ch)
              out.at(b, ch, wy * ws + ty, wx * ws + tx) =
                  a.at(win, 0, ty * ws + tx, ch);
      }
  if (recording(a)) {
    out.requires_grad = true;
    Tensor<T> ca = a, co = out;
    Tape<T>::active()->record([ca, co, ws, batch, h, w]() mutable {
      if (!co.has_grad()) return;
      ca.ensure_grad();
      int ny = h / ws, nx = w / ws;
      int c = ca.shape()[3];
      for (int b = 0; b < batch; ++b)
        for (int wy = 0; wy < ny; ++wy)
          for (int wx = 0; wx < nx; ++wx) {
            int win = (b * ny + wy) * nx + wx;
            for (int ty = 0; ty < ws; ++ty)
              for (int tx = 0; tx < ws; ++tx)
                for (int ch = 0; ch < c; ++ch)
                  ca.grad()[ca.idx(win, 0, ty * ws + tx, ch)] +=
                      co.grad_vec()[co.idx(b, ch, wy * ws + ty, wx * ws + tx)];
          }
    });
  }
  return out;
}

// Bilinear sampling of `input` at continuous pixel coordinates given by
// `grid` (b, 2, gh, gw): channel 0 holds x, channel 1 holds y. Locations
// whose 4-neighborhood leaves the image produce 0 and a 0 mask entry.
// The mask carries no gradient.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> bilinear_sample(const Tensor<T>& input,
                                                const Tensor<T>& grid) {
  const Shape4& is = input.shape();
  const Shape4& gs = grid.shape();
  require(gs[1] == 2 && gs[0] == is[0],
          "bilinear_sample: grid must be (b, 2, gh, gw) with matching batch");
  Tensor<T> out(Shape4{is[0], is[1], gs[2], gs[3]});
  Tensor<T> mask(Shape4{is[0], 1, gs[2], gs[3]});
  for (int b = 0; b < is[0]; ++b)
    for (int y = 0; y < gs[2]; ++y)
      for (int x = 0; x < gs[3]; ++x) {
        T gx = grid.at(b, 0, y, x);
        T gy = grid.at(b, 1, y, x);
        // coordinates exactly on the far edge stay valid: the sampling
        // cell is clamped so x0+1/y0+1 remain inside the image
        int x0 = std::min(static_cast<int>(std::floor(gx)), is[3] - 2);
        int y0 = std::min(static_cast<int>(std::floor(gy)), is[2] - 2);
        bool ok = std::isfinite(gx) && std::isfinite(gy) && is[3] >= 2 &&
                  is[2] >= 2 && gx >= T(0) && gy >= T(0) &&
                  gx <= static_cast<T>(is[3] - 1) &&
                  gy <= static_cast<T>(is[2] - 1);
        mask.at(b, 0, y, x) = ok ? T(1) : T(0);
        if (!ok) continue;
        T fx = gx - static_cast<T>(x0);
        T fy = gy - static_cast<T>(y0);
        for (int c = 0; c < is[1]; ++c) {
          T v00 = input.at(b, c, y0, x0);
          T v01 = input.at(b, c, y0, x0 + 1);
          T v10 = input.at(b, c, y0 + 1, x0);
          T v11 = input.at(b, c, y0 + 1, x0 + 1);
          out.at(b, c, y, x) = v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy) +
                               v10 * (1 - fx) * fy + v11 * fx * fy;
        }
      }
  if (recording(input, grid)) {
    out.requires_grad = true;
    Tensor<T> ci = input, cg = grid, co = out, cm = mask;
    Tape<T>::active()->record([ci, cg, co, cm]() mutable {
      if (!co.has_grad()) return;
      const Shape4& is = ci.shape();
      const Shape4& gs = cg.shape();
      if (ci.requires_grad) ci.ensure_grad();
      if (cg.requires_grad) cg.ensure_grad();
      for (int b = 0; b < is[0]; ++b)
        for (int y = 0; y < gs[2]; ++y)
          for (int x = 0; x < gs[3]; ++x) {
            if (cm.at(b, 0, y, x) == T(0)) continue;
            T gx = cg.at(b, 0, y, x);
            T gy = cg.at(b, 1, y, x);
            int x0 = std::min(static_cast<int>(std::floor(gx)), is[3] - 2);
            int y0 = std::min(static_cast<int>(std::floor(gy)), is[2] - 2);
            T fx = gx - static_cast<T>(x0);
            T fy = gy - static_cast<T>(y0);
            T dx_acc = T(0), dy_acc = T(0);
            for (int c = 0; c < is[1]; ++c) {
              T g = co.grad_vec()[co.idx(b, c, y, x)];
              T v00 = ci.at(b, c, y0, x0);
              T v01 = ci.at(b, c, y0, x0 + 1);
              T v10 = ci.at(b, c, y0 + 1, x0);
              T v11 = ci.at(b, c, y0 + 1, x0 + 1);
              if (ci.requires_grad) {
                ci.grad()[ci.idx(b, c, y0, x0)] += g * (1 - fx) * (1 - fy);
                ci.grad()[ci.idx(b, c, y0, x0 + 1)] += g * fx * (1 - fy);
                ci.grad()[ci.idx(b, c, y0 + 1, x0)] += g * (1 - fx) * fy;
                ci.grad()[ci.idx(b, c, y0 + 1, x0 + 1)] += g * fx * fy;
              }
              dx_acc += g * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy);
              dy_acc += g * ((v10 - v00) * (1 - fx) + (v11 - v01) * fx);
            }
            if (cg.requires_grad) {
              cg.grad()[cg.idx(b, 0, y, x)] += dx_acc;
              cg.grad()[cg.idx(b, 1, y, x)] += dy_acc;
            }
          }
    });
  }
  return {out, mask};
}

// Seed the scalar loss gradient with 1 and replay the active tape.
template <typename T>
void backward(Tensor<T>& loss) {
  require(loss.numel() == 1,
          "backward: loss must be scalar, got " + loss.shape().str());
  Tape<T>* tape = Tape<T>::active();
  require(tape != nullptr, "backward: no active tape");
  require(loss.requires_grad, "backward: loss does not require grad");
  loss.ensure_grad();
  loss.grad()[0] += T(1);
  tape->run_backward();
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// Compares analytic gradients against central finite differences for every
// element of every input that requires grad.
template <typename T, typename F>
GradCheckReport grad_check(F f, std::vector<Tensor<T>>& inputs, T h, double tol) {
  std::vector<std::vector<T>> analytic(inputs.size());
  {
    TapeScope<T> scope;
    Tensor<T> loss = f(inputs);
    backward(loss);
    for (size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i].requires_grad) continue;
      inputs[i].ensure_grad();
      analytic[i].assign(inputs[i].grad(),
                         inputs[i].grad() + inputs[i].numel());
      inputs[i].zero_grad();
    }
  }
  GradCheckReport rep;
  rep.tol = tol;
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad) continue;
    for (std::int64_t j = 0; j < inputs[i].numel(); ++j) {
      T saved = inputs[i].data()[j];
      inputs[i].data()[j] = saved + h;
      T fp = f(inputs).item();
      inputs[i].data()[j] = saved - h;
      T fm = f(inputs).item();
      inputs[i].data()[j] = saved;
      double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                       (2.0 * static_cast<double>(h));
      double a = static_cast<double>(analytic[i][static_cast<size_t>(j)]);
      double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      rep.max_rel_error =
          std::max(rep.max_rel_error, std::abs(a - numeric) / denom);
    }
  }
  rep.pass = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace chadet
