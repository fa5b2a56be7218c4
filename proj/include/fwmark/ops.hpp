/* Copyright 2026 The fwmark Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fwmark/errors.hpp"
#include "fwmark/tensor.hpp"

// Differentiable operations. Every op computes its forward value eagerly
// and, when a tape is recording and some input requires grad, pushes a
// backward rule that accumulates into the inputs' gradient buffers.

namespace fwmark {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
  const auto M = Eigen::Index(m), N = Eigen::Index(n), K = Eigen::Index(k);
  MutMap<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
}

// c[m,n] += a[k,m]^T * b[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
  const auto M = Eigen::Index(m), N = Eigen::Index(n), K = Eigen::Index(k);
  MutMap<T>(c, M, N).noalias() +=
      ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c) {
  const auto M = Eigen::Index(m), N = Eigen::Index(n), K = Eigen::Index(k);
  MutMap<T>(c, M, N).noalias() +=
      ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
}

struct ConvGeometry {
  std::size_t channels, height, width;  // image side
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;             // column side
};

// cols[(c*kh + i)*kw + j, oy*out_w + ox] = img[c, oy*s - p + i, ox*s - p + j]
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) -
                         static_cast<long>(g.padding);
          T* dst = row + oy * g.out_w;
          if (y < 0 || y >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(y)) *
                                   g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) -
                           static_cast<long>(g.padding);
            dst[ox] = (x < 0 || x >= static_cast<long>(g.width))
                          ? T(0)
                          : src[static_cast<std::size_t>(x)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: img += scatter(cols).
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) -
                         static_cast<long>(g.padding);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) -
                           static_cast<long>(g.padding);
            if (x >= 0 && x < static_cast<long>(g.width))
              dst[static_cast<std::size_t>(x)] += src[ox];
          }
        }
      }
    }
  }
}

// Number of times b repeats inside a: b's shape must equal a's shape or a
// suffix of it (broadcast over leading batch dimensions).
template <typename T>
std::size_t broadcast_repeats(const BasicTensor<T>& a, const BasicTensor<T>& b,
                              const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool suffix =
      sb.size() <= sa.size() &&
      std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size()));
  if (!suffix) {
    throw DimensionError(std::string(op) + ": cannot broadcast " +
                         shape_str(sb) + " onto " + shape_str(sa));
  }
  return a.numel() / b.numel();
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

template <typename T>
void accumulate(BasicTensor<T> t, std::span<const T> delta) {
  if (!t.requires_grad()) return;
  std::span<T> g = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t reps = detail::broadcast_repeats(a, b, "add");
  BasicTensor<T> out(a.shape());
  const std::size_t nb = b.numel();
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < nb; ++i) o[r * nb + i] = av[r * nb + i] + bv[i];
  if (BasicTape<T>::should_record({&a, &b})) {
    BasicTape<T>::active()->push({a, b}, out, [a, b, out, reps, nb]() mutable {
      auto g = out.grad();
      detail::accumulate(a, g);
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < nb; ++i) gb[i] += g[r * nb + i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t reps = detail::broadcast_repeats(a, b, "sub");
  BasicTensor<T> out(a.shape());
  const std::size_t nb = b.numel();
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < nb; ++i) o[r * nb + i] = av[r * nb + i] - bv[i];
  if (BasicTape<T>::should_record({&a, &b})) {
    BasicTape<T>::active()->push({a, b}, out, [a, b, out, reps, nb]() mutable {
      auto g = out.grad();
      detail::accumulate(a, g);
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < nb; ++i) gb[i] -= g[r * nb + i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t reps = detail::broadcast_repeats(a, b, "mul");
  BasicTensor<T> out(a.shape());
  const std::size_t nb = b.numel();
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < nb; ++i) o[r * nb + i] = av[r * nb + i] * bv[i];
  if (BasicTape<T>::should_record({&a, &b})) {
    BasicTape<T>::active()->push({a, b}, out, [a, b, out, reps, nb]() mutable {
      auto g = out.grad();
      auto av = a.data();
      auto bv = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < nb; ++i)
            ga[r * nb + i] += g[r * nb + i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < nb; ++i)
            gb[i] += g[r * nb + i] * av[r * nb + i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = s * av[i];
  if (BasicTape<T>::should_record({&a})) {
    BasicTape<T>::active()->push({a}, out, [a, out, s]() mutable {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] > T(0) ? av[i] : T(0);
  if (BasicTape<T>::should_record({&a})) {
    BasicTape<T>::active()->push({a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto av = a.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (av[i] > T(0)) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(av[i]);
  if (BasicTape<T>::should_record({&a})) {
    BasicTape<T>::active()->push({a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += g[i] * (T(1) - y[i] * y[i]);
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  BasicTensor<T> out = BasicTensor<T>::scalar(acc);
  if (BasicTape<T>::should_record({&a})) {
    BasicTape<T>::active()->push({a}, out, [a, out]() mutable {
      const T g = out.grad()[0];
      for (T& ga : a.grad_buffer()) ga += g;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  const T n = static_cast<T>(a.numel());
  BasicTensor<T> out = BasicTensor<T>::scalar(acc / n);
  if (BasicTape<T>::should_record({&a})) {
    BasicTape<T>::active()->push({a}, out, [a, out, n]() mutable {
      const T g = out.grad()[0] / n;
      for (T& ga : a.grad_buffer()) ga += g;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  BasicTensor<T> out(std::move(shape),
                     std::vector<T>(a.data().begin(), a.data().end()));
  if (BasicTape<T>::should_record({&a})) {
    BasicTape<T>::active()->push({a}, out, [a, out]() mutable {
      detail::accumulate(a, out.grad());
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> out(Shape{m, n});
  detail::gemm_nn(m, n, k, a.ptr(), b.ptr(), out.ptr());
  if (BasicTape<T>::should_record({&a, &b})) {
    BasicTape<T>::active()->push({a, b}, out, [a, b, out, m, n, k]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad())
        detail::gemm_nt(m, k, n, g, b.ptr(), a.grad_buffer().data());
      if (b.requires_grad())
        detail::gemm_tn(k, n, m, a.ptr(), g, b.grad_buffer().data());
    });
  }
  return out;
}

// y[N,out] = x[N,in] * w[in,out] + bias[out]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) ||
      bias.rank() != 1 || bias.dim(0) != w.dim(1)) {
    throw DimensionError("linear: incompatible shapes x" +
                         shape_str(x.shape()) + " w" + shape_str(w.shape()) +
                         " b" + shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  BasicTensor<T> out(Shape{n, out_dim});
  T* o = out.ptr();
  for (std::size_t r = 0; r < n; ++r)
    std::copy(bias.ptr(), bias.ptr() + out_dim, o + r * out_dim);
  detail::gemm_nn(n, out_dim, in, x.ptr(), w.ptr(), o);
  if (BasicTape<T>::should_record({&x, &w, &bias})) {
    BasicTape<T>::active()->push(
        {x, w, bias}, out, [x, w, bias, out, n, in, out_dim]() mutable {
          const T* g = out.grad().data();
          if (x.requires_grad())
            detail::gemm_nt(n, in, out_dim, g, w.ptr(), x.grad_buffer().data());
          if (w.requires_grad())
            detail::gemm_tn(in, out_dim, n, x.ptr(), g, w.grad_buffer().data());
          if (bias.requires_grad()) {
            auto gb = bias.grad_buffer();
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t j = 0; j < out_dim; ++j)
                gb[j] += g[r * out_dim + j];
          }
        });
  }
  return out;
}

// Cross-correlation. x[N,C,H,W], w[F,C,kh,kw], optional bias[F].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& bias, std::size_t stride,
                      std::size_t padding) {
  detail::require_rank(x, 4, "conv2d input");
  detail::require_rank(w, 4, "conv2d weight");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) +
                         " does not match weight " + shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != f)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) +
                         " does not match " + std::to_string(f) + " filters");
  }
  if (kh > h + 2 * padding || kw > wd + 2 * padding) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  if ((h + 2 * padding - kh) % stride != 0 ||
      (wd + 2 * padding - kw) % stride != 0) {
    throw ShapeError("conv2d: non-integral output size for input " +
                     shape_str(x.shape()) + " with stride " +
                     std::to_string(stride));
  }
  detail::ConvGeometry g{c,  h,      wd,
                         kh, kw,     stride,
                         padding, (h + 2 * padding - kh) / stride + 1,
                         (wd + 2 * padding - kw) / stride + 1};
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t ckk = c * kh * kw;
  BasicTensor<T> out(Shape{n, f, g.out_h, g.out_w});
  std::vector<T> cols(ckk * plane);
  for (std::size_t s = 0; s < n; ++s) {
    T* o = out.ptr() + s * f * plane;
    if (bias.defined())
      for (std::size_t fi = 0; fi < f; ++fi)
        std::fill(o + fi * plane, o + (fi + 1) * plane, bias.data()[fi]);
    detail::im2col(x.ptr() + s * c * h * wd, g, cols.data());
    detail::gemm_nn(f, plane, ckk, w.ptr(), cols.data(), o);
  }
  if (BasicTape<T>::should_record({&x, &w, &bias})) {
    BasicTape<T>::active()->push(
        {x, w, bias}, out, [x, w, bias, out, g, n, f, plane, ckk]() mutable {
          std::vector<T> cols(ckk * plane);
          std::vector<T> dcols(ckk * plane);
          const T* gout = out.grad().data();
          const std::size_t in_size = g.channels * g.height * g.width;
          for (std::size_t s = 0; s < n; ++s) {
            const T* go = gout + s * f * plane;
            if (w.requires_grad()) {
              detail::im2col(x.ptr() + s * in_size, g, cols.data());
              detail::gemm_nt(f, ckk, plane, go, cols.data(),
                              w.grad_buffer().data());
            }
            if (x.requires_grad()) {
              std::fill(dcols.begin(), dcols.end(), T(0));
              detail::gemm_tn(ckk, plane, f, w.ptr(), go, dcols.data());
              detail::col2im(dcols.data(), g,
                             x.grad_buffer().data() + s * in_size);
            }
            if (bias.defined() && bias.requires_grad()) {
              auto gb = bias.grad_buffer();
              for (std::size_t fi = 0; fi < f; ++fi)
                for (std::size_t p = 0; p < plane; ++p)
                  gb[fi] += go[fi * plane + p];
            }
          }
        });
  }
  return out;
}

// Transposed convolution (adjoint of conv2d w.r.t. its input).
// x[N,C,H,W], w[C,F,kh,kw], optional bias[F];
// output [N,F,(H-1)*stride - 2*padding + kh, likewise W].
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x,
                                const BasicTensor<T>& w,
                                const BasicTensor<T>& bias, std::size_t stride,
                                std::size_t padding) {
  detail::require_rank(x, 4, "conv_transpose2d input");
  detail::require_rank(w, 4, "conv_transpose2d weight");
  if (stride == 0) throw ShapeError("conv_transpose2d: stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t f = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != c) {
    throw DimensionError("conv_transpose2d: input " + shape_str(x.shape()) +
                         " does not match weight " + shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != f)) {
    throw DimensionError("conv_transpose2d: bias " + shape_str(bias.shape()) +
                         " does not match " + std::to_string(f) + " filters");
  }
  if ((h - 1) * stride + kh <= 2 * padding ||
      (wd - 1) * stride + kw <= 2 * padding) {
    throw ShapeError("conv_transpose2d: padding consumes the whole output");
  }
  const std::size_t oh = (h - 1) * stride + kh - 2 * padding;
  const std::size_t ow = (wd - 1) * stride + kw - 2 * padding;
  // Image side is the output; column side is the input grid.
  detail::ConvGeometry g{f, oh, ow, kh, kw, stride, padding, h, wd};
  const std::size_t plane = h * wd;
  const std::size_t fkk = f * kh * kw;
  const std::size_t out_size = f * oh * ow;
  BasicTensor<T> out(Shape{n, f, oh, ow});
  std::vector<T> cols(fkk * plane);
  for (std::size_t s = 0; s < n; ++s) {
    T* o = out.ptr() + s * out_size;
    if (bias.defined())
      for (std::size_t fi = 0; fi < f; ++fi)
        std::fill(o + fi * oh * ow, o + (fi + 1) * oh * ow, bias.data()[fi]);
    std::fill(cols.begin(), cols.end(), T(0));
    detail::gemm_tn(fkk, plane, c, w.ptr(), x.ptr() + s * c * plane,
                    cols.data());
    detail::col2im(cols.data(), g, o);
  }
  if (BasicTape<T>::should_record({&x, &w, &bias})) {
    BasicTape<T>::active()->push(
        {x, w, bias}, out,
        [x, w, bias, out, g, n, c, f, plane, fkk, out_size]() mutable {
          std::vector<T> dcols(fkk * plane);
          const T* gout = out.grad().data();
          for (std::size_t s = 0; s < n; ++s) {
            const T* go = gout + s * out_size;
            detail::im2col(go, g, dcols.data());
            if (x.requires_grad())
              detail::gemm_nn(c, plane, fkk, w.ptr(), dcols.data(),
                              x.grad_buffer().data() + s * c * plane);
            if (w.requires_grad())
              detail::gemm_nt(c, fkk, plane, x.ptr() + s * c * plane,
                              dcols.data(), w.grad_buffer().data());
            if (bias.defined() && bias.requires_grad()) {
              auto gb = bias.grad_buffer();
              const std::size_t op = g.height * g.width;
              for (std::size_t fi = 0; fi < f; ++fi)
                for (std::size_t p = 0; p < op; ++p) gb[fi] += go[fi * op + p];
            }
          }
        });
  }
  return out;
}

// Max pooling over non-overlapping (or strided) windows; ties resolve to the
// first element in scan order.
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel,
                          std::size_t stride) {
  detail::require_rank(x, 4, "max_pool2d");
  if (kernel == 0 || stride == 0) throw ShapeError("max_pool2d: zero window");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (kernel > h || kernel > wd) {
    throw ShapeError("max_pool2d: window larger than input " +
                     shape_str(x.shape()));
  }
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (wd - kernel) / stride + 1;
  BasicTensor<T> out(Shape{n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const T* in = x.ptr();
  T* o = out.ptr();
  std::size_t k = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * wd;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++k) {
        std::size_t best = base + oy * stride * wd + ox * stride;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx =
                base + (oy * stride + i) * wd + ox * stride + j;
            if (in[idx] > in[best]) best = idx;
          }
        o[k] = in[best];
        (*argmax)[k] = best;
      }
    }
  }
  if (BasicTape<T>::should_record({&x})) {
    BasicTape<T>::active()->push({x}, out, [x, out, argmax]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

namespace detail {

template <typename T>
void check_finite(const BasicTensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input value");
    }
  }
}

}  // namespace detail

// Row-wise softmax with max subtraction.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  detail::require_rank(logits, 2, "softmax");
  detail::check_finite(logits, "softmax");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw DimensionError("softmax: need at least 2 classes");
  BasicTensor<T> out(logits.shape());
  const T* in = logits.ptr();
  T* o = out.ptr();
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = in + r * k;
    T* orow = o + r * k;
    const T mx = *std::max_element(row, row + k);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < k; ++j) orow[j] /= z;
  }
  if (BasicTape<T>::should_record({&logits})) {
    BasicTape<T>::active()->push({logits}, out, [logits, out, n, k]() mutable {
      const T* g = out.grad().data();
      const T* p = out.ptr();
      T* gx = logits.grad_buffer().data();
      for (std::size_t r = 0; r < n; ++r) {
        T dot = T(0);
        for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * p[r * k + j];
        for (std::size_t j = 0; j < k; ++j)
          gx[r * k + j] += p[r * k + j] * (g[r * k + j] - dot);
      }
    });
  }
  return out;
}

namespace detail {

template <typename T>
void check_labels(std::span<const int> labels, std::size_t n, std::size_t k,
                  const char* op) {
  if (labels.size() != n) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw IndexError(std::string(op) + ": label " + std::to_string(y) +
                       " outside [0," + std::to_string(k) + ")");
    }
  }
}

}  // namespace detail

inline constexpr double kProbFloor = 1e-12;

// Mean over rows of -ln(max(p[label], 1e-12)).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& probs,
                             std::span<const int> labels) {
  detail::require_rank(probs, 2, "cross_entropy");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  detail::check_labels<T>(labels, n, k, "cross_entropy");
  const T floor = static_cast<T>(kProbFloor);
  T acc = T(0);
  for (std::size_t r = 0; r < n; ++r)
    acc -= std::log(std::max(probs.data()[r * k + labels[r]], floor));
  BasicTensor<T> out = BasicTensor<T>::scalar(acc / static_cast<T>(n));
  if (BasicTape<T>::should_record({&probs})) {
    std::vector<int> ys(labels.begin(), labels.end());
    BasicTape<T>::active()->push(
        {probs}, out, [probs, out, ys, n, k, floor]() mutable {
          const T g = out.grad()[0] / static_cast<T>(n);
          auto gp = probs.grad_buffer();
          for (std::size_t r = 0; r < n; ++r) {
            const T p = probs.data()[r * k + ys[r]];
            if (p > floor) gp[r * k + ys[r]] -= g / p;
          }
        });
  }
  return out;
}

// Mean over rows of -log_softmax(logits)[label]; same value as
// cross_entropy(softmax(logits)) wherever the probability floor is inactive,
// with gradients that stay informative for confidently wrong rows.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  detail::check_finite(logits, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  detail::check_labels<T>(labels, n, k, "softmax_cross_entropy");
  auto probs = std::make_shared<std::vector<T>>(n * k);
  T acc = T(0);
  const T* in = logits.ptr();
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = in + r * k;
    const T mx = *std::max_element(row, row + k);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[r * k + j] = std::exp(row[j] - mx);
      z += (*probs)[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] /= z;
    acc += std::log(z) - (row[labels[r]] - mx);
  }
  BasicTensor<T> out = BasicTensor<T>::scalar(acc / static_cast<T>(n));
  if (BasicTape<T>::should_record({&logits})) {
    std::vector<int> ys(labels.begin(), labels.end());
    BasicTape<T>::active()->push(
        {logits}, out, [logits, out, probs, ys, n, k]() mutable {
          const T g = out.grad()[0] / static_cast<T>(n);
          auto gx = logits.grad_buffer();
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < k; ++j) {
              T d = (*probs)[r * k + j];
              if (static_cast<int>(j) == ys[r]) d -= T(1);
              gx[r * k + j] += g * d;
            }
          }
        });
  }
  return out;
}

// Population variance of each row: x[N,k] -> [N].
template <typename T>
BasicTensor<T> variance_last_axis(const BasicTensor<T>& x) {
  detail::require_rank(x, 2, "variance_last_axis");
  const std::size_t n = x.dim(0), k = x.dim(1);
  BasicTensor<T> out(Shape{n});
  auto means = std::make_shared<std::vector<T>>(n);
  const T* in = x.ptr();
  for (std::size_t r = 0; r < n; ++r) {
    T mu = T(0);
    for (std::size_t j = 0; j < k; ++j) mu += in[r * k + j];
    mu /= static_cast<T>(k);
    T v = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      const T d = in[r * k + j] - mu;
      v += d * d;
    }
    (*means)[r] = mu;
    out.data()[r] = v / static_cast<T>(k);
  }
  if (BasicTape<T>::should_record({&x})) {
    BasicTape<T>::active()->push({x}, out, [x, out, means, n, k]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      const T* in = x.ptr();
      for (std::size_t r = 0; r < n; ++r) {
        const T c = T(2) * g[r] / static_cast<T>(k);
        for (std::size_t j = 0; j < k; ++j)
          gx[r * k + j] += c * (in[r * k + j] - (*means)[r]);
      }
    });
  }
  return out;
}

// Index of the largest entry of each row; ties go to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const BasicTensor<T>& x) {
  detail::require_rank(x, 2, "argmax_rows");
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.ptr() + r * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace fwmark
