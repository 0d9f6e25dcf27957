#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "opgfpad/errors.hpp"

// Dense row-major tensors plus the handful of heavy kernels (GEMM, im2col
// convolution, pooling) everything else composes from. Templated on the
// scalar so gradient checks can run the same code in float64.

namespace opgfpad::netcore {

inline int& compute_threads() {
  static int n = 1;
  return n;
}

// Thread budget for batch-parallel kernels. Section-level workers set this to
// 1 to avoid oversubscription.
inline void set_compute_threads(int n) { compute_threads() = n < 1 ? 1 : n; }

template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)), data(numel_of(shape)) {}
  Tensor(std::vector<std::int64_t> s, T fill) : shape(std::move(s)), data(numel_of(shape), fill) {}
  Tensor(std::vector<std::int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != static_cast<std::size_t>(numel_of(shape)))
      throw ShapeError("tensor data length does not match shape");
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  Tensor reshaped(std::vector<std::int64_t> s) const {
    if (numel_of(s) != numel()) throw ShapeError("reshape changes element count");
    return Tensor(std::move(s), data);
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C(M,N) = A(M,K) * B(K,N), optionally transposing either input.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
          bool trans_a = false, bool trans_b = false) {
  MatMap<T> C(c, m, n);
  if (!trans_a && !trans_b)
    C.noalias() = ConstMatMap<T>(a, m, k) * ConstMatMap<T>(b, k, n);
  else if (trans_a && !trans_b)
    C.noalias() = ConstMatMap<T>(a, k, m).transpose() * ConstMatMap<T>(b, k, n);
  else if (!trans_a && trans_b)
    C.noalias() = ConstMatMap<T>(a, m, k) * ConstMatMap<T>(b, n, k).transpose();
  else
    C.noalias() = ConstMatMap<T>(a, k, m).transpose() * ConstMatMap<T>(b, n, k).transpose();
}

// ---------------------------------------------------------------------------
// Convolution. Tensors are NCHW; weights are {OC, IC, KH, KW}.

struct ConvGeom {
  std::int64_t in_c = 0, in_h = 0, in_w = 0;
  std::int64_t out_c = 0, k_h = 0, k_w = 0;
  int stride = 1, pad = 0;
  std::int64_t out_h = 0, out_w = 0;
};

inline ConvGeom conv_geom(std::int64_t in_c, std::int64_t in_h, std::int64_t in_w,
                          std::int64_t out_c, std::int64_t k_h, std::int64_t k_w, int stride,
                          int pad) {
  ConvGeom g{in_c, in_h, in_w, out_c, k_h, k_w, stride, pad, 0, 0};
  g.out_h = (in_h + 2 * pad - k_h) / stride + 1;
  g.out_w = (in_w + 2 * pad - k_w) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0)
    throw ShapeError("convolution output would be empty (input " + std::to_string(in_h) + "x" +
                     std::to_string(in_w) + ", kernel " + std::to_string(k_h) + ")");
  return g;
}

// col is {IC*KH*KW, OH*OW} row-major for one sample.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::int64_t ohw = g.out_h * g.out_w;
  for (std::int64_t ic = 0; ic < g.in_c; ++ic) {
    const T* xc = x + ic * g.in_h * g.in_w;
    for (std::int64_t kh = 0; kh < g.k_h; ++kh) {
      for (std::int64_t kw = 0; kw < g.k_w; ++kw) {
        T* row = col + ((ic * g.k_h + kh) * g.k_w + kw) * ohw;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          std::int64_t ih = oh * g.stride - g.pad + kh;
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.in_h) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = xc + ih * g.in_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            std::int64_t iw = ow * g.stride - g.pad + kw;
            dst[ow] = (iw >= 0 && iw < g.in_w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col for one sample; x must be zeroed by caller.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const std::int64_t ohw = g.out_h * g.out_w;
  for (std::int64_t ic = 0; ic < g.in_c; ++ic) {
    T* xc = x + ic * g.in_h * g.in_w;
    for (std::int64_t kh = 0; kh < g.k_h; ++kh) {
      for (std::int64_t kw = 0; kw < g.k_w; ++kw) {
        const T* row = col + ((ic * g.k_h + kh) * g.k_w + kw) * ohw;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          std::int64_t ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          T* dst = xc + ih * g.in_w;
          const T* src = row + oh * g.out_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            std::int64_t iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.in_w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
ConvGeom conv_check(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects 4-d input and weights");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d channel mismatch: input " + x.shape_str() + ", weights " +
                     w.shape_str());
  return conv_geom(x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, pad);
}

template <typename T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  ConvGeom g = conv_check(x, w, stride, pad);
  const std::int64_t n = x.dim(0), ckk = g.in_c * g.k_h * g.k_w, ohw = g.out_h * g.out_w;
  Tensor<T> y({n, g.out_c, g.out_h, g.out_w});
#pragma omp parallel num_threads(compute_threads()) if (compute_threads() > 1 && n > 1)
  {
    std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      im2col(x.data.data() + i * g.in_c * g.in_h * g.in_w, g, col.data());
      gemm(w.data.data(), col.data(), y.data.data() + i * g.out_c * ohw, g.out_c, ckk, ohw);
    }
  }
  return y;
}

// Gradient w.r.t. the convolution input; also the forward map of a
// transposed-convolution layer.
template <typename T>
Tensor<T> conv2d_dx(const Tensor<T>& dy, const Tensor<T>& w, std::int64_t in_h, std::int64_t in_w,
                    int stride, int pad) {
  if (dy.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d_dx expects 4-d tensors");
  ConvGeom g = conv_geom(w.dim(1), in_h, in_w, w.dim(0), w.dim(2), w.dim(3), stride, pad);
  if (dy.dim(1) != g.out_c || dy.dim(2) != g.out_h || dy.dim(3) != g.out_w)
    throw ShapeError("conv2d_dx: output-grad shape " + dy.shape_str() + " does not match geometry");
  const std::int64_t n = dy.dim(0), ckk = g.in_c * g.k_h * g.k_w, ohw = g.out_h * g.out_w;
  Tensor<T> dx({n, g.in_c, in_h, in_w});
#pragma omp parallel num_threads(compute_threads()) if (compute_threads() > 1 && n > 1)
  {
    std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      gemm(w.data.data(), dy.data.data() + i * g.out_c * ohw, col.data(), ckk, g.out_c, ohw,
           /*trans_a=*/true);
      col2im(col.data(), g, dx.data.data() + i * g.in_c * in_h * in_w);
    }
  }
  return dx;
}

// Gradient w.r.t. the convolution weights. Accumulation runs over a fixed
// chunking of the batch so results do not depend on the thread count.
template <typename T>
Tensor<T> conv2d_dw(const Tensor<T>& x, const Tensor<T>& dy, std::int64_t k_h, std::int64_t k_w,
                    int stride, int pad) {
  if (x.rank() != 4 || dy.rank() != 4) throw ShapeError("conv2d_dw expects 4-d tensors");
  ConvGeom g = conv_geom(x.dim(1), x.dim(2), x.dim(3), dy.dim(1), k_h, k_w, stride, pad);
  if (dy.dim(2) != g.out_h || dy.dim(3) != g.out_w)
    throw ShapeError("conv2d_dw: output-grad spatial dims do not match geometry");
  const std::int64_t n = x.dim(0), ckk = g.in_c * g.k_h * g.k_w, ohw = g.out_h * g.out_w;
  const std::int64_t chunks = n < 2 ? 1 : 2;
  std::vector<Tensor<T>> partial(static_cast<std::size_t>(chunks),
                                 Tensor<T>({g.out_c, g.in_c, k_h, k_w}));
#pragma omp parallel num_threads(compute_threads()) if (compute_threads() > 1 && chunks > 1)
  {
    std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
    std::vector<T> acc(static_cast<std::size_t>(g.out_c * ckk));
#pragma omp for schedule(static)
    for (std::int64_t c = 0; c < chunks; ++c) {
      std::int64_t lo = c * n / chunks, hi = (c + 1) * n / chunks;
      T* dst = partial[static_cast<std::size_t>(c)].data.data();
      for (std::int64_t i = lo; i < hi; ++i) {
        im2col(x.data.data() + i * g.in_c * g.in_h * g.in_w, g, col.data());
        gemm(dy.data.data() + i * g.out_c * ohw, col.data(), acc.data(), g.out_c, ohw, ckk,
             /*trans_a=*/false, /*trans_b=*/true);
        for (std::size_t j = 0; j < acc.size(); ++j) dst[j] += acc[j];
      }
    }
  }
  Tensor<T> dw = std::move(partial[0]);
  for (std::int64_t c = 1; c < chunks; ++c)
    for (std::size_t j = 0; j < dw.data.size(); ++j)
      dw.data[j] += partial[static_cast<std::size_t>(c)].data[j];
  return dw;
}

// ---------------------------------------------------------------------------
// Average pooling (non-padded, window k, stride s).

template <typename T>
Tensor<T> avg_pool_fwd(const Tensor<T>& x, int k, int s) {
  if (x.rank() != 4) throw ShapeError("avg_pool expects a 4-d tensor");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = (h - k) / s + 1, ow = (w - k) / s + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("avg_pool window larger than input " + x.shape_str());
  Tensor<T> y({n, c, oh, ow});
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T* xp = x.data.data() + i * h * w;
    T* yp = y.data.data() + i * oh * ow;
    for (std::int64_t r = 0; r < oh; ++r)
      for (std::int64_t q = 0; q < ow; ++q) {
        T sum = 0;
        for (int a = 0; a < k; ++a)
          for (int b = 0; b < k; ++b) sum += xp[(r * s + a) * w + q * s + b];
        yp[r * ow + q] = sum * inv;
      }
  }
  return y;
}

template <typename T>
Tensor<T> avg_pool_bwd(const Tensor<T>& dy, std::int64_t h, std::int64_t w, int k, int s) {
  const std::int64_t n = dy.dim(0), c = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  Tensor<T> dx({n, c, h, w});
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T* gp = dy.data.data() + i * oh * ow;
    T* xp = dx.data.data() + i * h * w;
    for (std::int64_t r = 0; r < oh; ++r)
      for (std::int64_t q = 0; q < ow; ++q) {
        T g = gp[r * ow + q] * inv;
        for (int a = 0; a < k; ++a)
          for (int b = 0; b < k; ++b) xp[(r * s + a) * w + q * s + b] += g;
      }
  }
  return dx;
}

}  // namespace opgfpad::netcore
