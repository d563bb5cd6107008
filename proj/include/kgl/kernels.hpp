#pragma once

// Raw forward/backward kernels on dense tensors. No graph bookkeeping here;
// the autograd wrappers in blocks.hpp call into these.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "kgl/tensor.hpp"

namespace kgl::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t in_channels, out_channels, kernel, stride, pad;
  std::size_t in_h, in_w;

  std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::size_t col_rows() const { return in_channels * kernel * kernel; }
  std::size_t col_cols() const { return out_h() * out_w(); }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (w[1] != x[1])
    throw ShapeError("conv2d: weight expects " + std::to_string(w[1]) + " input channels, got " +
                     std::to_string(x[1]));
  if (w[2] != w[3]) throw ShapeError("conv2d: kernel must be square");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3])
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x));
  return {x[1], w[0], w[2], stride, pad, x[2], x[3]};
}

namespace detail {
/// Output columns [lo, hi) whose input column ox*stride + kx - pad is inside [0, w).
inline void valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t k, std::size_t pad,
                        std::size_t& lo, std::size_t& hi) {
  const long off = static_cast<long>(k) - static_cast<long>(pad);
  long l = off >= 0 ? 0 : (-off + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  long h = (static_cast<long>(in) - 1 - off);
  h = h < 0 ? 0 : h / static_cast<long>(stride) + 1;
  lo = static_cast<std::size_t>(std::min<long>(l, static_cast<long>(out)));
  hi = static_cast<std::size_t>(std::clamp<long>(h, static_cast<long>(lo), static_cast<long>(out)));
}
}  // namespace detail

/// Writes the receptive fields of one sample into columns [col_offset, col_offset + out_h*out_w)
/// of a row-major matrix with `ld` columns.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col, std::size_t ld, std::size_t col_offset) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel, s = g.stride;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* xc = x + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * ld + col_offset;
        std::size_t lo, hi;
        detail::valid_range(ow, g.in_w, s, kx, g.pad, lo, hi);
        const long xoff = static_cast<long>(kx) - static_cast<long>(g.pad);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(g.pad);
          T* d = dst + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
            std::fill(d, d + ow, T{0});
            continue;
          }
          const T* src = xc + iy * g.in_w;
          std::fill(d, d + lo, T{0});
          if (s == 1) {
            std::copy(src + static_cast<long>(lo) + xoff, src + static_cast<long>(hi) + xoff, d + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox] = src[static_cast<long>(ox * s) + xoff];
          }
          std::fill(d + hi, d + ow, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t ld, std::size_t col_offset, const ConvGeometry& g, T* dx) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel, s = g.stride;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* xc = dx + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * ld + col_offset;
        std::size_t lo, hi;
        detail::valid_range(ow, g.in_w, s, kx, g.pad, lo, hi);
        const long xoff = static_cast<long>(kx) - static_cast<long>(g.pad);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          T* d = xc + iy * g.in_w;
          const T* sr = src + oy * ow;
          if (s == 1) {
            T* dd = d + xoff;
            for (std::size_t ox = lo; ox < hi; ++ox) dd[ox] += sr[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) d[static_cast<long>(ox * s) + xoff] += sr[ox];
          }
        }
      }
    }
  }
}

/// Samples per GEMM so that the column buffer stays around 128K elements (cache-resident).
inline std::size_t conv_chunk(const ConvGeometry& g, std::size_t n) {
  const std::size_t per = std::max<std::size_t>(1, g.col_rows() * g.col_cols());
  return std::clamp<std::size_t>((std::size_t{1} << 17) / per, 1, std::max<std::size_t>(n, 1));
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
  const std::size_t n = x.dim(0), hw = g.col_cols(), kr = g.col_rows();
  Tensor<T> y({n, g.out_channels, g.out_h(), g.out_w()});
  const std::size_t chunk = conv_chunk(g, n);
  std::vector<T> col(kr * hw * chunk), out(g.out_channels * hw * chunk);
  CMapMat<T> wm(w.data(), g.out_channels, kr);
  for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, n - n0), ld = nb * hw;
    for (std::size_t i = 0; i < nb; ++i) im2col(x.data() + (n0 + i) * x.row_size(), g, col.data(), ld, i * hw);
    MapMat<T> om(out.data(), g.out_channels, ld);
    om.noalias() = wm * CMapMat<T>(col.data(), kr, ld);
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t c = 0; c < g.out_channels; ++c)
        std::copy_n(out.data() + c * ld + i * hw, hw, y.data() + ((n0 + i) * g.out_channels + c) * hw);
  }
  return y;
}

/// Accumulates into dx (if non-null) and dw (if non-null).
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, std::size_t stride,
                     std::size_t pad, Tensor<T>* dx, Tensor<T>* dw) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
  const std::size_t n = x.dim(0), hw = g.col_cols(), kr = g.col_rows();
  const std::size_t chunk = conv_chunk(g, n);
  std::vector<T> col(kr * hw * chunk), dym(g.out_channels * hw * chunk);
  CMapMat<T> wm(w.data(), g.out_channels, kr);
  for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, n - n0), ld = nb * hw;
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t c = 0; c < g.out_channels; ++c)
        std::copy_n(dy.data() + ((n0 + i) * g.out_channels + c) * hw, hw, dym.data() + c * ld + i * hw);
    CMapMat<T> dyv(dym.data(), g.out_channels, ld);
    if (dw) {
      for (std::size_t i = 0; i < nb; ++i) im2col(x.data() + (n0 + i) * x.row_size(), g, col.data(), ld, i * hw);
      MapMat<T>(dw->data(), g.out_channels, kr).noalias() += dyv * CMapMat<T>(col.data(), kr, ld).transpose();
    }
    if (dx) {
      MapMat<T> cm(col.data(), kr, ld);
      cm.noalias() = wm.transpose() * dyv;
      for (std::size_t i = 0; i < nb; ++i) col2im(col.data(), ld, i * hw, g, dx->data() + (n0 + i) * x.row_size());
    }
  }
}

/// Filter response normalization. Stores the per-(sample, channel) inverse
/// RMS in `inv_rms` for the backward pass.
template <typename T>
Tensor<T> frn_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                      std::vector<T>* inv_rms = nullptr) {
  require_rank(x.shape(), 4, "frn input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("frn: empty spatial extent");
  require_shape(gamma.shape(), {c}, "frn gamma");
  require_shape(beta.shape(), {c}, "frn beta");
  Tensor<T> y(x.shape());
  if (inv_rms) inv_rms->assign(n * c, T{0});
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* src = x.data() + i * hw;
    T ss = 0;
    for (std::size_t k = 0; k < hw; ++k) ss += src[k] * src[k];
    const T nu2 = ss / static_cast<T>(hw);
    const T denom = nu2 + eps;
    // Zero input with eps = 0 normalizes to zero rather than 0/0.
    const T r = denom > T{0} ? T{1} / std::sqrt(denom) : T{0};
    if (inv_rms) (*inv_rms)[i] = r;
    const T gm = gamma[i % c], bt = beta[i % c];
    T* dst = y.data() + i * hw;
    for (std::size_t k = 0; k < hw; ++k) dst[k] = gm * src[k] * r + bt;
  }
  return y;
}

template <typename T>
void frn_backward(const Tensor<T>& x, const std::vector<T>& inv_rms, const Tensor<T>& gamma, const Tensor<T>& dout,
                  Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (std::size_t i = 0; i < n * c; ++i) {
    const std::size_t ch = i % c;
    const T* xs = x.data() + i * hw;
    const T* g = dout.data() + i * hw;
    const T r = inv_rms[i];
    T sum_g = 0, sum_gy = 0, sum_gx = 0;
    for (std::size_t k = 0; k < hw; ++k) {
      sum_g += g[k];
      sum_gy += g[k] * xs[k] * r;
      sum_gx += g[k] * xs[k];
    }
    if (dbeta) (*dbeta)[ch] += sum_g;
    if (dgamma) (*dgamma)[ch] += sum_gy;
    if (dx) {
      const T gm = gamma[ch];
      const T coef = gm * r * r * r * sum_gx / static_cast<T>(hw);
      T* d = dx->data() + i * hw;
      for (std::size_t k = 0; k < hw; ++k) d[k] += gm * r * g[k] - coef * xs[k];
    }
  }
}

/// Channel axis is 1; everything after it is the per-channel extent.
inline std::pair<std::size_t, std::size_t> channel_layout(const Shape& s) {
  if (s.size() < 2) throw ShapeError("per-channel op needs rank >= 2, got " + shape_str(s));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[1], inner};
}

template <typename T>
Tensor<T> tlu_forward(const Tensor<T>& y, const Tensor<T>& tau) {
  const auto [c, inner] = channel_layout(y.shape());
  require_shape(tau.shape(), {c}, "tlu tau");
  Tensor<T> out(y.shape());
  const std::size_t blocks = inner == 0 ? 0 : y.size() / inner;
  for (std::size_t b = 0; b < blocks; ++b) {
    const T t = tau[b % c];
    const T* src = y.data() + b * inner;
    T* dst = out.data() + b * inner;
    for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i] > t ? src[i] : t;
  }
  return out;
}

template <typename T>
void tlu_backward(const Tensor<T>& y, const Tensor<T>& tau, const Tensor<T>& dout, Tensor<T>* dy, Tensor<T>* dtau) {
  const auto [c, inner] = channel_layout(y.shape());
  const std::size_t blocks = inner == 0 ? 0 : y.size() / inner;
  for (std::size_t b = 0; b < blocks; ++b) {
    const T t = tau[b % c];
    const T* ys = y.data() + b * inner;
    const T* g = dout.data() + b * inner;
    T clamped = 0;
    if (dy) {
      T* d = dy->data() + b * inner;
      for (std::size_t i = 0; i < inner; ++i) d[i] += ys[i] > t ? g[i] : T{0};
    }
    for (std::size_t i = 0; i < inner; ++i) clamped += ys[i] > t ? T{0} : g[i];
    if (dtau) (*dtau)[b % c] += clamped;
  }
}

template <typename T>
T sigmoid(T z) {
  return z >= 0 ? T{1} / (T{1} + std::exp(-z)) : std::exp(z) / (T{1} + std::exp(z));
}

/// Efficient channel attention: pool over H*W, 1-D convolution across
/// channels with zero padding, sigmoid gate, channel rescale. `gates`
/// receives the [N*C] gate values.
template <typename T>
Tensor<T> eca_forward(const Tensor<T>& x, const Tensor<T>& w, std::vector<T>* pooled_out = nullptr,
                      std::vector<T>* gates_out = nullptr) {
  require_rank(x.shape(), 4, "eca input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), k = w.size();
  const long half = static_cast<long>(k / 2);
  std::vector<T> pooled(n * c), gates(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::size_t q = 0; q < hw; ++q) s += x[i * hw + q];
    pooled[i] = s / static_cast<T>(hw);
  }
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T z = 0;
      for (std::size_t t = 0; t < k; ++t) {
        const long src = static_cast<long>(ch) + static_cast<long>(t) - half;
        if (src >= 0 && src < static_cast<long>(c)) z += w[t] * pooled[b * c + src];
      }
      gates[b * c + ch] = sigmoid(z);
    }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t q = 0; q < hw; ++q) out[i * hw + q] = x[i * hw + q] * gates[i];
  if (pooled_out) *pooled_out = std::move(pooled);
  if (gates_out) *gates_out = std::move(gates);
  return out;
}

template <typename T>
void eca_backward(const Tensor<T>& x, const Tensor<T>& w, const std::vector<T>& pooled, const std::vector<T>& gates,
                  const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dw) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), k = w.size();
  const long half = static_cast<long>(k / 2);
  std::vector<T> dz(n * c), dpool(n * c, T{0});
  for (std::size_t i = 0; i < n * c; ++i) {
    T dg = 0;
    for (std::size_t q = 0; q < hw; ++q) dg += dout[i * hw + q] * x[i * hw + q];
    dz[i] = dg * gates[i] * (T{1} - gates[i]);
  }
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t t = 0; t < k; ++t) {
        const long src = static_cast<long>(ch) + static_cast<long>(t) - half;
        if (src < 0 || src >= static_cast<long>(c)) continue;
        if (dw) (*dw)[t] += dz[b * c + ch] * pooled[b * c + src];
        dpool[b * c + src] += dz[b * c + ch] * w[t];
      }
  if (dx) {
    for (std::size_t i = 0; i < n * c; ++i) {
      const T g = gates[i], dp = dpool[i] / static_cast<T>(hw);
      for (std::size_t q = 0; q < hw; ++q) (*dx)[i * hw + q] += dout[i * hw + q] * g + dp;
    }
  }
}

}  // namespace kgl::kernels
