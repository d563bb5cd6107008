#pragma once

// Differentiable tensor operations used by the network and the losses.

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "kgl/autograd.hpp"
#include "kgl/kernels.hpp"

namespace kgl::ops {

template <typename T>
void accumulate(Node<T>& parent, const Tensor<T>& g) {
  auto& buf = parent.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride, std::size_t pad) {
  Tensor<T> y = kernels::conv2d_forward(x->value, w->value, stride, pad);
  return make_op<T>(std::move(y), {x, w}, [stride, pad](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    kernels::conv2d_backward(xn.value, wn.value, self.grad, stride, pad,
                             xn.requires_grad ? &xn.grad_buffer() : nullptr,
                             wn.requires_grad ? &wn.grad_buffer() : nullptr);
  });
}

template <typename T>
Var<T> frn(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_finite(x->value, "frn");
  if (!(eps >= T{0})) throw NumericError("frn: epsilon must be non-negative");
  std::vector<T> inv_rms;
  Tensor<T> y = kernels::frn_forward(x->value, gamma->value, beta->value, eps, &inv_rms);
  return make_op<T>(std::move(y), {x, gamma, beta}, [inv_rms = std::move(inv_rms)](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    kernels::frn_backward(xn.value, inv_rms, gn.value, self.grad, xn.requires_grad ? &xn.grad_buffer() : nullptr,
                          gn.requires_grad ? &gn.grad_buffer() : nullptr,
                          bn.requires_grad ? &bn.grad_buffer() : nullptr);
  });
}

template <typename T>
Var<T> tlu(const Var<T>& y, const Var<T>& tau) {
  Tensor<T> out = kernels::tlu_forward(y->value, tau->value);
  return make_op<T>(std::move(out), {y, tau}, [](Node<T>& self) {
    auto& yn = *self.parents[0];
    auto& tn = *self.parents[1];
    kernels::tlu_backward(yn.value, tn.value, self.grad, yn.requires_grad ? &yn.grad_buffer() : nullptr,
                          tn.requires_grad ? &tn.grad_buffer() : nullptr);
  });
}

template <typename T>
Var<T> eca(const Var<T>& x, const Var<T>& w) {
  std::vector<T> pooled, gates;
  Tensor<T> out = kernels::eca_forward(x->value, w->value, &pooled, &gates);
  return make_op<T>(std::move(out), {x, w},
                    [pooled = std::move(pooled), gates = std::move(gates)](Node<T>& self) {
                      auto& xn = *self.parents[0];
                      auto& wn = *self.parents[1];
                      kernels::eca_backward(xn.value, wn.value, pooled, gates, self.grad,
                                            xn.requires_grad ? &xn.grad_buffer() : nullptr,
                                            wn.requires_grad ? &wn.grad_buffer() : nullptr);
                    });
}

/// Convolution, FRN and TLU fused into one node. Only the convolution output
/// is kept; the normalized activations are recomputed in the backward pass.
template <typename T>
Var<T> conv_frn_tlu(const Var<T>& x, const Var<T>& w, const Var<T>& gamma, const Var<T>& beta, const Var<T>& tau,
                    std::size_t stride, std::size_t pad, T eps) {
  require_finite(x->value, "conv block");
  Tensor<T> z = kernels::conv2d_forward(x->value, w->value, stride, pad);
  std::vector<T> inv_rms;
  Tensor<T> normed = kernels::frn_forward(z, gamma->value, beta->value, eps, &inv_rms);
  Tensor<T> out = kernels::tlu_forward(normed, tau->value);
  return make_op<T>(
      std::move(out), {x, w, gamma, beta, tau},
      [z = std::move(z), inv_rms = std::move(inv_rms), stride, pad, eps](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        auto& gn = *self.parents[2];
        auto& bn = *self.parents[3];
        auto& tn = *self.parents[4];
        Tensor<T> normed = kernels::frn_forward(z, gn.value, bn.value, eps);
        Tensor<T> dnormed(z.shape());
        kernels::tlu_backward(normed, tn.value, self.grad, &dnormed, tn.requires_grad ? &tn.grad_buffer() : nullptr);
        normed = Tensor<T>();
        Tensor<T> dz(z.shape());
        kernels::frn_backward(z, inv_rms, gn.value, dnormed, &dz, gn.requires_grad ? &gn.grad_buffer() : nullptr,
                              bn.requires_grad ? &bn.grad_buffer() : nullptr);
        kernels::conv2d_backward(xn.value, wn.value, dz, stride, pad, xn.requires_grad ? &xn.grad_buffer() : nullptr,
                                 wn.requires_grad ? &wn.grad_buffer() : nullptr);
      });
}

/// y = x W^T + b with x [N, in], W [out, in], b [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank(x->value.shape(), 2, "linear input");
  const std::size_t n = x->value.dim(0), in = x->value.dim(1), out = w->value.dim(0);
  if (w->value.dim(1) != in)
    throw ShapeError("linear: weight expects " + std::to_string(w->value.dim(1)) + " inputs, got " +
                     std::to_string(in));
  require_shape(b->value.shape(), {out}, "linear bias");
  using kernels::CMapMat;
  using kernels::MapMat;
  Tensor<T> y({n, out});
  MapMat<T> ym(y.data(), n, out);
  ym.noalias() = CMapMat<T>(x->value.data(), n, in) * CMapMat<T>(w->value.data(), out, in).transpose();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < out; ++c) ym(r, c) += b->value[c];
  return make_op<T>(std::move(y), {x, w, b}, [n, in, out](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    CMapMat<T> g(self.grad.data(), n, out);
    if (xn.requires_grad)
      MapMat<T>(xn.grad_buffer().data(), n, in).noalias() += g * CMapMat<T>(wn.value.data(), out, in);
    if (wn.requires_grad)
      MapMat<T>(wn.grad_buffer().data(), out, in).noalias() += g.transpose() * CMapMat<T>(xn.value.data(), n, in);
    if (bn.requires_grad) {
      auto& db = bn.grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < out; ++c) db[c] += g(r, c);
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x->value;
  y.reshape(std::move(shape));
  return make_op<T>(std::move(y), {x}, [](Node<T>& self) {
    auto& buf = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += self.grad[i];
  });
}

/// Flattens everything after the leading axis.
template <typename T>
Var<T> flatten(const Var<T>& x) {
  return reshape(x, {x->value.dim(0), x->value.row_size()});
}

template <typename T>
Var<T> abs_diff(const Var<T>& a, const Var<T>& b) {
  require_shape(b->value.shape(), a->value.shape(), "abs_diff");
  Tensor<T> y(a->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::abs(a->value[i] - b->value[i]);
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    Tensor<T>* da = an.requires_grad ? &an.grad_buffer() : nullptr;
    Tensor<T>* db = bn.requires_grad ? &bn.grad_buffer() : nullptr;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T d = an.value[i] - bn.value[i];
      const T s = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
      if (da) (*da)[i] += s * self.grad[i];
      if (db) (*db)[i] -= s * self.grad[i];
    }
  });
}

/// Row-wise v / max(|v|, eps) on an [N, D] input.
template <typename T>
Var<T> l2_normalize(const Var<T>& x, T eps) {
  require_rank(x->value.shape(), 2, "l2_normalize");
  const std::size_t n = x->value.dim(0), d = x->value.dim(1);
  Tensor<T> y(x->value.shape());
  std::vector<T> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    T ss = 0;
    for (std::size_t c = 0; c < d; ++c) ss += x->value.at(r, c) * x->value.at(r, c);
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < d; ++c) y.at(r, c) = x->value.at(r, c) / norms[r];
  }
  return make_op<T>(std::move(y), {x}, [norms = std::move(norms), n, d, eps](Node<T>& self) {
    auto& buf = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      const T* yr = self.value.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += yr[c] * g[c];
      // Below the guard the map is linear (division by the constant eps).
      const bool clamped = !(norms[r] > eps);
      for (std::size_t c = 0; c < d; ++c)
        buf[r * d + c] += clamped ? g[c] / eps : (g[c] - yr[c] * dot) / norms[r];
    }
  });
}

/// Selects rows (leading-axis entries) by index; repeated indices accumulate.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> idx) {
  const std::size_t rs = x->value.row_size();
  Shape s = x->value.shape();
  s[0] = idx.size();
  Tensor<T> y(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x->value.dim(0)) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x->value.data() + idx[i] * rs, rs, y.data() + i * rs);
  }
  return make_op<T>(std::move(y), {x}, [idx = std::move(idx), rs](Node<T>& self) {
    auto& buf = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < rs; ++k) buf[idx[i] * rs + k] += self.grad[i * rs + k];
  });
}

/// Sum of scalars with fixed weights.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights length mismatch");
  T v = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i]->value.size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    v += weights[i] * terms[i]->value[0];
  }
  return make_op<T>(Tensor<T>({1}, v), terms, [weights](Node<T>& self) {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (self.parents[i]->requires_grad) self.parents[i]->grad_buffer()[0] += weights[i] * self.grad[0];
  });
}

}  // namespace kgl::ops
