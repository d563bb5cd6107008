#pragma once

// Building blocks of the extractor branches and the two heads.

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "kgl/ops.hpp"

namespace kgl {

/// Zero-mean normal weights with standard deviation gain / sqrt(fan_in).
template <typename T>
Tensor<T> fan_in_normal(Shape shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

/// One convolution + FRN + TLU unit. The four parameter nodes may be shared
/// with other blocks; copying a ConvBlockParams copies handles, not storage.
template <typename T>
struct ConvBlockParams {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_size = 3;
  std::size_t stride = 1;
  T frn_epsilon = T(1e-6);
  Var<T> weight;  // [out, in, k, k]
  Var<T> gamma;   // [out]
  Var<T> beta;    // [out]
  Var<T> tau;     // [out]

  std::size_t padding() const { return kernel_size / 2; }

  void validate() const {
    if (out_channels == 0 || kernel_size == 0 || stride == 0)
      throw ConfigError("conv block: channels, kernel and stride must be positive");
    if (!(frn_epsilon > T{0})) throw ConfigError("conv block: frn epsilon must be > 0");
    require_shape(weight->value.shape(), {out_channels, in_channels, kernel_size, kernel_size}, "conv block weight");
    for (const auto* p : {&gamma, &beta, &tau}) require_shape((*p)->value.shape(), {out_channels}, "conv block FRN/TLU");
  }

  std::vector<Var<T>> parameters() const { return {weight, gamma, beta, tau}; }

  static ConvBlockParams create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                                const std::string& name, std::mt19937_64& rng) {
    ConvBlockParams p;
    p.in_channels = in;
    p.out_channels = out;
    p.kernel_size = kernel;
    p.stride = stride;
    p.weight = parameter(fan_in_normal<T>({out, in, kernel, kernel}, in * kernel * kernel, std::sqrt(2.0), rng),
                         name + ".weight");
    p.gamma = parameter(Tensor<T>({out}, T{1}), name + ".gamma");
    p.beta = parameter(Tensor<T>({out}, T{0}), name + ".beta");
    p.tau = parameter(Tensor<T>({out}, T{0}), name + ".tau");
    return p;
  }
};

template <typename T>
struct EcaParams {
  std::size_t kernel_size = 3;
  Var<T> weights;  // [kernel_size]

  void validate(std::size_t channels) const {
    if (kernel_size % 2 == 0) throw ConfigError("eca: kernel size must be odd, got " + std::to_string(kernel_size));
    if (kernel_size > channels)
      throw ConfigError("eca: kernel size " + std::to_string(kernel_size) + " exceeds channel count " +
                        std::to_string(channels));
    require_shape(weights->value.shape(), {kernel_size}, "eca weights");
  }

  static EcaParams create(std::size_t kernel, const std::string& name, std::mt19937_64& rng) {
    return {kernel, parameter(fan_in_normal<T>({kernel}, kernel, 1.0, rng), name + ".weight")};
  }
};

/// FRN with the epsilon and affine terms of `p`. Epsilon may be zero here;
/// a block built for the network always has a positive one.
template <typename T>
Var<T> frn_forward(const Var<T>& x, const ConvBlockParams<T>& p) {
  return ops::frn(x, p.gamma, p.beta, p.frn_epsilon);
}

template <typename T>
Var<T> tlu_forward(const Var<T>& y, const Var<T>& tau) {
  return ops::tlu(y, tau);
}

template <typename T>
Var<T> eca_forward(const Var<T>& x, const EcaParams<T>& p) {
  require_rank(x->value.shape(), 4, "eca input");
  p.validate(x->value.dim(1));
  return ops::eca(x, p.weights);
}

template <typename T>
Var<T> conv_block_forward(const Var<T>& x, const ConvBlockParams<T>& p) {
  require_rank(x->value.shape(), 4, "conv block input");
  if (x->value.dim(1) != p.in_channels)
    throw ShapeError("conv block: expected " + std::to_string(p.in_channels) + " input channels, got " +
                     std::to_string(x->value.dim(1)));
  return ops::conv_frn_tlu(x, p.weight, p.gamma, p.beta, p.tau, p.stride, p.padding(), p.frn_epsilon);
}

/// Valid convolution that collapses the final map to 1x1, then row-wise
/// L2 normalization.
template <typename T>
struct DescriptorHead {
  static constexpr double kNormEps = 1e-12;
  std::size_t dim = 128;
  Var<T> weight;  // [dim, channels, h, w]

  std::vector<Var<T>> parameters() const { return {weight}; }

  static DescriptorHead create(std::size_t channels, std::size_t spatial, std::size_t dim, const std::string& name,
                               std::mt19937_64& rng) {
    return {dim, parameter(fan_in_normal<T>({dim, channels, spatial, spatial}, channels * spatial * spatial, 1.0, rng),
                           name + ".weight")};
  }
};

template <typename T>
Var<T> descriptor_head_forward(const Var<T>& f, const DescriptorHead<T>& head) {
  require_rank(f->value.shape(), 4, "descriptor head input");
  const auto& ws = head.weight->value.shape();
  if (f->value.dim(1) != ws[1] || f->value.dim(2) != ws[2] || f->value.dim(3) != ws[3])
    throw ShapeError("descriptor head: expected input [N x " + std::to_string(ws[1]) + "x" + std::to_string(ws[2]) +
                     "x" + std::to_string(ws[3]) + "], got " + shape_str(f->value.shape()));
  auto z = ops::conv2d(f, head.weight, 1, 0);
  return ops::l2_normalize(ops::flatten(z), static_cast<T>(DescriptorHead<T>::kNormEps));
}

/// Fully connected stack of the metric branch: |a - b| flattened, then
/// hidden layers with TLU, then one output logit.
template <typename T>
struct MetricHead {
  struct Layer {
    Var<T> weight;  // [out, in]
    Var<T> bias;    // [out]
    Var<T> tau;     // [out], null on the output layer
  };
  std::vector<Layer> layers;

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> ps;
    for (const auto& l : layers) {
      ps.push_back(l.weight);
      ps.push_back(l.bias);
      if (l.tau) ps.push_back(l.tau);
    }
    return ps;
  }

  static MetricHead create(std::size_t in, const std::vector<std::size_t>& widths, const std::string& name,
                           std::mt19937_64& rng) {
    MetricHead h;
    std::size_t prev = in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const bool last = i + 1 == widths.size();
      const std::string ln = name + ".fc" + std::to_string(i + 1);
      Layer l;
      l.weight = parameter(fan_in_normal<T>({widths[i], prev}, prev, last ? 1.0 : std::sqrt(2.0), rng), ln + ".weight");
      l.bias = parameter(Tensor<T>({widths[i]}, T{0}), ln + ".bias");
      if (!last) l.tau = parameter(Tensor<T>({widths[i]}, T{0}), ln + ".tau");
      h.layers.push_back(std::move(l));
      prev = widths[i];
    }
    return h;
  }

  /// Input is the [N, in] difference matrix; output logits [N].
  Var<T> forward(const Var<T>& diff) const {
    Var<T> h = diff;
    for (const auto& l : layers) {
      h = ops::linear(h, l.weight, l.bias);
      if (l.tau) h = ops::tlu(h, l.tau);
    }
    return ops::reshape(h, {h->value.dim(0)});
  }
};

}  // namespace kgl
