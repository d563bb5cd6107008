#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kgl/mining.hpp"

namespace kgl {

struct LossWeights {
  double alpha = 1.0;  // metric loss
  double beta = 1.0;   // feature-guided losses
};

struct LossBreakdown {
  double descriptor = 0;  // L_d
  double metric = 0;      // L_m
  double guide_a = 0;     // L_fg on spectrum A
  double guide_b = 0;     // L_fg on spectrum B
  double total = 0;
};

enum class DescriptorLossKind { hardest_triplet, hynet_hybrid };

inline DescriptorLossKind parse_descriptor_loss(const std::string& s) {
  if (s == "hardest_triplet") return DescriptorLossKind::hardest_triplet;
  if (s == "hynet_hybrid") return DescriptorLossKind::hynet_hybrid;
  throw ConfigError("unknown descriptor loss '" + s + "'");
}
inline const char* to_string(DescriptorLossKind k) {
  return k == DescriptorLossKind::hardest_triplet ? "hardest_triplet" : "hynet_hybrid";
}

struct DescriptorLossOptions {
  DescriptorLossKind kind = DescriptorLossKind::hardest_triplet;
  double margin = 1.0;
  /// Weight of the inner-product term in the hybrid similarity.
  double hybrid_alpha = 2.0;
  double hybrid_margin = 1.2;
};

namespace detail {
template <typename T>
T row_distance(const T* a, const T* b, std::size_t d) {
  T ss = 0;
  for (std::size_t k = 0; k < d; ++k) ss += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(ss);
}
template <typename T>
T row_dot(const T* a, const T* b, std::size_t d) {
  T s = 0;
  for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
  return s;
}
/// Adds w * d|a-b|/da to ga and its negation to gb; zero at a == b.
template <typename T>
void add_distance_grad(const T* a, const T* b, std::size_t d, T dist, T w, T* ga, T* gb) {
  if (!(dist > T{0})) return;
  for (std::size_t k = 0; k < d; ++k) {
    const T g = w * (a[k] - b[k]) / dist;
    if (ga) ga[k] += g;
    if (gb) gb[k] -= g;
  }
}
}  // namespace detail

/// Triplet loss on descriptors. Anchors are the spectrum-A rows; each
/// anchor's positive is the aligned B row and its negative the B row given
/// by `neg_idx` (diagonal-excluded hardest partner from the distance matrix).
template <typename T>
Var<T> descriptor_loss(const Var<T>& desc_a, const Var<T>& desc_b, const std::vector<std::size_t>& neg_idx,
                       const DescriptorLossOptions& opt = {}) {
  require_rank(desc_a->value.shape(), 2, "descriptor loss");
  require_shape(desc_b->value.shape(), desc_a->value.shape(), "descriptor loss");
  const std::size_t n = desc_a->value.dim(0), d = desc_a->value.dim(1);
  if (n < 2) throw ShapeError("descriptor loss needs at least 2 pairs");
  if (neg_idx.size() != n) throw ShapeError("descriptor loss: one negative index per anchor required");
  for (std::size_t j = 0; j < n; ++j)
    if (neg_idx[j] >= n || neg_idx[j] == j) throw ShapeError("descriptor loss: invalid negative index");

  const T* A = desc_a->value.data();
  const T* B = desc_b->value.data();
  const bool hybrid = opt.kind == DescriptorLossKind::hynet_hybrid;
  const T alpha = static_cast<T>(opt.hybrid_alpha);
  const T margin = static_cast<T>(hybrid ? opt.hybrid_margin : opt.margin);
  // Hybrid similarity: alpha * a.b - |a - b|; triplet loss in similarity space.
  auto score = [&](const T* a, const T* b) {
    const T dist = detail::row_distance(a, b, d);
    return hybrid ? -(alpha * detail::row_dot(a, b, d) - dist) : dist;
  };
  std::vector<char> active(n);
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const T h = margin + score(A + j * d, B + j * d) - score(A + j * d, B + neg_idx[j] * d);
    active[j] = h > T{0};
    if (active[j]) total += h;
  }
  return make_op<T>(
      Tensor<T>({1}, total / static_cast<T>(n)), {desc_a, desc_b},
      [neg_idx, active = std::move(active), n, d, hybrid, alpha](Node<T>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        T* ga = an.requires_grad ? an.grad_buffer().data() : nullptr;
        T* gb = bn.requires_grad ? bn.grad_buffer().data() : nullptr;
        const T* A = an.value.data();
        const T* B = bn.value.data();
        const T w = self.grad[0] / static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) {
          if (!active[j]) continue;
          const T* a = A + j * d;
          for (const auto& [row, sign] : {std::pair{j, T{1}}, std::pair{neg_idx[j], T{-1}}}) {
            const T* b = B + row * d;
            const T dist = detail::row_distance(a, b, d);
            T* gbr = gb ? gb + row * d : nullptr;
            T* gar = ga ? ga + j * d : nullptr;
            detail::add_distance_grad(a, b, d, dist, sign * w, gar, gbr);
            if (hybrid) {
              for (std::size_t k = 0; k < d; ++k) {
                if (gar) gar[k] -= sign * w * alpha * b[k];
                if (gbr) gbr[k] -= sign * w * alpha * a[k];
              }
            }
          }
        }
      });
}

/// Convenience overload that mines the negatives from the batch's own
/// distance matrix.
template <typename T>
Var<T> descriptor_loss(const Var<T>& desc_a, const Var<T>& desc_b, const DescriptorLossOptions& opt = {}) {
  const auto m = distance_matrix(desc_b->value, desc_a->value);
  return descriptor_loss(desc_a, desc_b, hard_negative_indices(m), opt);
}

/// Mean binary cross-entropy on logits, log(1 + e^-|z|) form.
template <typename T>
Var<T> metric_loss(const Var<T>& logits, const std::vector<int>& labels) {
  const std::size_t m = logits->value.size();
  if (labels.size() != m) throw ShapeError("metric loss: logits/labels length mismatch");
  if (m == 0) throw ShapeError("metric loss: empty batch");
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError("metric loss: labels must be 0 or 1");
    const T z = logits->value[i];
    total += std::max(z, T{0}) - z * static_cast<T>(labels[i]) + std::log1p(std::exp(-std::abs(z)));
  }
  return make_op<T>(Tensor<T>({1}, total / static_cast<T>(m)), {logits}, [labels, m](Node<T>& self) {
    auto& buf = self.parents[0]->grad_buffer();
    const T w = self.grad[0] / static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i)
      buf[i] += w * (kernels::sigmoid(self.parents[0]->value[i]) - static_cast<T>(labels[i]));
  });
}

/// Mean over samples of |F_i - G_i| (flattened per sample). Gradients flow
/// into both inputs.
template <typename T>
Var<T> feature_guided_loss(const Var<T>& f, const Var<T>& g) {
  require_shape(g->value.shape(), f->value.shape(), "feature-guided loss");
  const std::size_t n = f->value.dim(0), rs = f->value.row_size();
  if (n == 0) throw ShapeError("feature-guided loss: empty batch");
  std::vector<T> norms(n);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = detail::row_distance(f->value.data() + i * rs, g->value.data() + i * rs, rs);
    total += norms[i];
  }
  return make_op<T>(Tensor<T>({1}, total / static_cast<T>(n)), {f, g},
                    [norms = std::move(norms), n, rs](Node<T>& self) {
                      auto& fn = *self.parents[0];
                      auto& gn = *self.parents[1];
                      T* gf = fn.requires_grad ? fn.grad_buffer().data() : nullptr;
                      T* gg = gn.requires_grad ? gn.grad_buffer().data() : nullptr;
                      const T w = self.grad[0] / static_cast<T>(n);
                      for (std::size_t i = 0; i < n; ++i)
                        detail::add_distance_grad(fn.value.data() + i * rs, gn.value.data() + i * rs, rs, norms[i],
                                                  w, gf ? gf + i * rs : nullptr, gg ? gg + i * rs : nullptr);
                    });
}

/// Loss components of one step. Null terms count as zero (e.g. no
/// descriptor network).
template <typename T>
struct LossTerms {
  Var<T> descriptor, metric, guide_a, guide_b;
};

/// L = L_d + alpha L_m + beta (L_fg_a + L_fg_b). Fills `out` with the
/// component values; a non-finite component raises DivergenceError.
template <typename T>
Var<T> total_loss(const LossTerms<T>& terms, const LossWeights& w, LossBreakdown* out = nullptr, long step = -1) {
  const std::pair<const Var<T>*, const char*> parts[] = {
      {&terms.descriptor, "L_d"}, {&terms.metric, "L_m"}, {&terms.guide_a, "L_fg_v"}, {&terms.guide_b, "L_fg_n"}};
  const double weights[] = {1.0, w.alpha, w.beta, w.beta};
  std::vector<Var<T>> vars;
  std::vector<T> ws;
  double values[4] = {0, 0, 0, 0};
  for (int k = 0; k < 4; ++k)
    if (*parts[k].first) values[k] = static_cast<double>((*parts[k].first)->value[0]);
  const std::string at = step >= 0 ? " at step " + std::to_string(step) : std::string();
  auto summary = [&] {
    std::string s;
    for (int k = 0; k < 4; ++k) s += std::string(k ? ", " : " (") + parts[k].second + "=" + std::to_string(values[k]);
    return s + ")";
  };
  if (out) {
    out->descriptor = values[0];
    out->metric = values[1];
    out->guide_a = values[2];
    out->guide_b = values[3];
    out->total = values[0] + w.alpha * values[1] + w.beta * (values[2] + values[3]);
  }
  for (int k = 0; k < 4; ++k) {
    const Var<T>& v = *parts[k].first;
    if (!v) continue;
    if (!std::isfinite(values[k]))
      throw DivergenceError(std::string("non-finite loss component ") + parts[k].second + at + summary(), step,
                            parts[k].second);
    vars.push_back(v);
    ws.push_back(static_cast<T>(weights[k]));
  }
  Var<T> total = vars.empty() ? constant(Tensor<T>({1}, T{0})) : ops::weighted_sum(vars, ws);
  if (!std::isfinite(static_cast<double>(total->value[0])))
    throw DivergenceError("non-finite total loss" + (step >= 0 ? " at step " + std::to_string(step) : std::string()),
                          step, "L_total");
  return total;
}

}  // namespace kgl
