#pragma once

// Adam with per-group learning rates, and the epoch-level learning-rate
// schedules.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "kgl/autograd.hpp"
#include "kgl/config.hpp"

namespace kgl {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  struct Group {
    std::string name;
    std::vector<Var<T>> params;
    double lr = 1e-3;
  };

  Adam() = default;
  Adam(std::vector<Group> groups, AdamHyper h = {}) : groups_(std::move(groups)), hyper_(h) {
    for (const auto& g : groups_)
      for (const auto& p : g.params) {
        m_.emplace_back(p->value.shape(), T{0});
        v_.emplace_back(p->value.shape(), T{0});
      }
  }

  std::vector<Group>& groups() { return groups_; }
  const std::vector<Group>& groups() const { return groups_; }
  long steps() const { return t_; }
  const AdamHyper& hyper() const { return hyper_; }

  /// One update from the gradients currently held by the parameters.
  /// Parameters without a gradient buffer are left untouched.
  void step() {
    ++t_;
    const double bc1 = 1 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(hyper_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(hyper_.beta1), b2 = static_cast<T>(hyper_.beta2);
    std::size_t k = 0;
    for (const auto& g : groups_) {
      const T step_size = static_cast<T>(g.lr / bc1);
      const T inv_sqrt_bc2 = static_cast<T>(1 / std::sqrt(bc2));
      const T eps = static_cast<T>(hyper_.eps);
      for (const auto& p : g.params) {
        auto& m = m_[k];
        auto& v = v_[k];
        ++k;
        if (!p->has_grad()) continue;
        T* w = p->value.data();
        const T* gr = p->grad.data();
        T* mm = m.data();
        T* vv = v.data();
        for (std::size_t i = 0, n = p->value.size(); i < n; ++i) {
          mm[i] = b1 * mm[i] + (1 - b1) * gr[i];
          vv[i] = b2 * vv[i] + (1 - b2) * gr[i] * gr[i];
          w[i] -= step_size * mm[i] / (std::sqrt(vv[i]) * inv_sqrt_bc2 + eps);
        }
      }
    }
  }

  /// Moment buffers in parameter order (group by group).
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  std::vector<Group> groups_;
  AdamHyper hyper_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Var<T>>& params, double max_norm) {
  double ss = 0;
  for (const auto& p : params)
    if (p->has_grad())
      for (T g : p->grad.vec()) ss += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-6));
    for (const auto& p : params)
      if (p->has_grad())
        for (T& g : p->grad.vec()) g *= s;
  }
  return norm;
}

/// Learning-rate multiplier for 0-based `epoch`.
/// cosine: CosineAnnealingLR closed form with period T = max(1, epochs / 4),
///   0.5 (1 + cos(pi e / T)), continuing past T without restart.
/// simulated_annealing: warm restarts with an initial cycle of 2 epochs that
///   doubles after every restart.
inline double schedule_factor(Schedule s, int epoch, int epochs) {
  switch (s) {
    case Schedule::none: return 1.0;
    case Schedule::cosine: {
      const double period = std::max(1, epochs / 4);
      return 0.5 * (1 + std::cos(std::numbers::pi * epoch / period));
    }
    case Schedule::simulated_annealing: {
      int cycle = 2, e = epoch;
      while (e >= cycle) {
        e -= cycle;
        cycle *= 2;
      }
      return 0.5 * (1 + std::cos(std::numbers::pi * e / cycle));
    }
  }
  return 1.0;
}

}  // namespace kgl
