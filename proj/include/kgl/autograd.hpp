#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kgl/tensor.hpp"

namespace kgl {

/// One value in the reverse-mode graph. Parameters are leaves with
/// `requires_grad`; sharing a parameter between branches means sharing the
/// node itself, so gradients from every use land in the same buffer.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  std::string name;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const noexcept { return grad.size() == value.size() && !grad.empty(); }
  void zero_grad() {
    if (has_grad()) grad.fill(T{0});
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
Var<T> constant(Tensor<T> value, std::string name = {}) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->name = std::move(name);
  return n;
}

template <typename T>
Var<T> parameter(Tensor<T> value, std::string name) {
  auto n = constant(std::move(value), std::move(name));
  n->requires_grad = true;
  return n;
}

/// Creates an op output. The backward closure receives the output node and
/// must accumulate into `self.parents[i]->grad_buffer()` for parents that
/// require grad.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    if (needs) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(backward_fn);
    }
  }
  return n;
}

/// Reverse sweep from a scalar root.
template <typename T>
void backward(const Var<T>& root) {
  if (root->value.size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

/// Drops graph edges below `root` so intermediate buffers are released even
/// if a caller keeps the root alive.
template <typename T>
void release_graph(const Var<T>& root) {
  std::vector<Node<T>*> stack{root.get()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    for (auto& p : n->parents)
      if (!p->parents.empty()) stack.push_back(p.get());
    n->parents.clear();
    n->backward_fn = nullptr;
  }
}

}  // namespace kgl
