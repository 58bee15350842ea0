#pragma once

// Minimal reverse-mode differentiation over NCHW tensors. Every op records
// its parents and a closure that pushes the output gradient back into them.
// The graph is owned by the result Var and dies with it; parameters are leaf
// Vars held by the model and keep their accumulated gradient between calls.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "pyragen/tensor.hpp"

namespace pyragen {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

// Disables graph recording for its lifetime (evaluation, detached fakes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  // Gradient accumulated by backward(); zeros if none has flowed in.
  const Tensor<T>& grad() const { return node_->ensure_grad(); }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T(0));
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

  // Same value, no history.
  Var detach() const { return Var(node_->value); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Creates an op result. History is recorded only when grad mode is on and at
// least one parent needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  Node<T>* n = out.node();
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.shared());
  n->backward_fn = std::move(fn);
  return out;
}

template <class T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ShapeError("backward() requires a scalar root, got " + root.shape().str());
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !p->parents.empty() && seen.insert(p).second) stack.push_back({p, 0});
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  root.node()->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

namespace detail {
template <class T>
Tensor<T>* grad_of(Node<T>& self, std::size_t i) {
  Node<T>& p = *self.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}
}  // namespace detail

// ---- elementwise ---------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

// a * s + shift
template <class T>
Var<T> affine(const Var<T>& a, T s, T shift = T(0)) {
  Tensor<T> out = a.value();
  for (auto& v : out.span()) v = v * s + shift;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return affine(a, s, T(0));
}

template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (auto& v : out.span()) v = std::clamp(v, lo, hi);
  return make_result<T>(std::move(out), {a}, [lo, hi](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (av[i] > lo && av[i] < hi) (*g)[i] += self.grad[i];
  });
}

enum class Activation { none, elu, leaky, tanh, sigmoid, relu };

inline constexpr double kLeakySlope = 0.2;

template <class T>
T activate(Activation act, T z) {
  switch (act) {
    case Activation::none: return z;
    case Activation::elu: return z > T(0) ? z : std::expm1(z);
    case Activation::leaky: return z > T(0) ? z : T(kLeakySlope) * z;
    case Activation::tanh: return std::tanh(z);
    case Activation::sigmoid: return T(1) / (T(1) + std::exp(-z));
    case Activation::relu: return z > T(0) ? z : T(0);
  }
  return z;
}

// Derivative expressed through the activation's output a = act(z).
template <class T>
T activate_grad_from_output(Activation act, T a) {
  switch (act) {
    case Activation::none: return T(1);
    case Activation::elu: return a > T(0) ? T(1) : a + T(1);
    case Activation::leaky: return a > T(0) ? T(1) : T(kLeakySlope);
    case Activation::tanh: return T(1) - a * a;
    case Activation::sigmoid: return a * (T(1) - a);
    case Activation::relu: return a > T(0) ? T(1) : T(0);
  }
  return T(1);
}

template <class T>
Var<T> activation(const Var<T>& a, Activation act) {
  if (act == Activation::none) return a;
  Tensor<T> out = a.value();
  for (auto& v : out.span()) v = activate(act, v);
  return make_result<T>(std::move(out), {a}, [act](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        (*g)[i] += self.grad[i] * activate_grad_from_output(act, self.value[i]);
  });
}

// ---- reductions ----------------------------------------------------------

template <class T>
Var<T> mean(const Var<T>& a) {
  double acc = 0;
  for (T v : a.value().span()) acc += double(v);
  const auto count = a.value().size();
  Tensor<T> out(Shape{}, T(acc / double(count)));
  return make_result<T>(std::move(out), {a}, [count](Node<T>& self) {
    const T g0 = self.grad[0] / T(count);
    if (auto* g = detail::grad_of(self, 0))
      for (auto& v : g->span()) v += g0;
  });
}

// mean |a - b|; b is treated as a constant target.
template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  double acc = 0;
  for (std::size_t i = 0; i < b.size(); ++i) acc += std::abs(double(a.value()[i]) - double(b[i]));
  const auto count = b.size();
  Tensor<T> out(Shape{}, T(acc / double(count)));
  return make_result<T>(std::move(out), {a}, [b, count](Node<T>& self) {
    const T g0 = self.grad[0] / T(count);
    const auto& av = self.parents[0]->value;
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T d = av[i] - b[i];
        (*g)[i] += d > T(0) ? g0 : (d < T(0) ? -g0 : T(0));
      }
  });
}

// Weighted sum of scalar Vars.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ArgumentError("weighted_sum: term/weight count mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) acc += double(weights[i]) * double(terms[i].value().item());
  return make_result<T>(Tensor<T>(Shape{}, T(acc)), terms, [weights](Node<T>& self) {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (auto* g = detail::grad_of(self, i)) (*g)[0] += self.grad[0] * weights[i];
  });
}

// ---- channel plumbing ----------------------------------------------------

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_channels: no inputs");
  Shape s = parts[0].shape();
  int channels = 0;
  for (const auto& p : parts) {
    if (p.shape().n != s.n || p.shape().h != s.h || p.shape().w != s.w)
      throw ShapeError("concat_channels: spatial/batch mismatch " + s.str() + " vs " + p.shape().str());
    channels += p.shape().c;
  }
  Shape os{s.n, channels, s.h, s.w};
  Tensor<T> out(os);
  for (int n = 0; n < s.n; ++n) {
    T* dst = out.sample(n);
    for (const auto& p : parts) {
      const auto count = p.shape().sample();
      std::copy_n(p.value().sample(n), count, dst);
      dst += count;
    }
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& self) {
    const int batch = self.value.n();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const auto count = self.parents[k]->value.shape().sample();
      if (auto* g = detail::grad_of(self, k))
        for (int n = 0; n < batch; ++n) {
          const T* src = self.grad.sample(n) + offset;
          T* dst = g->sample(n);
          for (std::size_t i = 0; i < count; ++i) dst[i] += src[i];
        }
      offset += count;
    }
  });
}

// mask * generated + (1 - mask) * original, mask [N,1,H,W] broadcast over channels.
template <class T>
Var<T> compose(const Var<T>& generated, const Var<T>& original, const Tensor<T>& mask) {
  require_same_shape(generated.shape(), original.shape(), "compose");
  const Shape s = generated.shape();
  if (mask.n() != s.n || mask.c() != 1 || mask.h() != s.h || mask.w() != s.w)
    throw ShapeError("compose: mask " + mask.shape().str() + " does not match image " + s.str());
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* m = mask.plane(n, 0);
      const T* g = generated.value().plane(n, c);
      const T* o = original.value().plane(n, c);
      T* d = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) d[i] = m[i] != T(0) ? g[i] : o[i];
    }
  return make_result<T>(std::move(out), {generated, original}, [mask](Node<T>& self) {
    const Shape s = self.value.shape();
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = detail::grad_of(self, k))
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c) {
            const T* m = mask.plane(n, 0);
            const T* src = self.grad.plane(n, c);
            T* dst = g->plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i)
              if ((m[i] != T(0)) == (k == 0)) dst[i] += src[i];
          }
  });
}

}  // namespace pyragen
