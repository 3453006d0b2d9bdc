#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "txnet/error.hpp"
#include "txnet/shape.hpp"

namespace txnet {

template <class T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

template <Real T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
};

/// Dense row-major tensor handle. The data buffer is fixed at creation; only
/// the gradient buffer changes afterwards. Copies share the same node.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node<T>>()) {
    if (shape.numel() != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
    }
    node_->shape = shape;
    node_->data = std::move(data);
  }

  static Tensor full(Shape shape, T value) { return Tensor(shape, std::vector<T>(shape.numel(), value)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.rank(); }

  std::span<const T> data() const { return node_->data; }
  /// Writable view of the values; shared by every handle to this node.
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    auto d = node_->shape.nchw();
    return node_->data[((n * d[1] + c) * d[2] + h) * d[3] + w];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy with a fresh node (no gradient, no tracking).
  Tensor clone() const { return Tensor(node_->shape, node_->data); }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <Real T>
class Tape;

namespace detail {
template <Real T>
inline thread_local Tape<T>* active_tape = nullptr;
}  // namespace detail

/// Ordered record of differentiable operations. Ops are appended as they
/// execute, so inputs always precede consumers; backward() walks the record
/// once in reverse.
template <Real T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  struct Op {
    std::string name;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void(std::span<const T>)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return ops_.size(); }
  const std::vector<Op>& ops() const { return ops_; }

  void push(Op op) {
    if (consumed_) throw ContractError("tape already consumed by backward()");
    ops_.push_back(std::move(op));
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every tracked node.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a single-element loss, got shape " + loss.shape().str());
    }
    if (consumed_) throw ContractError("backward() called twice on the same tape");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    auto& g = loss.node()->grad;
    if (g.empty()) g.assign(1, T(0));
    g[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward(it->output->grad);
    }
  }

 private:
  std::vector<Op> ops_;
  bool consumed_ = false;
};

/// Makes `tape` the recording target on this thread for the scope's lifetime.
template <Real T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape<T>) { detail::active_tape<T> = &tape; }
  ~TapeScope() { detail::active_tape<T> = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Thread-local multiply-accumulate tally, filled by the nn ops while a
/// FlopScope is alive. Used to cross-check the analytic cost model.
struct FlopTally {
  std::uint64_t flops = 0;
};

namespace detail {
inline thread_local FlopTally* active_tally = nullptr;
}  // namespace detail

class FlopScope {
 public:
  explicit FlopScope(FlopTally& tally) : previous_(detail::active_tally) { detail::active_tally = &tally; }
  ~FlopScope() { detail::active_tally = previous_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopTally* previous_;
};

namespace detail {

inline void count_flops(std::uint64_t n) {
  if (active_tally) active_tally->flops += n;
}

#if !defined(NDEBUG) || defined(TXNET_CHECK_FINITE)
inline constexpr bool kCheckFinite = true;
#else
inline constexpr bool kCheckFinite = false;
#endif

template <Real T>
void check_finite(const Tensor<T>& t, std::string_view op) {
  if constexpr (kCheckFinite) {
    for (T v : t.data()) {
      if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
}

/// Lazily allocated gradient buffer, or an empty span if the node is untracked.
template <Real T>
std::span<T> grad_of(const std::shared_ptr<Node<T>>& n) {
  if (!n->requires_grad) return {};
  if (n->grad.empty()) n->grad.assign(n->data.size(), T(0));
  return n->grad;
}

/// Wraps a freshly computed output, and records it on the active tape when
/// any input is tracked. `backward` receives d(loss)/d(output).
template <Real T, class Fn>
Tensor<T> finish(std::string_view name, Tensor<T> out, std::initializer_list<Tensor<T>> inputs, Fn&& backward) {
  check_finite(out, name);
  Tape<T>* tape = active_tape<T>;
  if (tape == nullptr) return out;
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || (in.defined() && in.requires_grad());
  if (!tracked) return out;
  out.set_requires_grad(true);
  typename Tape<T>::Op op;
  op.name = std::string(name);
  for (const auto& in : inputs)
    if (in.defined()) op.inputs.push_back(in.node());
  op.output = out.node();
  op.backward = std::forward<Fn>(backward);
  tape->push(std::move(op));
  return out;
}

template <Real T>
Tensor<T> finish_list(std::string_view name, Tensor<T> out, const std::vector<Tensor<T>>& inputs,
                      std::function<void(std::span<const T>)> backward) {
  check_finite(out, name);
  Tape<T>* tape = active_tape<T>;
  if (tape == nullptr) return out;
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  if (!tracked) return out;
  out.set_requires_grad(true);
  typename Tape<T>::Op op;
  op.name = std::string(name);
  for (const auto& in : inputs) op.inputs.push_back(in.node());
  op.output = out.node();
  op.backward = std::move(backward);
  tape->push(std::move(op));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Creation

template <Real T>
Tensor<T> full(Shape shape, T value) {
  return Tensor<T>::full(shape, value);
}
template <Real T>
Tensor<T> zeros(Shape shape) {
  return Tensor<T>::full(shape, T(0));
}
template <Real T>
Tensor<T> ones(Shape shape) {
  return Tensor<T>::full(shape, T(1));
}
template <Real T>
Tensor<T> scalar(T value) {
  return Tensor<T>(Shape{1}, {value});
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class Broadcast { kSame, kPerChannel };

template <Real T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, std::string_view op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (a.rank() == 4 && b.rank() == 4 && b.dim(0) == 1 && b.dim(1) == a.dim(1) && b.dim(2) == 1 && b.dim(3) == 1) {
    return Broadcast::kPerChannel;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape().str() + " and " + b.shape().str());
}

}  // namespace detail

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  if (kind == detail::Broadcast::kSame) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  } else {
    const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        T* p = out.data() + (i * c + j) * hw;
        for (std::size_t k = 0; k < hw; ++k) p[k] += bd[j];
      }
  }
  auto an = a.node(), bn = b.node();
  return detail::finish<T>("add", Tensor<T>(a.shape(), std::move(out)), {a, b}, [an, bn, kind](std::span<const T> g) {
    if (auto ga = detail::grad_of(an); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = detail::grad_of(bn); !gb.empty()) {
      if (kind == detail::Broadcast::kSame) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      } else {
        const auto& s = an->shape;
        const std::size_t hw = s[2] * s[3];
        for (std::size_t i = 0; i < s[0]; ++i)
          for (std::size_t j = 0; j < s[1]; ++j) {
            const T* p = g.data() + (i * s[1] + j) * hw;
            T acc = 0;
            for (std::size_t k = 0; k < hw; ++k) acc += p[k];
            gb[j] += acc;
          }
      }
    }
  });
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind(a, b, "mul");
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  const std::size_t hw = a.rank() == 4 ? a.dim(2) * a.dim(3) : 1;
  const std::size_t c = a.rank() == 4 ? a.dim(1) : 1;
  auto bval = [&](std::size_t i) { return kind == detail::Broadcast::kSame ? bd[i] : bd[(i / hw) % c]; };
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bval(i);
  auto an = a.node(), bn = b.node();
  return detail::finish<T>("mul", Tensor<T>(a.shape(), std::move(out)), {a, b},
                           [an, bn, kind, hw, c](std::span<const T> g) {
                             const auto& ad = an->data;
                             const auto& bdd = bn->data;
                             auto bidx = [&](std::size_t i) {
                               return kind == detail::Broadcast::kSame ? i : (i / hw) % c;
                             };
                             if (auto ga = detail::grad_of(an); !ga.empty())
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bdd[bidx(i)];
                             if (auto gb = detail::grad_of(bn); !gb.empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gb[bidx(i)] += g[i] * ad[i];
                           });
}

template <Real T>
Tensor<T> add(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  auto an = a.node();
  return detail::finish<T>("add_scalar", Tensor<T>(a.shape(), std::move(out)), {a}, [an](std::span<const T> g) {
    if (auto ga = detail::grad_of(an); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  auto an = a.node();
  return detail::finish<T>("scale", Tensor<T>(a.shape(), std::move(out)), {a}, [an, s](std::span<const T> g) {
    if (auto ga = detail::grad_of(an); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return mul(a, s);
}

/// Sum of all elements, as a [1] tensor.
template <Real T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto an = a.node();
  return detail::finish<T>("sum", scalar(acc), {a}, [an](std::span<const T> g) {
    if (auto ga = detail::grad_of(an); !ga.empty())
      for (auto& v : ga) v += g[0];
  });
}

/// Copying reshape; element order is unchanged.
template <Real T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape.numel() != a.numel()) {
    throw ShapeError("reshape: " + a.shape().str() + " cannot become " + shape.str());
  }
  auto an = a.node();
  return detail::finish<T>("reshape", Tensor<T>(shape, std::vector<T>(a.data().begin(), a.data().end())), {a},
                           [an](std::span<const T> g) {
                             if (auto ga = detail::grad_of(an); !ga.empty())
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           });
}

// ---------------------------------------------------------------------------
// Channel split / concat (axis 1 of a rank-4 tensor)

template <Real T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const std::size_t> sizes) {
  if (x.rank() != 4) throw ShapeError("split_channels expects a rank-4 tensor, got " + x.shape().str());
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::size_t total = 0;
  for (auto s : sizes) {
    if (s == 0) throw SplitError("split_channels: empty part");
    total += s;
  }
  if (total != c) {
    throw SplitError("split_channels: parts sum to " + std::to_string(total) + " but tensor has " +
                     std::to_string(c) + " channels");
  }
  std::vector<Tensor<T>> out;
  std::size_t offset = 0;
  auto xn = x.node();
  for (auto part : sizes) {
    std::vector<T> buf(n * part * hw);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = xd.data() + (i * c + offset) * hw;
      std::copy(src, src + part * hw, buf.data() + i * part * hw);
    }
    out.push_back(detail::finish<T>("split_channels", Tensor<T>(Shape{n, part, x.dim(2), x.dim(3)}, std::move(buf)),
                                    {x}, [xn, offset, part, n, c, hw](std::span<const T> g) {
                                      auto gx = detail::grad_of(xn);
                                      if (gx.empty()) return;
                                      for (std::size_t i = 0; i < n; ++i) {
                                        T* dst = gx.data() + (i * c + offset) * hw;
                                        const T* src = g.data() + i * part * hw;
                                        for (std::size_t k = 0; k < part * hw; ++k) dst[k] += src[k];
                                      }
                                    }));
    offset += part;
  }
  return out;
}

template <Real T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::size_t parts) {
  if (x.rank() != 4) throw ShapeError("split_channels expects a rank-4 tensor, got " + x.shape().str());
  if (parts == 0 || x.dim(1) % parts != 0) {
    throw SplitError("split_channels: " + std::to_string(x.dim(1)) + " channels not divisible into " +
                     std::to_string(parts) + " parts");
  }
  std::vector<std::size_t> sizes(parts, x.dim(1) / parts);
  return split_channels(x, std::span<const std::size_t>(sizes));
}

template <Real T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& first = xs.front();
  if (first.rank() != 4) throw ShapeError("concat_channels expects rank-4 tensors");
  const std::size_t n = first.dim(0), h = first.dim(2), w = first.dim(3), hw = h * w;
  std::size_t c = 0;
  for (const auto& x : xs) {
    if (x.rank() != 4 || x.dim(0) != n || x.dim(2) != h || x.dim(3) != w) {
      throw ShapeError("concat_channels: " + x.shape().str() + " does not match " + first.shape().str());
    }
    c += x.dim(1);
  }
  std::vector<T> buf(n * c * hw);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    offsets.push_back(offset);
    const std::size_t part = x.dim(1);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(xd.data() + i * part * hw, xd.data() + (i + 1) * part * hw, buf.data() + (i * c + offset) * hw);
    }
    offset += part;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  return detail::finish_list<T>(
      "concat_channels", Tensor<T>(Shape{n, c, h, w}, std::move(buf)), xs,
      [nodes, offsets, n, c, hw](std::span<const T> g) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          auto gx = detail::grad_of(nodes[k]);
          if (gx.empty()) continue;
          const std::size_t part = nodes[k]->shape[1];
          for (std::size_t i = 0; i < n; ++i) {
            const T* src = g.data() + (i * c + offsets[k]) * hw;
            T* dst = gx.data() + i * part * hw;
            for (std::size_t j = 0; j < part * hw; ++j) dst[j] += src[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------

template <Real T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

template <Real To, Real From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.numel());
  auto d = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(d[i]);
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace txnet
