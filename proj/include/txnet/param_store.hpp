#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "txnet/random.hpp"
#include "txnet/tensor.hpp"

namespace txnet {

enum class Init { kTruncNormal, kZeros, kOnes };

inline constexpr double kInitStd = 0.02;

/// Declaration of one named tensor: shape, initializer, and whether it is a
/// learnable parameter (BN running statistics are not).
struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::kTruncNormal;
  bool trainable = true;
};

using ParamManifest = std::vector<ParamSpec>;

/// Named tensors in insertion order. Names are unique.
template <Real T>
class ParamStore {
 public:
  struct Entry {
    ParamSpec spec;
    Tensor<T> tensor;
  };

  void add(ParamSpec spec, Tensor<T> tensor) {
    if (index_.contains(spec.name)) throw ConfigError("duplicate parameter name " + spec.name);
    if (!(tensor.shape() == spec.shape)) {
      throw ShapeError(spec.name + ": tensor shape " + tensor.shape().str() + " does not match " + spec.shape.str());
    }
    index_.emplace(spec.name, entries_.size());
    tensor.set_requires_grad(spec.trainable);
    entries_.push_back({std::move(spec), std::move(tensor)});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t size() const { return entries_.size(); }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  ParamManifest manifest() const {
    ParamManifest out;
    for (const auto& e : entries_) out.push_back(e.spec);
    return out;
  }

  /// Toggles gradient tracking on every trainable entry.
  void set_requires_grad(bool on) {
    for (auto& e : entries_) e.tensor.set_requires_grad(on && e.spec.trainable);
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::uint64_t trainable_count() const {
    std::uint64_t n = 0;
    for (const auto& e : entries_)
      if (e.spec.trainable) n += e.tensor.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Tensor for one spec, drawn from the stream keyed by the spec's name.
template <Real T>
Tensor<T> init_tensor(const ParamSpec& spec, std::uint64_t seed) {
  std::vector<T> data(spec.shape.numel());
  switch (spec.init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      std::fill(data.begin(), data.end(), T(1));
      break;
    case Init::kTruncNormal: {
      RandomStream rng(seed, spec.name);
      for (auto& v : data) v = static_cast<T>(rng.truncated_normal(kInitStd));
      break;
    }
  }
  return Tensor<T>(spec.shape, std::move(data));
}

template <Real T>
ParamStore<T> initialize(const ParamManifest& manifest, std::uint64_t seed) {
  ParamStore<T> store;
  for (const auto& spec : manifest) store.add(spec, init_tensor<T>(spec, seed));
  return store;
}

// ---------------------------------------------------------------------------
// Manifest builders for the common layer kinds

inline void append_conv(ParamManifest& m, const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                        std::size_t groups, bool bias = true) {
  m.push_back({prefix + ".weight", Shape{out, in / groups, k, k}, Init::kTruncNormal, true});
  if (bias) m.push_back({prefix + ".bias", Shape{out}, Init::kZeros, true});
}

inline void append_norm(ParamManifest& m, const std::string& prefix, std::size_t c) {
  m.push_back({prefix + ".weight", Shape{c}, Init::kOnes, true});
  m.push_back({prefix + ".bias", Shape{c}, Init::kZeros, true});
  m.push_back({prefix + ".running_mean", Shape{c}, Init::kZeros, false});
  m.push_back({prefix + ".running_var", Shape{c}, Init::kOnes, false});
}

inline void append_linear(ParamManifest& m, const std::string& prefix, std::size_t in, std::size_t out,
                          bool bias = true) {
  m.push_back({prefix + ".weight", Shape{out, in}, Init::kTruncNormal, true});
  if (bias) m.push_back({prefix + ".bias", Shape{out}, Init::kZeros, true});
}

}  // namespace txnet
