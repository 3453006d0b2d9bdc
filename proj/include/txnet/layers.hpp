#pragma once

#include <string>

#include "txnet/nn_ops.hpp"
#include "txnet/param_store.hpp"

namespace txnet {

template <Real T>
Conv2dParams<T> bind_conv(const ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                          std::size_t k, std::size_t stride, std::size_t pad, std::size_t groups, bool bias = true) {
  Conv2dParams<T> p;
  p.in_channels = in;
  p.out_channels = out;
  p.kernel_h = p.kernel_w = k;
  p.stride = stride;
  p.padding = pad;
  p.groups = groups;
  p.weight = store.get(prefix + ".weight");
  if (bias) p.bias = store.get(prefix + ".bias");
  return p;
}

template <Real T>
Conv2dParams<T> bind_pointwise(const ParamStore<T>& store, const std::string& prefix, std::size_t in,
                               std::size_t out) {
  return bind_conv(store, prefix, in, out, 1, 1, 0, 1);
}

/// Depthwise "same" convolution with an odd kernel.
template <Real T>
Conv2dParams<T> bind_depthwise(const ParamStore<T>& store, const std::string& prefix, std::size_t c, std::size_t k) {
  return bind_conv(store, prefix, c, c, k, 1, k / 2, c);
}

template <Real T>
NormParams<T> bind_norm(const ParamStore<T>& store, const std::string& prefix, std::size_t c) {
  NormParams<T> p;
  p.num_channels = c;
  p.scale = store.get(prefix + ".weight");
  p.shift = store.get(prefix + ".bias");
  p.running_mean = store.get(prefix + ".running_mean");
  p.running_var = store.get(prefix + ".running_var");
  return p;
}

inline void append_depthwise(ParamManifest& m, const std::string& prefix, std::size_t c, std::size_t k) {
  append_conv(m, prefix, c, c, k, c);
}

inline void append_pointwise(ParamManifest& m, const std::string& prefix, std::size_t in, std::size_t out) {
  append_conv(m, prefix, in, out, 1, 1);
}

}  // namespace txnet
