#pragma once

// Dual dynamic token mixer: input-dependent depthwise convolution (local),
// overlapping spatial-reduction attention (global), and the squeezed token
// enhancer that fuses the two branches.

#include <cmath>
#include <string>
#include <vector>

#include "txnet/config.hpp"
#include "txnet/layers.hpp"
#include "txnet/nn_ops.hpp"
#include "txnet/param_store.hpp"

namespace txnet {

// ---------------------------------------------------------------------------
// IDConv

struct IdConvShape {
  std::size_t channels = 0;
  std::size_t kernel_size = 7;
  std::size_t groups = 2;
  std::size_t reduction = 4;

  std::size_t squeezed() const { return channels / reduction; }
};

template <Real T>
struct IdConvParams {
  IdConvShape shape;
  Conv2dParams<T> squeeze;  // C -> C/r, 1x1
  Conv2dParams<T> expand;   // C/r -> G*C, 1x1
  Tensor<T> kernel_bank;    // [G, C, K, K]
};

/// Intermediate values exposed for inspection.
template <Real T>
struct IdConvTrace {
  Tensor<T> attention;  // [N, G, C, K*K], softmax over G
  Tensor<T> kernels;    // [N, C, K, K]
};

inline void append_idconv(ParamManifest& m, const std::string& prefix, const IdConvShape& s) {
  if (s.squeezed() < 1) throw ConfigError(prefix + ": IDConv squeeze width is zero");
  append_pointwise(m, prefix + ".squeeze", s.channels, s.squeezed());
  append_pointwise(m, prefix + ".expand", s.squeezed(), s.groups * s.channels);
  m.push_back({prefix + ".kernel_bank", Shape{s.groups, s.channels, s.kernel_size, s.kernel_size},
               Init::kTruncNormal, true});
}

template <Real T>
IdConvParams<T> bind_idconv(const ParamStore<T>& store, const std::string& prefix, const IdConvShape& s) {
  IdConvParams<T> p;
  p.shape = s;
  p.squeeze = bind_pointwise(store, prefix + ".squeeze", s.channels, s.squeezed());
  p.expand = bind_pointwise(store, prefix + ".expand", s.squeezed(), s.groups * s.channels);
  p.kernel_bank = store.get(prefix + ".kernel_bank");
  const Shape want{s.groups, s.channels, s.kernel_size, s.kernel_size};
  if (!(p.kernel_bank.shape() == want)) {
    throw ShapeError(prefix + ".kernel_bank: shape " + p.kernel_bank.shape().str() + ", expected " + want.str());
  }
  return p;
}

/// Pool to KxK, squeeze/expand, softmax over the G kernel banks, blend.
template <Real T>
Tensor<T> idconv_generate_kernels(const Tensor<T>& x, const IdConvParams<T>& p, IdConvTrace<T>* trace = nullptr) {
  const auto& s = p.shape;
  if (x.rank() != 4 || x.dim(1) != s.channels) {
    throw ShapeError("idconv: input " + x.shape().str() + " does not have " + std::to_string(s.channels) +
                     " channels");
  }
  const std::size_t n = x.dim(0), k = s.kernel_size;
  auto pooled = adaptive_avg_pool(x, k, k);
  auto logits = conv2d(conv2d(pooled, p.squeeze), p.expand);
  auto attn = softmax(reshape(logits, Shape{n, s.groups, s.channels, k * k}), 1);
  auto kernels = blend_kernels(attn, p.kernel_bank);
  if (trace) {
    trace->attention = attn;
    trace->kernels = kernels;
  }
  return kernels;
}

template <Real T>
Tensor<T> idconv_forward(const Tensor<T>& x, const IdConvParams<T>& p, IdConvTrace<T>* trace = nullptr) {
  if (p.shape.kernel_size % 2 == 0) throw ContractError("idconv: kernel size must be odd");
  auto kernels = idconv_generate_kernels(x, p, trace);
  return depthwise_conv_per_sample(x, kernels, (p.shape.kernel_size - 1) / 2);
}

// ---------------------------------------------------------------------------
// OSRA

struct OsraShape {
  std::size_t channels = 0;
  std::size_t heads = 1;
  std::size_t sr_stride = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t head_dim() const { return channels / heads; }
  std::size_t sr_kernel() const { return sr_stride + 3; }
  std::size_t sr_padding() const { return sr_kernel() / 2; }
  std::size_t kv_height() const { return static_cast<std::size_t>(osr_extent(int(height), int(sr_stride))); }
  std::size_t kv_width() const { return static_cast<std::size_t>(osr_extent(int(width), int(sr_stride))); }
  std::size_t query_tokens() const { return height * width; }
  std::size_t kv_tokens() const { return kv_height() * kv_width(); }
  Shape rel_bias_shape() const { return Shape{heads, query_tokens(), kv_tokens()}; }
};

template <Real T>
struct OsraParams {
  OsraShape shape;
  Conv2dParams<T> sr_conv;  // depthwise, kernel S+3, stride S; unset when S == 1
  NormParams<T> sr_norm;
  Conv2dParams<T> lr_conv;  // depthwise 3x3 local refinement
  Tensor<T> q_weight, q_bias;
  Tensor<T> kv_weight, kv_bias;
  Tensor<T> rel_bias;  // [H, N_q, N_kv]
};

template <Real T>
struct OsraTrace {
  Tensor<T> attention;  // [N, H, N_q, N_kv]
};

inline void append_rel_bias(ParamManifest& m, const std::string& name, const OsraShape& s) {
  m.push_back({name, s.rel_bias_shape(), Init::kZeros, true});
}

/// With `own_rel_bias` false the bias table is expected under a separate
/// (shared) name passed to bind_osra.
inline void append_osra(ParamManifest& m, const std::string& prefix, const OsraShape& s, bool own_rel_bias = true) {
  if (s.heads == 0 || s.channels % s.heads != 0) throw ConfigError(prefix + ": channels not divisible by heads");
  if (s.sr_stride > 1) {
    append_conv(m, prefix + ".sr.conv", s.channels, s.channels, s.sr_kernel(), s.channels);
    append_norm(m, prefix + ".sr.norm", s.channels);
  }
  append_depthwise(m, prefix + ".lr", s.channels, 3);
  append_linear(m, prefix + ".q", s.channels, s.channels);
  append_linear(m, prefix + ".kv", s.channels, 2 * s.channels);
  if (own_rel_bias) append_rel_bias(m, prefix + ".rel_bias", s);
}

template <Real T>
OsraParams<T> bind_osra(const ParamStore<T>& store, const std::string& prefix, const OsraShape& s,
                        const std::string& rel_bias_name = "") {
  OsraParams<T> p;
  p.shape = s;
  if (s.sr_stride > 1) {
    p.sr_conv = bind_conv(store, prefix + ".sr.conv", s.channels, s.channels, s.sr_kernel(), s.sr_stride,
                          s.sr_padding(), s.channels);
    p.sr_norm = bind_norm(store, prefix + ".sr.norm", s.channels);
  }
  p.lr_conv = bind_depthwise(store, prefix + ".lr", s.channels, 3);
  p.q_weight = store.get(prefix + ".q.weight");
  p.q_bias = store.get(prefix + ".q.bias");
  p.kv_weight = store.get(prefix + ".kv.weight");
  p.kv_bias = store.get(prefix + ".kv.bias");
  p.rel_bias = store.get(rel_bias_name.empty() ? prefix + ".rel_bias" : rel_bias_name);
  return p;
}

/// Multi-head attention with queries from every token of x and keys/values
/// from the overlapping-reduced, locally refined map.
template <Real T>
Tensor<T> osra_forward(const Tensor<T>& x, const OsraParams<T>& p, OsraTrace<T>* trace = nullptr) {
  const auto& s = p.shape;
  if (x.rank() != 4 || x.dim(1) != s.channels) {
    throw ShapeError("osra: input " + x.shape().str() + " does not have " + std::to_string(s.channels) + " channels");
  }
  if (s.channels % s.heads != 0) throw ConfigError("osra: channels not divisible by heads");
  if (x.dim(2) != s.height || x.dim(3) != s.width) {
    throw ConfigError("osra: input resolution " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                      " does not match the bound " + std::to_string(s.height) + "x" + std::to_string(s.width));
  }
  if (!(p.rel_bias.shape() == s.rel_bias_shape())) {
    throw ConfigError("osra: relative position bias " + p.rel_bias.shape().str() + " does not match " +
                      s.rel_bias_shape().str());
  }
  Tensor<T> reduced = x;
  if (s.sr_stride > 1) reduced = batch_norm_inference(conv2d(x, p.sr_conv), p.sr_norm);
  auto refined = add(reduced, conv2d(reduced, p.lr_conv));

  auto q = split_heads(linear(to_tokens(x), p.q_weight, p.q_bias), s.heads);
  auto kv = split_heads(linear(to_tokens(refined), p.kv_weight, p.kv_bias), 2 * s.heads);
  auto kv_parts = split_channels(kv, 2);  // first H heads are keys, the rest values

  const T inv_sqrt_d = T(1) / std::sqrt(T(s.head_dim()));
  auto logits = add_shared_bias(mul(matmul_nt(q, kv_parts[0]), inv_sqrt_d), p.rel_bias);
  auto attn = softmax(logits, 3);
  if (trace) trace->attention = attn;
  auto z = merge_heads(matmul_nn(attn, kv_parts[1]));
  return from_tokens(z, s.height, s.width);
}

// ---------------------------------------------------------------------------
// STE

struct SteShape {
  std::size_t channels = 0;
  std::size_t reduction = 8;
  std::size_t min_channels = 16;

  std::size_t squeezed() const {
    return static_cast<std::size_t>(ste_squeezed_channels(int(channels), int(reduction), int(min_channels)));
  }
};

template <Real T>
struct SteParams {
  SteShape shape;
  Conv2dParams<T> dw;       // depthwise 3x3
  Conv2dParams<T> squeeze;  // C -> C_s
  Conv2dParams<T> expand;   // C_s -> C
};

inline void append_ste(ParamManifest& m, const std::string& prefix, const SteShape& s) {
  append_depthwise(m, prefix + ".dw", s.channels, 3);
  append_pointwise(m, prefix + ".squeeze", s.channels, s.squeezed());
  append_pointwise(m, prefix + ".expand", s.squeezed(), s.channels);
}

template <Real T>
SteParams<T> bind_ste(const ParamStore<T>& store, const std::string& prefix, const SteShape& s) {
  SteParams<T> p;
  p.shape = s;
  p.dw = bind_depthwise(store, prefix + ".dw", s.channels, 3);
  p.squeeze = bind_pointwise(store, prefix + ".squeeze", s.channels, s.squeezed());
  p.expand = bind_pointwise(store, prefix + ".expand", s.squeezed(), s.channels);
  return p;
}

template <Real T>
Tensor<T> ste_forward(const Tensor<T>& x, const SteParams<T>& p) {
  if (x.rank() != 4 || x.dim(1) != p.shape.channels) {
    throw ShapeError("ste: input " + x.shape().str() + " does not have " + std::to_string(p.shape.channels) +
                     " channels");
  }
  return add(conv2d(conv2d(conv2d(x, p.dw), p.squeeze), p.expand), x);
}

// ---------------------------------------------------------------------------
// D-Mixer

struct DMixerShape {
  std::size_t channels = 0;
  std::size_t attention_channels = 0;  // first ceil(ratio*C) channels go to OSRA
  OsraShape osra;
  IdConvShape idconv;
  SteShape ste;

  std::size_t conv_channels() const { return channels - attention_channels; }
};

/// Shapes of one stage's mixer as derived from a model config.
inline DMixerShape dmixer_shape(const ModelConfig& cfg, const StageConfig& st) {
  DMixerShape s;
  s.channels = std::size_t(st.channels);
  s.attention_channels = std::size_t(attention_channels(cfg, st.channels));
  s.osra = {s.attention_channels, std::size_t(st.heads), std::size_t(st.sr_stride), std::size_t(st.height),
            std::size_t(st.width)};
  s.idconv = {s.channels - s.attention_channels, std::size_t(st.kernel_size), std::size_t(st.groups),
              std::size_t(cfg.idconv_reduction)};
  s.ste = {s.channels, std::size_t(cfg.ste_reduction), std::size_t(cfg.ste_min_channels)};
  return s;
}

template <Real T>
struct DMixerParams {
  DMixerShape shape;
  OsraParams<T> osra;
  IdConvParams<T> idconv;
  SteParams<T> ste;
};

template <Real T>
struct DMixerTrace {
  Tensor<T> osra_out;
  Tensor<T> idconv_out;
  Tensor<T> fused;  // concat before STE
  OsraTrace<T> osra;
  IdConvTrace<T> idconv;
};

inline void append_dmixer(ParamManifest& m, const std::string& prefix, const DMixerShape& s,
                          bool own_rel_bias = true) {
  append_osra(m, prefix + ".osra", s.osra, own_rel_bias);
  append_idconv(m, prefix + ".idconv", s.idconv);
  append_ste(m, prefix + ".ste", s.ste);
}

template <Real T>
DMixerParams<T> bind_dmixer(const ParamStore<T>& store, const std::string& prefix, const DMixerShape& s,
                            const std::string& rel_bias_name = "") {
  DMixerParams<T> p;
  p.shape = s;
  p.osra = bind_osra(store, prefix + ".osra", s.osra, rel_bias_name);
  p.idconv = bind_idconv(store, prefix + ".idconv", s.idconv);
  p.ste = bind_ste(store, prefix + ".ste", s.ste);
  return p;
}

template <Real T>
Tensor<T> dmixer_forward(const Tensor<T>& x, const DMixerParams<T>& p, DMixerTrace<T>* trace = nullptr) {
  const auto& s = p.shape;
  if (x.rank() != 4 || x.dim(1) != s.channels) {
    throw ShapeError("dmixer: input " + x.shape().str() + " does not have " + std::to_string(s.channels) +
                     " channels");
  }
  const std::size_t sizes[] = {s.attention_channels, s.conv_channels()};
  auto parts = split_channels(x, std::span<const std::size_t>(sizes));
  auto global = osra_forward(parts[0], p.osra, trace ? &trace->osra : nullptr);
  auto local = idconv_forward(parts[1], p.idconv, trace ? &trace->idconv : nullptr);
  auto fused = concat_channels(std::vector<Tensor<T>>{global, local});
  if (trace) {
    trace->osra_out = global;
    trace->idconv_out = local;
    trace->fused = fused;
  }
  return ste_forward(fused, p.ste);
}

}  // namespace txnet
