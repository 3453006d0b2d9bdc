#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "txnet/config.hpp"
#include "txnet/layers.hpp"
#include "txnet/mixer.hpp"
#include "txnet/nn_ops.hpp"
#include "txnet/param_store.hpp"

namespace txnet {

// ---------------------------------------------------------------------------
// MS-FFN

struct MsFfnShape {
  std::size_t channels = 0;
  std::size_t expansion = 4;
  std::vector<std::size_t> scales{1, 3, 5, 7};

  std::size_t hidden() const { return channels * expansion; }
  std::size_t group_channels() const { return hidden() / scales.size(); }
};

template <Real T>
struct MsFfnParams {
  MsFfnShape shape;
  Conv2dParams<T> fc1;
  std::vector<Conv2dParams<T>> scale_convs;  // one depthwise conv per scale
  Conv2dParams<T> fc2;
};

inline void append_msffn(ParamManifest& m, const std::string& prefix, const MsFfnShape& s) {
  if (s.scales.empty() || s.hidden() % s.scales.size() != 0) {
    throw ConfigError(prefix + ": hidden width " + std::to_string(s.hidden()) + " not divisible by " +
                      std::to_string(s.scales.size()) + " scales");
  }
  append_pointwise(m, prefix + ".fc1", s.channels, s.hidden());
  for (std::size_t i = 0; i < s.scales.size(); ++i) {
    append_depthwise(m, prefix + ".dw" + std::to_string(i), s.group_channels(), s.scales[i]);
  }
  append_pointwise(m, prefix + ".fc2", s.hidden(), s.channels);
}

template <Real T>
MsFfnParams<T> bind_msffn(const ParamStore<T>& store, const std::string& prefix, const MsFfnShape& s) {
  MsFfnParams<T> p;
  p.shape = s;
  p.fc1 = bind_pointwise(store, prefix + ".fc1", s.channels, s.hidden());
  for (std::size_t i = 0; i < s.scales.size(); ++i) {
    p.scale_convs.push_back(bind_depthwise(store, prefix + ".dw" + std::to_string(i), s.group_channels(), s.scales[i]));
  }
  p.fc2 = bind_pointwise(store, prefix + ".fc2", s.hidden(), s.channels);
  return p;
}

/// fc1 -> GELU -> per-scale depthwise convs over equal channel groups ->
/// concat -> GELU -> fc2.
template <Real T>
Tensor<T> msffn_forward(const Tensor<T>& x, const MsFfnParams<T>& p) {
  const auto& s = p.shape;
  if (s.hidden() % s.scales.size() != 0) throw ConfigError("msffn: hidden width not divisible by scale count");
  auto h = gelu(conv2d(x, p.fc1));
  auto groups = split_channels(h, s.scales.size());
  std::vector<Tensor<T>> outs;
  outs.reserve(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) outs.push_back(conv2d(groups[i], p.scale_convs[i]));
  return conv2d(gelu(concat_channels(outs)), p.fc2);
}

// ---------------------------------------------------------------------------
// DPE and patch embedding

template <Real T>
Tensor<T> dpe_forward(const Tensor<T>& x, const Conv2dParams<T>& dw7) {
  return add(conv2d(x, dw7), x);
}

template <Real T>
struct PatchEmbedParams {
  Conv2dParams<T> conv;
  NormParams<T> norm;
};

/// Stage 0: 7x7 stride 4 (pad 3); later stages: 3x3 stride 2 (pad 1). Both
/// followed by BN.
inline void append_patch_embed(ParamManifest& m, const std::string& prefix, std::size_t in, std::size_t out,
                               bool stem) {
  append_conv(m, prefix + ".conv", in, out, stem ? 7 : 3, 1);
  append_norm(m, prefix + ".norm", out);
}

template <Real T>
PatchEmbedParams<T> bind_patch_embed(const ParamStore<T>& store, const std::string& prefix, std::size_t in,
                                     std::size_t out, bool stem) {
  PatchEmbedParams<T> p;
  p.conv = stem ? bind_conv(store, prefix + ".conv", in, out, 7, 4, 3, 1) : bind_conv(store, prefix + ".conv", in, out, 3, 2, 1, 1);
  p.norm = bind_norm(store, prefix + ".norm", out);
  return p;
}

template <Real T>
Tensor<T> patch_embed(const Tensor<T>& x, const PatchEmbedParams<T>& p) {
  const std::size_t stride = p.conv.stride;
  if (x.rank() != 4 || x.dim(2) % stride != 0 || x.dim(3) % stride != 0) {
    throw ConfigError("patch_embed: resolution " + (x.rank() == 4 ? std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) : x.shape().str()) +
                      " not divisible by stride " + std::to_string(stride));
  }
  return batch_norm_inference(conv2d(x, p.conv), p.norm);
}

// ---------------------------------------------------------------------------
// Blocks and the model

template <Real T>
struct BlockParams {
  MixerMode mode = MixerMode::kDMixer;
  Conv2dParams<T> dpe;
  NormParams<T> norm1;
  DMixerParams<T> dmixer;
  Conv2dParams<T> local_dw;  // dwconv_baseline mixer
  SteParams<T> local_ste;    // dwconv_baseline mixer
  NormParams<T> norm2;
  MsFfnParams<T> ffn;
};

/// Mixer-level intermediates of one block.
template <Real T>
struct BlockTrace {
  Tensor<T> dpe;
  Tensor<T> mixer;
  DMixerTrace<T> dmixer;
};

inline std::string stage_name(std::size_t i) { return "stage" + std::to_string(i); }
inline std::string block_name(std::size_t i, std::size_t j) {
  return stage_name(i) + ".block" + std::to_string(j);
}

inline MsFfnShape msffn_shape(const ModelConfig& cfg, const StageConfig& st) {
  MsFfnShape s;
  s.channels = std::size_t(st.channels);
  s.expansion = std::size_t(st.expansion);
  s.scales.assign(cfg.ffn_scales.begin(), cfg.ffn_scales.end());
  return s;
}

inline void append_block(ParamManifest& m, const std::string& prefix, const ModelConfig& cfg,
                         const StageConfig& st) {
  const auto c = std::size_t(st.channels);
  append_depthwise(m, prefix + ".dpe", c, 7);
  append_norm(m, prefix + ".norm1", c);
  if (cfg.mixer_mode == MixerMode::kDMixer) {
    append_dmixer(m, prefix + ".mixer", dmixer_shape(cfg, st), /*own_rel_bias=*/false);
  } else {
    append_depthwise(m, prefix + ".mixer.dw", c, 7);
    append_ste(m, prefix + ".mixer.ste", dmixer_shape(cfg, st).ste);
  }
  append_norm(m, prefix + ".norm2", c);
  append_msffn(m, prefix + ".ffn", msffn_shape(cfg, st));
}

template <Real T>
BlockParams<T> bind_block(const ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                          const StageConfig& st, const std::string& rel_bias_name) {
  const auto c = std::size_t(st.channels);
  BlockParams<T> p;
  p.mode = cfg.mixer_mode;
  p.dpe = bind_depthwise(store, prefix + ".dpe", c, 7);
  p.norm1 = bind_norm(store, prefix + ".norm1", c);
  if (cfg.mixer_mode == MixerMode::kDMixer) {
    p.dmixer = bind_dmixer(store, prefix + ".mixer", dmixer_shape(cfg, st), rel_bias_name);
  } else {
    p.local_dw = bind_depthwise(store, prefix + ".mixer.dw", c, 7);
    p.local_ste = bind_ste(store, prefix + ".mixer.ste", dmixer_shape(cfg, st).ste);
  }
  p.norm2 = bind_norm(store, prefix + ".norm2", c);
  p.ffn = bind_msffn(store, prefix + ".ffn", msffn_shape(cfg, st));
  return p;
}

/// X = DPE(x); Y = Mixer(Norm1(X)) + X; Z = MS-FFN(Norm2(Y)) + Y.
template <Real T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p, BlockTrace<T>* trace = nullptr) {
  auto xp = dpe_forward(x, p.dpe);
  auto normed = batch_norm_inference(xp, p.norm1);
  Tensor<T> mixed;
  if (p.mode == MixerMode::kDMixer) {
    mixed = dmixer_forward(normed, p.dmixer, trace ? &trace->dmixer : nullptr);
  } else {
    mixed = ste_forward(conv2d(normed, p.local_dw), p.local_ste);
  }
  if (trace) {
    trace->dpe = xp;
    trace->mixer = mixed;
  }
  auto y = add(mixed, xp);
  return add(msffn_forward(batch_norm_inference(y, p.norm2), p.ffn), y);
}

/// Every named tensor of a model, in forward order.
inline ParamManifest model_manifest(const ModelConfig& cfg) {
  validate(cfg);
  ParamManifest m;
  std::size_t in = std::size_t(cfg.in_channels);
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& st = cfg.stages[i];
    const auto c = std::size_t(st.channels);
    append_patch_embed(m, stage_name(i) + ".embed", in, c, i == 0);
    if (cfg.mixer_mode == MixerMode::kDMixer) append_rel_bias(m, stage_name(i) + ".rel_bias", dmixer_shape(cfg, st).osra);
    for (int j = 0; j < st.blocks; ++j) append_block(m, block_name(i, std::size_t(j)), cfg, st);
    in = c;
  }
  append_linear(m, "head", in, std::size_t(cfg.num_classes));
  return m;
}

template <Real T>
class Model {
 public:
  /// Called with (tap name, tensor) for every tap reached during a forward pass.
  using Observer = std::function<void(std::string_view, const Tensor<T>&)>;

  Model(ModelConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    validate(cfg_);
    std::size_t in = std::size_t(cfg_.in_channels);
    for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
      const auto& st = cfg_.stages[i];
      Stage stage;
      stage.embed = bind_patch_embed(params_, stage_name(i) + ".embed", in, std::size_t(st.channels), i == 0);
      const std::string rel = cfg_.mixer_mode == MixerMode::kDMixer ? stage_name(i) + ".rel_bias" : "";
      for (int j = 0; j < st.blocks; ++j) {
        stage.blocks.push_back(bind_block(params_, block_name(i, std::size_t(j)), cfg_, st, rel));
      }
      stages_.push_back(std::move(stage));
      in = std::size_t(st.channels);
    }
    head_weight_ = params_.get("head.weight");
    head_bias_ = params_.get("head.bias");
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamStore<T>& params() const { return params_; }
  ParamStore<T>& params() { return params_; }

  Tensor<T> forward(const Tensor<T>& images, const Observer& observer = {}) const {
    return *walk(images, "", observer);
  }

  /// Runs the network only as far as the named tap.
  Tensor<T> forward_to(const Tensor<T>& images, std::string_view tap) const {
    auto names = taps();
    if (std::find(names.begin(), names.end(), tap) == names.end()) {
      std::string msg = "unknown tap '" + std::string(tap) + "'; available:";
      for (const auto& n : names) msg += " " + n;
      throw SelectorError(msg);
    }
    return *walk(images, tap, {});
  }

  std::vector<std::string> taps() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      out.push_back(stage_name(i) + ".embed");
      for (std::size_t j = 0; j < stages_[i].blocks.size(); ++j) {
        const auto b = block_name(i, j);
        out.push_back(b + ".dpe");
        if (cfg_.mixer_mode == MixerMode::kDMixer) {
          out.push_back(b + ".osra");
          out.push_back(b + ".idconv");
        }
        out.push_back(b + ".mixer");
        out.push_back(b);
      }
      out.push_back(stage_name(i));
    }
    out.push_back("pool");
    out.push_back("logits");
    return out;
  }

 private:
  struct Stage {
    PatchEmbedParams<T> embed;
    std::vector<BlockParams<T>> blocks;
  };

  std::optional<Tensor<T>> walk(const Tensor<T>& images, std::string_view stop, const Observer& observer) const {
    const auto sz = std::size_t(cfg_.image_size);
    if (images.rank() != 4 || images.dim(1) != std::size_t(cfg_.in_channels) || images.dim(2) != sz ||
        images.dim(3) != sz) {
      throw ConfigError("model expects images [N," + std::to_string(cfg_.in_channels) + "," + std::to_string(sz) +
                        "," + std::to_string(sz) + "], got " + images.shape().str());
    }
    auto hit = [&](const std::string& name, const Tensor<T>& t) {
      if (observer) observer(name, t);
      return name == stop;
    };
    Tensor<T> x = images;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      x = patch_embed(x, stages_[i].embed);
      if (hit(stage_name(i) + ".embed", x)) return x;
      for (std::size_t j = 0; j < stages_[i].blocks.size(); ++j) {
        const auto b = block_name(i, j);
        BlockTrace<T> trace;
        x = block_forward(x, stages_[i].blocks[j], &trace);
        if (hit(b + ".dpe", trace.dpe)) return trace.dpe;
        if (cfg_.mixer_mode == MixerMode::kDMixer) {
          if (hit(b + ".osra", trace.dmixer.osra_out)) return trace.dmixer.osra_out;
          if (hit(b + ".idconv", trace.dmixer.idconv_out)) return trace.dmixer.idconv_out;
        }
        if (hit(b + ".mixer", trace.mixer)) return trace.mixer;
        if (hit(b, x)) return x;
      }
      if (hit(stage_name(i), x)) return x;
    }
    auto pooled = adaptive_avg_pool(x, 1, 1);
    if (hit("pool", pooled)) return pooled;
    const std::size_t n = pooled.dim(0), c = pooled.dim(1);
    auto logits = reshape(linear(reshape(pooled, Shape{n, 1, c}), head_weight_, head_bias_),
                          Shape{n, std::size_t(cfg_.num_classes)});
    hit("logits", logits);
    return logits;
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  std::vector<Stage> stages_;
  Tensor<T> head_weight_, head_bias_;
};

/// Deterministic initialization from `seed`.
template <Real T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  return Model<T>(cfg, initialize<T>(model_manifest(cfg), seed));
}

template <Real T>
Tensor<T> forward_classify(const Model<T>& model, const Tensor<T>& images) {
  return model.forward(images);
}

/// Seeded standard-normal images [count, channels, size, size]; image i is
/// drawn from its own stream so batches are prefix-consistent.
template <Real T>
Tensor<T> random_images(std::uint64_t seed, std::size_t count, std::size_t channels, std::size_t size,
                        std::size_t first_index = 0) {
  const std::size_t per = channels * size * size;
  std::vector<T> data(count * per);
  for (std::size_t i = 0; i < count; ++i) {
    RandomStream rng(seed, fnv1a("image") + first_index + i);
    for (std::size_t k = 0; k < per; ++k) data[i * per + k] = static_cast<T>(rng.normal());
  }
  return Tensor<T>(Shape{count, channels, size, size}, std::move(data));
}

}  // namespace txnet
