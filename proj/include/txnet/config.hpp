#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnet/error.hpp"

namespace txnet {

enum class MixerMode { kDMixer, kDwConvBaseline };

inline std::string to_string(MixerMode m) { return m == MixerMode::kDMixer ? "dmixer" : "dwconv_baseline"; }

struct StageConfig {
  int channels = 0;
  int blocks = 0;
  int sr_stride = 1;   // OSRA spatial-reduction stride S
  int heads = 1;       // OSRA heads H
  int kernel_size = 7; // IDConv K
  int groups = 2;      // IDConv attention groups G
  int expansion = 4;   // MS-FFN E
  int height = 0;      // input resolution of the stage's blocks
  int width = 0;

  bool operator==(const StageConfig&) const = default;
};

struct ModelConfig {
  std::string name = "custom";
  int image_size = 224;
  int in_channels = 3;
  int stem_channels = 0;
  int num_classes = 1000;
  double attention_ratio = 0.5;
  MixerMode mixer_mode = MixerMode::kDMixer;
  int idconv_reduction = 4;
  int ste_reduction = 8;
  int ste_min_channels = 16;
  std::vector<int> ffn_scales{1, 3, 5, 7};
  std::array<StageConfig, 4> stages{};

  bool operator==(const ModelConfig&) const = default;
};

/// Channels routed to OSRA for a stage of width c: ceil(ratio * c).
inline int attention_channels(const ModelConfig& cfg, int c) {
  return static_cast<int>(std::ceil(cfg.attention_ratio * c - 1e-9));
}

inline int ste_squeezed_channels(int c, int reduction, int floor_channels) {
  return std::max(static_cast<int>(std::lround(static_cast<double>(c) / reduction)), floor_channels);
}

/// Key/value grid extent after overlapping spatial reduction.
inline int osr_extent(int in, int stride) {
  if (stride <= 1) return in;
  const int k = stride + 3, pad = k / 2;
  return (in + 2 * pad - k) / stride + 1;
}

/// Recomputes stage resolutions for a square input: /4 at the stem, /2 after.
inline ModelConfig with_resolution(ModelConfig cfg, int image_size) {
  cfg.image_size = image_size;
  int r = image_size / 4;
  for (auto& s : cfg.stages) {
    s.height = r;
    s.width = r;
    r /= 2;
  }
  return cfg;
}

namespace detail {
[[noreturn]] inline void config_fail(const std::string& path, const std::string& what) {
  throw ConfigError(path + ": " + what);
}
}  // namespace detail

inline void validate(const ModelConfig& cfg) {
  using detail::config_fail;
  if (cfg.image_size < 32 || cfg.image_size % 32 != 0) {
    config_fail("image_size", std::to_string(cfg.image_size) + " is not a positive multiple of 32");
  }
  if (cfg.in_channels < 1) config_fail("in_channels", "must be >= 1");
  if (cfg.num_classes < 1) config_fail("num_classes", "must be >= 1");
  if (!(cfg.attention_ratio > 0.0 && cfg.attention_ratio < 1.0)) {
    config_fail("attention_ratio", "must lie strictly between 0 and 1");
  }
  if (cfg.idconv_reduction < 1) config_fail("idconv_reduction", "must be >= 1");
  if (cfg.ste_reduction < 1) config_fail("ste_reduction", "must be >= 1");
  if (cfg.ste_min_channels < 1) config_fail("ste_min_channels", "must be >= 1");
  if (cfg.ffn_scales.empty()) config_fail("ffn_scales", "must not be empty");
  for (std::size_t i = 0; i < cfg.ffn_scales.size(); ++i) {
    if (cfg.ffn_scales[i] < 1 || cfg.ffn_scales[i] % 2 == 0) {
      config_fail("ffn_scales[" + std::to_string(i) + "]", "kernel sizes must be odd and positive");
    }
  }
  if (cfg.stem_channels != cfg.stages[0].channels) {
    config_fail("stem_channels", "must equal stages[0].channels (" + std::to_string(cfg.stages[0].channels) + ")");
  }
  int res = cfg.image_size / 4;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& s = cfg.stages[i];
    const std::string p = "stages[" + std::to_string(i) + "]";
    const std::string stage = "stage " + std::to_string(i);
    if (s.channels < 1) config_fail(p + ".channels", stage + ": must be >= 1");
    if (s.blocks < 1) config_fail(p + ".blocks", stage + ": must be >= 1");
    if (s.expansion < 1) config_fail(p + ".expansion", stage + ": must be >= 1");
    if (s.height != res || s.width != res) {
      config_fail(p + ".height/width", stage + ": resolution " + std::to_string(s.height) + "x" +
                                           std::to_string(s.width) + " breaks the chain, expected " +
                                           std::to_string(res) + "x" + std::to_string(res));
    }
    const double split = cfg.attention_ratio * s.channels;
    if (std::abs(split - std::round(split)) > 1e-9) {
      config_fail(p + ".channels", stage + ": " + std::to_string(s.channels) +
                                       " channels cannot be split by attention_ratio " +
                                       std::to_string(cfg.attention_ratio));
    }
    const int hidden = s.expansion * s.channels;
    if (hidden % static_cast<int>(cfg.ffn_scales.size()) != 0) {
      config_fail(p + ".expansion", stage + ": hidden width " + std::to_string(hidden) + " not divisible by " +
                                        std::to_string(cfg.ffn_scales.size()) + " scales");
    }
    if (cfg.mixer_mode == MixerMode::kDMixer) {
      const int ca = attention_channels(cfg, s.channels), ci = s.channels - ca;
      if (ca < 1 || ci < 1) config_fail(p + ".channels", stage + ": both mixer branches need channels");
      if (s.heads < 1 || ca % s.heads != 0) {
        config_fail(p + ".heads", stage + ": " + std::to_string(ca) + " attention channels not divisible by " +
                                      std::to_string(s.heads) + " heads");
      }
      if (s.sr_stride < 1) config_fail(p + ".sr_stride", stage + ": must be >= 1");
      if (s.kernel_size < 1 || s.kernel_size % 2 == 0) {
        config_fail(p + ".kernel_size", stage + ": IDConv kernel must be odd");
      }
      if (s.kernel_size > res) {
        config_fail(p + ".kernel_size", stage + ": kernel larger than the " + std::to_string(res) + " map");
      }
      if (s.groups < 1) config_fail(p + ".groups", stage + ": must be >= 1");
      if (ci / cfg.idconv_reduction < 1) {
        config_fail(p + ".channels", stage + ": IDConv squeeze width " + std::to_string(ci) + "/" +
                                         std::to_string(cfg.idconv_reduction) + " is zero");
      }
      if (osr_extent(res, s.sr_stride) < 1) config_fail(p + ".sr_stride", stage + ": reduces the map to nothing");
    }
    res /= 2;
  }
}

// ---------------------------------------------------------------------------
// Published variants

namespace presets {

inline ModelConfig make(std::string name, std::array<int, 4> ch, std::array<int, 4> blocks, std::array<int, 4> heads,
                        std::array<int, 4> groups, std::array<int, 4> expansion, int image_size = 224) {
  ModelConfig cfg;
  cfg.name = std::move(name);
  cfg.stem_channels = ch[0];
  constexpr std::array<int, 4> kStride{8, 4, 2, 1};
  for (int i = 0; i < 4; ++i) {
    auto& s = cfg.stages[i];
    s.channels = ch[i];
    s.blocks = blocks[i];
    s.sr_stride = kStride[i];
    s.heads = heads[i];
    s.kernel_size = 7;
    s.groups = groups[i];
    s.expansion = expansion[i];
  }
  return with_resolution(cfg, image_size);
}

inline ModelConfig tiny() {
  return make("transxnet-t", {48, 96, 224, 448}, {3, 3, 9, 3}, {1, 2, 4, 8}, {2, 2, 2, 2}, {4, 4, 4, 4});
}
inline ModelConfig small() {
  return make("transxnet-s", {64, 128, 320, 512}, {4, 4, 12, 4}, {1, 2, 5, 8}, {2, 2, 3, 4}, {6, 6, 4, 4});
}
inline ModelConfig base() {
  return make("transxnet-b", {76, 152, 336, 672}, {4, 4, 21, 4}, {2, 4, 8, 16}, {2, 2, 4, 4}, {8, 8, 4, 4});
}

/// Millisecond-scale test model: one block per stage, 64x64 input.
inline ModelConfig micro(MixerMode mode = MixerMode::kDMixer) {
  auto cfg = make(mode == MixerMode::kDMixer ? "micro" : "micro-dwconv", {8, 16, 32, 64}, {1, 1, 1, 1},
                  {1, 2, 4, 8}, {2, 2, 2, 2}, {4, 4, 4, 4}, 64);
  cfg.stages[3].kernel_size = 1;  // the last stage is 2x2
  cfg.stages[2].kernel_size = 3;  // 4x4
  cfg.num_classes = 10;
  cfg.mixer_mode = mode;
  return cfg;
}

}  // namespace presets

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["name"] = cfg.name;
  j["image_size"] = cfg.image_size;
  j["in_channels"] = cfg.in_channels;
  j["stem_channels"] = cfg.stem_channels;
  j["num_classes"] = cfg.num_classes;
  j["attention_ratio"] = cfg.attention_ratio;
  j["mixer_mode"] = to_string(cfg.mixer_mode);
  j["idconv_reduction"] = cfg.idconv_reduction;
  j["ste_reduction"] = cfg.ste_reduction;
  j["ste_min_channels"] = cfg.ste_min_channels;
  j["ffn_scales"] = cfg.ffn_scales;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : cfg.stages) {
    j["stages"].push_back({{"channels", s.channels},
                           {"blocks", s.blocks},
                           {"sr_stride", s.sr_stride},
                           {"heads", s.heads},
                           {"kernel_size", s.kernel_size},
                           {"groups", s.groups},
                           {"expansion", s.expansion},
                           {"height", s.height},
                           {"width", s.width}});
  }
  return j;
}

namespace detail {

template <class V>
V json_field(const nlohmann::json& j, const std::string& key, const std::string& path, V fallback, bool required) {
  if (!j.contains(key)) {
    if (required) config_fail(path + key, "missing");
    return fallback;
  }
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    config_fail(path + key, std::string("wrong type (") + e.what() + ")");
  }
}

}  // namespace detail

/// Parses and validates a config; errors name the offending field path.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  using detail::json_field;
  if (!j.is_object()) detail::config_fail("<root>", "expected a JSON object");
  ModelConfig cfg;
  cfg.name = json_field<std::string>(j, "name", "", cfg.name, false);
  cfg.image_size = json_field<int>(j, "image_size", "", 224, true);
  cfg.in_channels = json_field<int>(j, "in_channels", "", cfg.in_channels, false);
  cfg.num_classes = json_field<int>(j, "num_classes", "", cfg.num_classes, false);
  cfg.attention_ratio = json_field<double>(j, "attention_ratio", "", cfg.attention_ratio, false);
  const auto mode = json_field<std::string>(j, "mixer_mode", "", "dmixer", false);
  if (mode == "dmixer") {
    cfg.mixer_mode = MixerMode::kDMixer;
  } else if (mode == "dwconv_baseline") {
    cfg.mixer_mode = MixerMode::kDwConvBaseline;
  } else {
    detail::config_fail("mixer_mode", "unknown mode '" + mode + "' (dmixer | dwconv_baseline)");
  }
  cfg.idconv_reduction = json_field<int>(j, "idconv_reduction", "", cfg.idconv_reduction, false);
  cfg.ste_reduction = json_field<int>(j, "ste_reduction", "", cfg.ste_reduction, false);
  cfg.ste_min_channels = json_field<int>(j, "ste_min_channels", "", cfg.ste_min_channels, false);
  cfg.ffn_scales = json_field<std::vector<int>>(j, "ffn_scales", "", cfg.ffn_scales, false);
  if (!j.contains("stages") || !j["stages"].is_array() || j["stages"].size() != 4) {
    detail::config_fail("stages", "expected an array of exactly 4 stage objects");
  }
  int res = cfg.image_size / 4;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& sj = j["stages"][i];
    const std::string p = "stages[" + std::to_string(i) + "].";
    if (!sj.is_object()) detail::config_fail(p.substr(0, p.size() - 1), "expected an object");
    auto& s = cfg.stages[i];
    s.channels = json_field<int>(sj, "channels", p, 0, true);
    s.blocks = json_field<int>(sj, "blocks", p, 0, true);
    s.sr_stride = json_field<int>(sj, "sr_stride", p, 1, true);
    s.heads = json_field<int>(sj, "heads", p, 1, true);
    s.kernel_size = json_field<int>(sj, "kernel_size", p, 7, false);
    s.groups = json_field<int>(sj, "groups", p, 2, true);
    s.expansion = json_field<int>(sj, "expansion", p, 4, true);
    s.height = json_field<int>(sj, "height", p, res, false);
    s.width = json_field<int>(sj, "width", p, res, false);
    res /= 2;
  }
  cfg.stem_channels = json_field<int>(j, "stem_channels", "", cfg.stages[0].channels, false);
  validate(cfg);
  return cfg;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": malformed JSON (" + e.what() + ")");
  }
  return config_from_json(j);
}

}  // namespace txnet
