#pragma once

// Command-line front end: build, summary, forward, erf, check.
//
// Exit codes: 0 success, 1 check failure or runtime error, 2 usage or
// configuration error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "txnet/analysis.hpp"
#include "txnet/check_suite.hpp"
#include "txnet/weight_file.hpp"

namespace txnet {

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2 };

struct CliConfig {
  std::string subcommand;
  std::string config;
  std::string weights;
  std::uint64_t seed = 0;
  int resolution = 0;  // 0: keep the config's
  std::string out;
  std::string precision = "f32";
  std::string tap;
  std::size_t images = 100;
  std::size_t batch = 1;
  std::string input;  // TXNW1 file holding one [N,C,H,W] tensor
  std::size_t topk = 5;
  bool json = false;
};

/// A preset name (tiny|small|base|micro|micro_dwconv, or T|S|B) or a JSON
/// config path.
inline ModelConfig resolve_config(const std::string& name) {
  if (name == "tiny" || name == "T" || name == "transxnet-t") return presets::tiny();
  if (name == "small" || name == "S" || name == "transxnet-s") return presets::small();
  if (name == "base" || name == "B" || name == "transxnet-b") return presets::base();
  if (name == "micro") return presets::micro(MixerMode::kDMixer);
  if (name == "micro_dwconv" || name == "micro-dwconv") return presets::micro(MixerMode::kDwConvBaseline);
  return load_config(name);
}

// ---------------------------------------------------------------------------
// ERF image output

/// 8-bit binary PGM, pixel = round(255 * value).
inline void write_pgm(const std::string& path, const ErfMap& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "P5\n" << m.width << " " << m.height << "\n255\n";
  std::vector<unsigned char> px(m.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<unsigned char>(std::lround(255.0 * std::clamp(m.values[i], 0.0, 1.0)));
  }
  out.write(reinterpret_cast<const char*>(px.data()), std::streamsize(px.size()));
  if (!out) throw FormatError(path + ": write failed");
}

inline nlohmann::json erf_sidecar(const ErfMap& m, std::uint64_t seed, const std::string& model) {
  return {{"model", model},
          {"tap", m.tap},
          {"num_images", m.num_images},
          {"width", m.width},
          {"height", m.height},
          {"center", {m.center_h, m.center_w}},
          {"normalization", m.normalization},
          {"support_fraction", support_fraction(m)},
          {"threshold", kErfSupportThreshold},
          {"seed", seed}};
}

inline std::string sidecar_path(const std::string& pgm) {
  return std::filesystem::path(pgm).replace_extension(".json").string();
}

// ---------------------------------------------------------------------------
// Subcommands

namespace detail {

inline ModelConfig cli_model_config(const CliConfig& c) {
  auto cfg = resolve_config(c.config);
  if (c.resolution > 0 && c.resolution != cfg.image_size) {
    cfg = with_resolution(cfg, c.resolution);
    validate(cfg);
  }
  return cfg;
}

template <Real T>
Model<T> cli_model(const CliConfig& c) {
  const auto cfg = cli_model_config(c);
  if (c.weights.empty()) return build_model<T>(cfg, c.seed);
  return Model<T>(cfg, load_weights<T>(c.weights, model_manifest(cfg)));
}

template <Real T>
int run_build(const CliConfig& c, std::ostream& out) {
  const auto cfg = cli_model_config(c);
  const auto store = initialize<T>(model_manifest(cfg), c.seed);
  save_weights(c.out, store);
  out << "wrote " << store.size() << " tensors (" << store.trainable_count() << " parameters) to " << c.out << "\n";
  return kExitOk;
}

inline int run_summary(const CliConfig& c, std::ostream& out) {
  const auto report = summarize(cli_model_config(c));
  if (c.json) {
    out << report.to_json().dump(2) << "\n";
  } else {
    out << report.by_stage().to_text();
  }
  return kExitOk;
}

template <Real T>
Tensor<T> cli_input(const CliConfig& c, const ModelConfig& cfg) {
  if (c.input.empty()) {
    return random_images<T>(c.seed, c.batch, std::size_t(cfg.in_channels), std::size_t(cfg.image_size));
  }
  const auto file = parse_weight_file(read_bytes(c.input));
  if (file.entries.size() != 1) throw FormatError(c.input + ": expected exactly one tensor");
  const auto& e = file.entries.front();
  std::vector<std::size_t> dims(e.extents.begin(), e.extents.end());
  ParamSpec spec{e.name, Shape(std::span<const std::size_t>(dims)), Init::kZeros, false};
  return store_from_weight_file<T>(file, {spec}).get(e.name);
}

template <Real T>
int run_forward(const CliConfig& c, std::ostream& out) {
  auto model = cli_model<T>(c);
  const auto logits = model.forward(cli_input<T>(c, model.config()));
  const std::size_t n = logits.dim(0), k = logits.dim(1), top = std::min(c.topk, k);
  out << std::setprecision(std::numeric_limits<T>::max_digits10);
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), 0);
    auto row = logits.data().subspan(b * k, k);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t z) { return row[a] > row[z]; });
    out << "image " << b << ":";
    for (std::size_t t = 0; t < top; ++t) out << " " << idx[t] << "=" << row[idx[t]];
    out << "\n";
  }
  if (!c.out.empty()) {
    ParamStore<T> dump;
    dump.add({"logits", logits.shape(), Init::kZeros, false}, logits);
    save_weights(c.out, dump);
  }
  return kExitOk;
}

template <Real T>
int run_erf(const CliConfig& c, std::ostream& out) {
  auto model = cli_model<T>(c);
  const auto map = erf_map_seeded(model, c.seed, c.images, c.tap, threads_from_env());
  write_pgm(c.out, map);
  const auto meta = erf_sidecar(map, c.seed, model.config().name);
  std::ofstream side(sidecar_path(c.out));
  if (!side) throw FormatError(sidecar_path(c.out) + ": cannot open for writing");
  side << meta.dump(2) << "\n";
  out << "erf " << c.tap << " over " << map.num_images << " images: support fraction " << support_fraction(map)
      << " -> " << c.out << "\n";
  return kExitOk;
}

inline int run_check(const CliConfig& c, std::ostream& out, const std::vector<GradCase>& extra = {}) {
  if (c.precision != "f64") {
    throw ConfigError("check runs in double precision only (--precision f64)");
  }
  if (!c.config.empty()) validate(resolve_config(c.config));
  const auto rep = run_check_suite(c.seed == 0 ? 1 : c.seed, extra);
  for (const auto& g : rep.grads) out << (g.passed() ? "ok   " : "FAIL ") << g.describe() << "\n";
  out << std::scientific << std::setprecision(3);
  out << (rep.oracle.passed() ? "ok   " : "FAIL ") << "idconv oracle: " << rep.oracle.instances
      << " instances, max abs diff " << rep.oracle.max_abs_diff << ", G=1 " << rep.oracle.g1_max_abs_diff
      << ", batch-constant " << rep.oracle.batch_max_abs_diff << " (tol " << rep.oracle.tolerance << ")\n";
  if (const auto* w = rep.worst()) out << "worst gradient case: " << w->describe() << "\n";
  out << (rep.passed() ? "all checks passed" : "checks FAILED") << "\n";
  return rep.passed() ? kExitOk : kExitCheckFailed;
}

}  // namespace detail

/// Dispatches a parsed command line.
inline int run_command(const CliConfig& c, std::ostream& out, std::ostream& err,
                       const std::vector<GradCase>& extra_checks = {}) {
  try {
    const bool dbl = c.precision == "f64";
    if (c.subcommand == "build") return dbl ? detail::run_build<double>(c, out) : detail::run_build<float>(c, out);
    if (c.subcommand == "summary") return detail::run_summary(c, out);
    if (c.subcommand == "forward") {
      return dbl ? detail::run_forward<double>(c, out) : detail::run_forward<float>(c, out);
    }
    if (c.subcommand == "erf") return dbl ? detail::run_erf<double>(c, out) : detail::run_erf<float>(c, out);
    if (c.subcommand == "check") return detail::run_check(c, out, extra_checks);
    err << "error: unknown subcommand '" << c.subcommand << "'\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const SelectorError& e) {
    err << "selector error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
}

/// Parses argv and runs the selected subcommand.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"txnet: hybrid CNN/attention backbone toolkit"};
  app.require_subcommand(1);
  CliConfig c;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", c.config, "JSON config path or preset (tiny, small, base, micro, micro_dwconv)");
    if (needs_config) opt->required();
    sub->add_option("--seed", c.seed, "seed for initialization and generated images");
    sub->add_option("--resolution", c.resolution, "input resolution (multiple of 32)");
    sub->add_option("--precision", c.precision, "scalar type")->check(CLI::IsMember({"f32", "f64"}));
  };

  auto* build = app.add_subcommand("build", "initialize weights from a seed");
  common(build, true);
  build->add_option("--out", c.out, "weight file to write")->required();

  auto* summary = app.add_subcommand("summary", "parameter and FLOP table");
  common(summary, true);
  summary->add_flag("--json", c.json, "full per-layer report as JSON");

  auto* forward = app.add_subcommand("forward", "classify seeded or raw-tensor input");
  common(forward, true);
  forward->add_option("--weights", c.weights, "weight file (default: initialize from --seed)");
  forward->add_option("--input", c.input, "TXNW1 file with one [N,C,H,W] tensor");
  forward->add_option("--batch", c.batch, "number of generated images")->check(CLI::PositiveNumber);
  forward->add_option("--topk", c.topk, "logits to print per image")->check(CLI::PositiveNumber);
  forward->add_option("--out", c.out, "write logits as a TXNW1 file");

  auto* erf = app.add_subcommand("erf", "effective receptive field heatmap (PGM + JSON sidecar)");
  common(erf, true);
  erf->add_option("--weights", c.weights, "weight file (default: initialize from --seed)");
  erf->add_option("--tap", c.tap, "feature map to probe, e.g. stage3 or stage0.block0.osra")->required();
  erf->add_option("--images", c.images, "number of seeded images")->check(CLI::PositiveNumber);
  erf->add_option("--out", c.out, "PGM path")->required();

  auto* check = app.add_subcommand("check", "gradient and IDConv oracle suites");
  common(check, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  c.subcommand = app.get_subcommands().front()->get_name();
  if (c.subcommand == "check" && check->count("--precision") == 0) c.precision = "f64";
  return run_command(c, out, err);
}

}  // namespace txnet
