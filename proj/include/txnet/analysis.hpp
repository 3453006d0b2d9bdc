#pragma once

// Cost accounting, effective receptive fields, finite-difference gradient
// checks, and a loop-level reference implementation of IDConv.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "txnet/network.hpp"

namespace txnet {

// ---------------------------------------------------------------------------
// Cost report

struct CostRow {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::string model;
  int resolution = 0;
  std::string convention = "1 MAC = 1 FLOP";
  std::vector<CostRow> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_flops = 0;

  /// Adds to the row named `layer`, creating it at the end if needed.
  void add(const std::string& layer, std::uint64_t params, std::uint64_t flops) {
    auto it = index_.find(layer);
    if (it == index_.end()) {
      it = index_.emplace(layer, rows.size()).first;
      rows.push_back({layer, 0, 0});
    }
    rows[it->second].params += params;
    rows[it->second].flops += flops;
    total_params += params;
    total_flops += flops;
  }

  const CostRow* find(const std::string& layer) const {
    auto it = index_.find(layer);
    return it == index_.end() ? nullptr : &rows[it->second];
  }

  /// Rows summed by their first name component (stage0, ..., head).
  CostReport by_stage() const {
    CostReport out;
    out.model = model;
    out.resolution = resolution;
    out.convention = convention;
    for (const auto& r : rows) out.add(r.layer.substr(0, r.layer.find('.')), r.params, r.flops);
    return out;
  }

  std::string to_text() const {
    std::size_t width = 5;
    for (const auto& r : rows) width = std::max(width, r.layer.size());
    std::ostringstream os;
    os << model << " @ " << resolution << "x" << resolution << " (" << convention << ")\n";
    os << std::left << std::setw(int(width)) << "layer" << std::right << std::setw(14) << "params"
       << std::setw(18) << "flops" << "\n";
    for (const auto& r : rows) {
      os << std::left << std::setw(int(width)) << r.layer << std::right << std::setw(14) << r.params
         << std::setw(18) << r.flops << "\n";
    }
    os << std::left << std::setw(int(width)) << "total" << std::right << std::setw(14) << total_params
       << std::setw(18) << total_flops << "\n";
    os << std::fixed << std::setprecision(3) << "params " << double(total_params) / 1e6 << " M, flops "
       << double(total_flops) / 1e9 << " G\n";
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = model;
    j["resolution"] = resolution;
    j["convention"] = convention;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back({{"layer", r.layer}, {"params", r.params}, {"flops", r.flops}});
    j["total_params"] = total_params;
    j["total_flops"] = total_flops;
    return j;
  }

 private:
  std::map<std::string, std::size_t, std::less<>> index_;
};

namespace detail {

/// Layer a tensor belongs to: its name without a trailing weight/bias/stat
/// component.
inline std::string layer_of(const std::string& name) {
  const auto dot = name.rfind('.');
  if (dot == std::string::npos) return name;
  const auto leaf = name.substr(dot + 1);
  if (leaf == "weight" || leaf == "bias" || leaf == "running_mean" || leaf == "running_var") {
    return name.substr(0, dot);
  }
  return name;
}

inline std::uint64_t conv_macs(std::size_t h_out, std::size_t w_out, std::size_t c_out, std::size_t c_in_per_group,
                               std::size_t k) {
  return std::uint64_t(h_out) * w_out * c_out * c_in_per_group * k * k;
}

}  // namespace detail

/// Trainable element counts, grouped by layer. BN running statistics are
/// buffers and are not counted.
inline CostReport count_params(const ParamManifest& manifest) {
  CostReport r;
  for (const auto& spec : manifest) {
    if (spec.trainable) r.add(detail::layer_of(spec.name), spec.shape.numel(), 0);
  }
  return r;
}

inline CostReport count_params(const ModelConfig& cfg) {
  auto r = count_params(model_manifest(cfg));
  r.model = cfg.name;
  r.resolution = cfg.image_size;
  return r;
}

template <Real T>
CostReport count_params(const Model<T>& model) {
  CostReport r;
  r.model = model.config().name;
  r.resolution = model.config().image_size;
  for (const auto& e : model.params().entries()) {
    if (e.spec.trainable) r.add(detail::layer_of(e.spec.name), e.tensor.numel(), 0);
  }
  return r;
}

/// IDConv parameters: (C^2/r)(G+1) + G*C*K^2 weights, plus the two 1x1 biases.
inline std::uint64_t idconv_param_count(const IdConvShape& s, bool with_bias = true) {
  const std::uint64_t c = s.channels, cr = s.squeezed(), g = s.groups, k = s.kernel_size;
  std::uint64_t n = c * cr + cr * g * c + g * c * k * k;
  if (with_bias) n += cr + g * c;
  return n;
}

/// STE cost at h x w: depthwise 3x3 plus the squeeze/expand pair.
inline std::uint64_t ste_flops(const SteShape& s, std::size_t h, std::size_t w) {
  const std::uint64_t hw = std::uint64_t(h) * w, c = s.channels, cs = s.squeezed();
  return hw * c * 9 + hw * c * cs + hw * cs * c;
}

namespace detail {

inline void add_ste_flops(CostReport& r, const std::string& prefix, const SteShape& s, std::size_t h, std::size_t w) {
  r.add(prefix + ".dw", 0, conv_macs(h, w, s.channels, 1, 3));
  r.add(prefix + ".squeeze", 0, conv_macs(h, w, s.squeezed(), s.channels, 1));
  r.add(prefix + ".expand", 0, conv_macs(h, w, s.channels, s.squeezed(), 1));
}

inline void add_osra_flops(CostReport& r, const std::string& prefix, const OsraShape& s) {
  const std::size_t h = s.height, w = s.width, kh = s.kv_height(), kw = s.kv_width(), c = s.channels;
  if (s.sr_stride > 1) {
    r.add(prefix + ".sr.conv", 0, conv_macs(kh, kw, c, 1, s.sr_kernel()));
    r.add(prefix + ".sr.norm", 0, std::uint64_t(kh) * kw * c);
  }
  r.add(prefix + ".lr", 0, conv_macs(kh, kw, c, 1, 3));
  const std::uint64_t nq = s.query_tokens(), nkv = s.kv_tokens();
  r.add(prefix + ".q", 0, nq * c * c);
  r.add(prefix + ".kv", 0, nkv * c * 2 * c);
  // QK^T and attn*V (each N_q*N_kv*C over all heads) plus the softmax.
  r.add(prefix + ".attention", 0, 2 * nq * nkv * c + s.heads * nq * nkv);
  (void)h;
  (void)w;
}

inline void add_idconv_flops(CostReport& r, const std::string& prefix, const IdConvShape& s, std::size_t h,
                             std::size_t w) {
  const std::uint64_t c = s.channels, k = s.kernel_size, g = s.groups, cr = s.squeezed();
  r.add(prefix + ".pool", 0, std::uint64_t(h) * w * c);
  r.add(prefix + ".squeeze", 0, k * k * cr * c);
  r.add(prefix + ".expand", 0, k * k * g * c * cr);
  r.add(prefix + ".softmax", 0, g * c * k * k);
  r.add(prefix + ".kernel_bank", 0, g * c * k * k);
  r.add(prefix + ".conv", 0, std::uint64_t(h) * w * c * k * k);
}

}  // namespace detail

/// Analytic per-layer FLOPs for one image at the config's bound resolution.
inline CostReport count_flops(const ModelConfig& cfg) {
  validate(cfg);
  CostReport r;
  r.model = cfg.name;
  r.resolution = cfg.image_size;
  std::size_t in = std::size_t(cfg.in_channels), h = std::size_t(cfg.image_size), w = h;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& st = cfg.stages[i];
    const std::size_t c = std::size_t(st.channels);
    const std::size_t k = i == 0 ? 7 : 3, stride = i == 0 ? 4 : 2;
    h /= stride;
    w /= stride;
    const auto embed = stage_name(i) + ".embed";
    r.add(embed + ".conv", 0, detail::conv_macs(h, w, c, in, k));
    r.add(embed + ".norm", 0, std::uint64_t(h) * w * c);
    const auto mixer = dmixer_shape(cfg, st);
    const auto ffn = msffn_shape(cfg, st);
    const std::uint64_t hw = std::uint64_t(h) * w;
    for (int j = 0; j < st.blocks; ++j) {
      const auto b = block_name(i, std::size_t(j));
      r.add(b + ".dpe", 0, detail::conv_macs(h, w, c, 1, 7));
      r.add(b + ".norm1", 0, hw * c);
      if (cfg.mixer_mode == MixerMode::kDMixer) {
        detail::add_osra_flops(r, b + ".mixer.osra", mixer.osra);
        detail::add_idconv_flops(r, b + ".mixer.idconv", mixer.idconv, h, w);
      } else {
        r.add(b + ".mixer.dw", 0, detail::conv_macs(h, w, c, 1, 7));
      }
      detail::add_ste_flops(r, b + ".mixer.ste", mixer.ste, h, w);
      r.add(b + ".norm2", 0, hw * c);
      r.add(b + ".ffn.fc1", 0, hw * c * ffn.hidden());
      for (std::size_t s = 0; s < ffn.scales.size(); ++s) {
        r.add(b + ".ffn.dw" + std::to_string(s), 0, detail::conv_macs(h, w, ffn.group_channels(), 1, ffn.scales[s]));
      }
      r.add(b + ".ffn.fc2", 0, hw * ffn.hidden() * c);
    }
    in = c;
  }
  r.add("pool", 0, std::uint64_t(h) * w * in);
  r.add("head", 0, std::uint64_t(in) * std::uint64_t(cfg.num_classes));
  return r;
}

/// FLOPs at `resolution`, which must be the one the model was built for.
template <Real T>
CostReport count_flops(const Model<T>& model, int resolution) {
  if (resolution != model.config().image_size) {
    throw ContractError("count_flops: model is bound to " + std::to_string(model.config().image_size) +
                        "x" + std::to_string(model.config().image_size) + ", not " + std::to_string(resolution));
  }
  return count_flops(model.config());
}

/// Parameters and FLOPs in one report.
inline CostReport summarize(const ModelConfig& cfg) {
  auto r = count_params(cfg);
  const auto f = count_flops(cfg);
  for (const auto& row : f.rows) r.add(row.layer, 0, row.flops);
  return r;
}

/// MACs tallied by the ops themselves during one single-image forward pass.
template <Real T>
std::uint64_t measure_flops(const Model<T>& model, std::uint64_t seed = 0) {
  const auto& cfg = model.config();
  auto x = random_images<T>(seed, 1, std::size_t(cfg.in_channels), std::size_t(cfg.image_size));
  FlopTally tally;
  {
    FlopScope scope(tally);
    (void)model.forward(x);
  }
  return tally.flops;
}

// ---------------------------------------------------------------------------
// Effective receptive field

/// Pixels whose normalized ERF exceeds this count toward the support. Sits
/// between the weak global leak of IDConv's pooled kernel path (~1e-5) and
/// the smallest in-field response of its convolutional path (~2e-4).
inline constexpr double kErfSupportThreshold = 1e-4;

struct ErfMap {
  std::string tap;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, max-normalized to [0, 1]
  std::size_t num_images = 0;
  std::size_t center_h = 0;  // position on the tapped map
  std::size_t center_w = 0;
  std::string normalization = "max";

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

inline double support_fraction(const ErfMap& m, double threshold = kErfSupportThreshold) {
  if (m.values.empty()) return 0.0;
  const auto n = std::count_if(m.values.begin(), m.values.end(), [&](double v) { return v > threshold; });
  return double(n) / double(m.values.size());
}

/// Worker count from TXNET_THREADS: unset means hardware concurrency, 0 means
/// run on the calling thread.
inline std::size_t threads_from_env() {
  if (const char* v = std::getenv("TXNET_THREADS")) {
    try {
      return std::size_t(std::stoul(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string("TXNET_THREADS: not a number: ") + v);
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

/// Freezes all parameters for the lifetime of the guard.
template <Real T>
class FrozenParams {
 public:
  explicit FrozenParams(ParamStore<T>& store) : store_(store) { store_.set_requires_grad(false); }
  ~FrozenParams() { store_.set_requires_grad(true); }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  ParamStore<T>& store_;
};

struct ErfSample {
  std::vector<double> grad;  // |d/dx| summed over input channels
  std::size_t center_h = 0, center_w = 0;
};

template <Real T>
ErfSample erf_sample(const Model<T>& model, const Tensor<T>& image, std::string_view tap) {
  Tensor<T> x = image.clone();
  x.set_requires_grad(true);
  Tape<T> tape;
  ErfSample out;
  {
    TapeScope<T> scope(tape);
    auto f = model.forward_to(x, tap);
    if (f.rank() != 4) throw SelectorError("erf: tap '" + std::string(tap) + "' is not a spatial map");
    out.center_h = f.dim(2) / 2;
    out.center_w = f.dim(3) / 2;
    auto loss = sum(pick_position(f, out.center_h, out.center_w));
    tape.backward(loss);
  }
  const std::size_t c = image.dim(1), plane = image.dim(2) * image.dim(3);
  out.grad.assign(plane, 0.0);
  if (!x.has_grad()) return out;
  const auto g = x.grad();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < plane; ++p) out.grad[p] += std::abs(double(g[ch * plane + p]));
  }
  return out;
}

}  // namespace detail

/// ERF of the center position of `tap`, averaged over the images produced by
/// `image_at(i)` for i in [0, count). Results are summed in index order, so
/// the map does not depend on the worker count.
template <Real T>
ErfMap erf_map(Model<T>& model, std::size_t count, const std::function<Tensor<T>(std::size_t)>& image_at,
               std::string_view tap, std::size_t threads = 0) {
  const auto names = model.taps();
  if (std::find(names.begin(), names.end(), tap) == names.end()) {
    std::string msg = "unknown tap '" + std::string(tap) + "'; available:";
    for (const auto& n : names) msg += " " + n;
    throw SelectorError(msg);
  }
  if (count == 0) throw ContractError("erf: need at least one image");
  detail::FrozenParams<T> frozen(model.params());

  std::vector<detail::ErfSample> samples(count);
  auto run = [&](std::size_t i) { samples[i] = detail::erf_sample(model, image_at(i), tap); };
  const std::size_t workers = std::min(threads, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < count; i += workers) run(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  ErfMap m;
  m.tap = std::string(tap);
  m.height = m.width = std::size_t(model.config().image_size);
  m.num_images = count;
  m.center_h = samples[0].center_h;
  m.center_w = samples[0].center_w;
  m.values.assign(m.height * m.width, 0.0);
  for (const auto& s : samples) {
    for (std::size_t p = 0; p < m.values.size(); ++p) m.values[p] += s.grad[p];
  }
  double peak = 0.0;
  for (auto& v : m.values) {
    v /= double(count);
    peak = std::max(peak, v);
  }
  if (peak > 0.0) {
    for (auto& v : m.values) v /= peak;
  }
  return m;
}

/// ERF over the images of a batch [N, C, H, W].
template <Real T>
ErfMap erf_map(Model<T>& model, const Tensor<T>& images, std::string_view tap, std::size_t threads = 0) {
  if (images.rank() != 4) throw ShapeError("erf: images must be [N,C,H,W], got " + images.shape().str());
  const std::size_t per = images.numel() / images.dim(0);
  const Shape one{1, images.dim(1), images.dim(2), images.dim(3)};
  auto slice = [&](std::size_t i) {
    auto d = images.data().subspan(i * per, per);
    return Tensor<T>(one, std::vector<T>(d.begin(), d.end()));
  };
  return erf_map<T>(model, images.dim(0), slice, tap, threads);
}

/// ERF over `count` seeded random images (see random_images).
template <Real T>
ErfMap erf_map_seeded(Model<T>& model, std::uint64_t seed, std::size_t count, std::string_view tap,
                      std::size_t threads = 0) {
  const auto& cfg = model.config();
  auto gen = [&](std::size_t i) {
    return random_images<T>(seed, 1, std::size_t(cfg.in_channels), std::size_t(cfg.image_size), i);
  };
  return erf_map<T>(model, count, gen, tap, threads);
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Gradients smaller than kGradCheckFloor * sum|out * R| are compared
/// absolutely. Central-difference round-off is about eps * sum|out * R| / h,
/// so the floor keeps exact zeros (e.g. a key bias under softmax) from
/// reading as relative errors of order one.
inline constexpr double kGradCheckFloor = 1e-6;

struct GradCheckReport {
  std::string name;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double floor = 0.0;

  bool passed() const { return max_rel_error < tolerance; }

  std::string describe() const {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3) << name << ": max rel error " << max_rel_error << " (tol "
       << tolerance << ", " << coordinates << " coords)";
    if (!passed()) {
      os << "; worst at input " << worst_input << " index " << worst_index << ": analytic " << worst_analytic
         << " vs numeric " << worst_numeric;
    }
    return os.str();
  }
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

inline double relative_error(double a, double b, double floor = kGradCheckFloor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares the taped gradient of sum(fn(inputs) * R), R a fixed random
/// projection, against central differences on sampled coordinates of every
/// input.
inline GradCheckReport grad_check(std::string name, const GradFn& fn, const std::vector<Tensor<double>>& inputs,
                                  double tolerance, std::uint64_t seed = 1, std::size_t coords_per_tensor = 32,
                                  double step = 1e-4) {
  GradCheckReport rep;
  rep.name = std::move(name);
  rep.tolerance = tolerance;

  std::vector<Tensor<double>> leaves;
  for (const auto& in : inputs) leaves.push_back(in.clone());
  const auto probe = fn(leaves);
  std::vector<double> proj(probe.numel());
  {
    RandomStream rng(seed, "projection");
    for (auto& v : proj) v = rng.normal();
  }
  const Tensor<double> projection(probe.shape(), proj);
  double magnitude = 0.0;
  for (std::size_t i = 0; i < probe.numel(); ++i) magnitude += std::abs(probe[i] * proj[i]);
  rep.floor = kGradCheckFloor * std::max(1.0, magnitude);
  auto objective = [&](const std::vector<Tensor<double>>& xs) {
    const auto out = fn(xs);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) acc += out[i] * proj[i];
    return acc;
  };

  for (auto& l : leaves) l.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum(mul(fn(leaves), projection));
    tape.backward(loss);
  }

  for (std::size_t t = 0; t < leaves.size(); ++t) {
    const std::size_t n = leaves[t].numel();
    std::vector<std::size_t> coords;
    if (n <= coords_per_tensor) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      RandomStream rng(seed, fnv1a("coords") + t);
      while (coords.size() < coords_per_tensor) {
        const auto i = std::size_t(rng.next_u64() % n);
        if (std::find(coords.begin(), coords.end(), i) == coords.end()) coords.push_back(i);
      }
    }
    std::vector<Tensor<double>> probe_in;
    for (const auto& l : leaves) probe_in.push_back(l.clone());
    auto data = probe_in[t].mutable_data();
    for (std::size_t i : coords) {
      const double orig = data[i];
      data[i] = orig + step;
      const double up = objective(probe_in);
      data[i] = orig - step;
      const double down = objective(probe_in);
      data[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double analytic = leaves[t].has_grad() ? leaves[t].grad()[i] : 0.0;
      const double err = relative_error(analytic, numeric, rep.floor);
      ++rep.coordinates;
      if (rep.coordinates == 1 || err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_input = t;
        rep.worst_index = i;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// IDConv reference

/// IDConv written as plain loops over raw arrays: adaptive pooling, the two
/// 1x1 convolutions as matrix products, softmax over the groups, kernel
/// blending, and a zero-padded per-sample depthwise convolution.
template <Real T>
Tensor<T> idconv_oracle(const Tensor<T>& x, const IdConvParams<T>& p) {
  const auto& s = p.shape;
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = s.kernel_size, g = s.groups, cr = s.squeezed();
  if (c != s.channels) throw ShapeError("idconv_oracle: channel mismatch");
  const auto xs = x.data();
  const auto w1 = p.squeeze.weight.data(), b1 = p.squeeze.bias.data();
  const auto w2 = p.expand.weight.data(), b2 = p.expand.bias.data();
  const auto bank = p.kernel_bank.data();
  std::vector<T> out(x.numel(), T(0));

  for (std::size_t b = 0; b < n; ++b) {
    // pooled[ch][i][j], window rows floor(i*h/k) .. ceil((i+1)*h/k)
    std::vector<T> pooled(c * k * k);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t y0 = i * h / k, y1 = ((i + 1) * h + k - 1) / k;
          const std::size_t x0 = j * w / k, x1 = ((j + 1) * w + k - 1) / k;
          T acc = 0;
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t xx = x0; xx < x1; ++xx) acc += xs[((b * c + ch) * h + y) * w + xx];
          pooled[(ch * k + i) * k + j] = acc / T((y1 - y0) * (x1 - x0));
        }
      }
    }
    std::vector<T> squeezed(cr * k * k);
    for (std::size_t o = 0; o < cr; ++o)
      for (std::size_t pos = 0; pos < k * k; ++pos) {
        T acc = b1[o];
        for (std::size_t ch = 0; ch < c; ++ch) acc += w1[o * c + ch] * pooled[ch * k * k + pos];
        squeezed[o * k * k + pos] = acc;
      }
    std::vector<T> logits(g * c * k * k);
    for (std::size_t o = 0; o < g * c; ++o)
      for (std::size_t pos = 0; pos < k * k; ++pos) {
        T acc = b2[o];
        for (std::size_t q = 0; q < cr; ++q) acc += w2[o * cr + q] * squeezed[q * k * k + pos];
        logits[o * k * k + pos] = acc;
      }
    std::vector<T> kernel(c * k * k, T(0));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t pos = 0; pos < k * k; ++pos) {
        T mx = logits[ch * k * k + pos];
        for (std::size_t gi = 1; gi < g; ++gi) mx = std::max(mx, logits[(gi * c + ch) * k * k + pos]);
        T denom = 0;
        for (std::size_t gi = 0; gi < g; ++gi) denom += std::exp(logits[(gi * c + ch) * k * k + pos] - mx);
        for (std::size_t gi = 0; gi < g; ++gi) {
          const T a = std::exp(logits[(gi * c + ch) * k * k + pos] - mx) / denom;
          kernel[ch * k * k + pos] += a * bank[(gi * c + ch) * k * k + pos];
        }
      }
    const std::ptrdiff_t pad = std::ptrdiff_t(k - 1) / 2;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          T acc = 0;
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - pad, ix = std::ptrdiff_t(xx + kx) - pad;
              if (iy < 0 || ix < 0 || iy >= std::ptrdiff_t(h) || ix >= std::ptrdiff_t(w)) continue;
              acc += kernel[(ch * k + ky) * k + kx] * xs[((b * c + ch) * h + std::size_t(iy)) * w + std::size_t(ix)];
            }
          out[((b * c + ch) * h + y) * w + xx] = acc;
        }
  }
  return Tensor<T>(x.shape(), std::move(out));
}

}  // namespace txnet
