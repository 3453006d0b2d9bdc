#pragma once

// Finite-difference checks for every differentiable op and mixer module, and
// the IDConv oracle comparison, as one runnable suite.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "txnet/analysis.hpp"

namespace txnet {

struct GradCase {
  std::string name;
  GradFn fn;
  std::vector<Tensor<double>> inputs;
  double tolerance = 1e-3;
};

inline constexpr double kLinearTolerance = 1e-5;
inline constexpr double kSmoothTolerance = 1e-3;

/// Standard-normal tensor from the stream (seed, key).
inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, std::string_view key, double stddev = 1.0) {
  RandomStream rng(seed, key);
  std::vector<double> v(shape.numel());
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor<double>(shape, std::move(v));
}

/// Values for a manifest: trainable tensors are N(0, stddev^2); BN running
/// statistics get random means and variances in [0.5, 1.5].
inline ParamStore<double> random_store(const ParamManifest& manifest, std::uint64_t seed, double stddev = 0.5) {
  ParamStore<double> store;
  for (const auto& spec : manifest) {
    RandomStream rng(seed, spec.name);
    std::vector<double> v(spec.shape.numel());
    const bool is_var = spec.name.ends_with(".running_var");
    for (auto& x : v) x = is_var ? 0.5 + rng.uniform() : (spec.trainable ? stddev : 0.2) * rng.normal();
    store.add(spec, Tensor<double>(spec.shape, std::move(v)));
  }
  return store;
}

/// Grad case for a module: inputs are x followed by the module's trainable
/// tensors in manifest order; non-trainable tensors are held fixed.
inline GradCase module_case(std::string name, const ParamManifest& manifest, Tensor<double> x, std::uint64_t seed,
                            std::function<Tensor<double>(const ParamStore<double>&, const Tensor<double>&)> body,
                            double tolerance = kSmoothTolerance) {
  const auto values = random_store(manifest, seed);
  GradCase c;
  c.name = std::move(name);
  c.tolerance = tolerance;
  c.inputs.push_back(std::move(x));
  for (const auto& e : values.entries())
    if (e.spec.trainable) c.inputs.push_back(e.tensor.clone());
  c.fn = [manifest, values, body](const std::vector<Tensor<double>>& in) {
    ParamStore<double> store;
    std::size_t k = 1;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      const auto& spec = manifest[i];
      Tensor<double> t = spec.trainable ? in[k++] : values.entries()[i].tensor;
      const bool tracked = t.requires_grad();
      store.add(spec, t);
      t.set_requires_grad(tracked);
    }
    return body(store, in[0]);
  };
  return c;
}

namespace detail {

inline Conv2dParams<double> conv_from(const std::vector<Tensor<double>>& in, std::size_t w, std::size_t b,
                                      std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                                      std::size_t pad, std::size_t groups) {
  Conv2dParams<double> p;
  p.in_channels = cin;
  p.out_channels = cout;
  p.kernel_h = p.kernel_w = k;
  p.stride = stride;
  p.padding = pad;
  p.groups = groups;
  p.weight = in[w];
  if (b < in.size()) p.bias = in[b];
  return p;
}

}  // namespace detail

/// One case per differentiable op, plus IDConv, OSRA, STE, MS-FFN and a full
/// micro D-Mixer block.
inline std::vector<GradCase> standard_grad_cases(std::uint64_t seed = 1) {
  using V = std::vector<Tensor<double>>;
  auto rt = [&](Shape s, std::string_view key) { return random_tensor(s, seed, key); };
  std::vector<GradCase> cases;

  cases.push_back({"add", [](const V& in) { return add(in[0], in[1]); },
                   {rt({2, 3, 4, 4}, "add.a"), rt({2, 3, 4, 4}, "add.b")}, kLinearTolerance});
  cases.push_back({"add (channel broadcast)", [](const V& in) { return add(in[0], in[1]); },
                   {rt({2, 3, 4, 4}, "addb.a"), rt({1, 3, 1, 1}, "addb.b")}, kLinearTolerance});
  cases.push_back({"mul", [](const V& in) { return mul(in[0], in[1]); },
                   {rt({2, 3, 4, 4}, "mul.a"), rt({2, 3, 4, 4}, "mul.b")}, kLinearTolerance});
  cases.push_back({"mul (channel broadcast)", [](const V& in) { return mul(in[0], in[1]); },
                   {rt({2, 3, 4, 4}, "mulb.a"), rt({1, 3, 1, 1}, "mulb.b")}, kLinearTolerance});
  cases.push_back({"scalar ops", [](const V& in) { return add(mul(in[0], 1.7), -0.3); },
                   {rt({2, 3, 4, 4}, "scalar")}, kLinearTolerance});
  cases.push_back({"sum", [](const V& in) { return sum(in[0]); }, {rt({2, 3, 4, 4}, "sum")}, kLinearTolerance});
  cases.push_back({"reshape", [](const V& in) { return reshape(in[0], Shape{6, 16}); },
                   {rt({2, 3, 4, 4}, "reshape")}, kLinearTolerance});
  cases.push_back({"split/concat",
                   [](const V& in) {
                     const std::size_t sizes[] = {2, 3};
                     auto parts = split_channels(in[0], std::span<const std::size_t>(sizes));
                     return concat_channels(std::vector<Tensor<double>>{mul(parts[1], 2.0), parts[0]});
                   },
                   {rt({2, 5, 3, 3}, "split")}, kLinearTolerance});
  cases.push_back({"conv2d dense stride 2",
                   [](const V& in) { return conv2d(in[0], detail::conv_from(in, 1, 2, 3, 4, 3, 2, 1, 1)); },
                   {rt({2, 3, 7, 7}, "conv.x"), rt({4, 3, 3, 3}, "conv.w"), rt({4}, "conv.b")}, kLinearTolerance});
  cases.push_back({"conv2d depthwise 7x7",
                   [](const V& in) { return conv2d(in[0], detail::conv_from(in, 1, 2, 4, 4, 7, 1, 3, 4)); },
                   {rt({2, 4, 6, 5}, "dw.x"), rt({4, 1, 7, 7}, "dw.w"), rt({4}, "dw.b")}, kLinearTolerance});
  cases.push_back({"conv2d depthwise overlapping reduction",
                   [](const V& in) { return conv2d(in[0], detail::conv_from(in, 1, 2, 3, 3, 7, 4, 3, 3)); },
                   {rt({1, 3, 9, 9}, "osr.x"), rt({3, 1, 7, 7}, "osr.w"), rt({3}, "osr.b")}, kLinearTolerance});
  cases.push_back({"conv2d grouped 1x1",
                   [](const V& in) { return conv2d(in[0], detail::conv_from(in, 1, 2, 4, 6, 1, 1, 0, 2)); },
                   {rt({2, 4, 3, 3}, "g.x"), rt({6, 2, 1, 1}, "g.w"), rt({6}, "g.b")}, kLinearTolerance});
  cases.push_back({"depthwise_conv_per_sample",
                   [](const V& in) { return depthwise_conv_per_sample(in[0], in[1], 2); },
                   {rt({2, 3, 5, 6}, "ps.x"), rt({2, 3, 5, 5}, "ps.k")}, kLinearTolerance});
  cases.push_back({"adaptive_avg_pool",
                   [](const V& in) { return adaptive_avg_pool(in[0], 3, 3); },
                   {rt({2, 3, 7, 5}, "pool")}, kLinearTolerance});
  cases.push_back({"softmax (axis 1)", [](const V& in) { return softmax(in[0], 1); },
                   {rt({2, 3, 4, 5}, "sm1")}, kLinearTolerance});
  cases.push_back({"softmax (last axis)", [](const V& in) { return softmax(in[0], 3); },
                   {rt({2, 2, 3, 6}, "sm3")}, kLinearTolerance});
  cases.push_back({"batch_norm_inference",
                   [](const V& in) {
                     NormParams<double> p;
                     p.num_channels = 3;
                     p.scale = in[1];
                     p.shift = in[2];
                     p.running_mean = Tensor<double>(Shape{3}, {0.1, -0.4, 0.3});
                     p.running_var = Tensor<double>(Shape{3}, {0.6, 1.3, 0.9});
                     return batch_norm_inference(in[0], p);
                   },
                   {rt({2, 3, 4, 4}, "bn.x"), rt({3}, "bn.scale"), rt({3}, "bn.shift")}, kLinearTolerance});
  cases.push_back({"linear", [](const V& in) { return linear(in[0], in[1], in[2]); },
                   {rt({2, 5, 4}, "lin.x"), rt({3, 4}, "lin.w"), rt({3}, "lin.b")}, 1e-8});
  cases.push_back({"gelu", [](const V& in) { return gelu(in[0]); }, {rt({2, 3, 4, 4}, "gelu")}, kSmoothTolerance});
  cases.push_back({"tokens/heads round trip",
                   [](const V& in) {
                     auto t = split_heads(to_tokens(in[0]), 2);
                     return from_tokens(merge_heads(mul(t, 3.0)), 3, 4);
                   },
                   {rt({2, 4, 3, 4}, "tok")}, kLinearTolerance});
  cases.push_back({"matmul_nt", [](const V& in) { return matmul_nt(in[0], in[1]); },
                   {rt({2, 2, 5, 3}, "mnt.a"), rt({2, 2, 4, 3}, "mnt.b")}, kLinearTolerance});
  cases.push_back({"matmul_nn", [](const V& in) { return matmul_nn(in[0], in[1]); },
                   {rt({2, 2, 5, 4}, "mnn.p"), rt({2, 2, 4, 3}, "mnn.v")}, kLinearTolerance});
  cases.push_back({"add_shared_bias", [](const V& in) { return add_shared_bias(in[0], in[1]); },
                   {rt({2, 2, 5, 4}, "bias.x"), rt({2, 5, 4}, "bias.b")}, kLinearTolerance});
  cases.push_back({"blend_kernels", [](const V& in) { return blend_kernels(in[0], in[1]); },
                   {rt({2, 3, 4, 9}, "blend.a"), rt({3, 4, 3, 3}, "blend.bank")}, kLinearTolerance});
  cases.push_back({"pick_position", [](const V& in) { return pick_position(in[0], 2, 1); },
                   {rt({2, 3, 4, 4}, "pick")}, kLinearTolerance});

  {
    ParamManifest m;
    const IdConvShape s{8, 3, 2, 4};
    append_idconv(m, "idconv", s);
    cases.push_back(module_case("idconv", m, rt({2, 8, 6, 5}, "idconv.x"), seed,
                                [s](const ParamStore<double>& st, const Tensor<double>& x) {
                                  return idconv_forward(x, bind_idconv(st, "idconv", s));
                                }));
  }
  {
    ParamManifest m;
    const OsraShape s{8, 2, 2, 6, 6};
    append_osra(m, "osra", s);
    cases.push_back(module_case("osra", m, rt({2, 8, 6, 6}, "osra.x"), seed,
                                [s](const ParamStore<double>& st, const Tensor<double>& x) {
                                  return osra_forward(x, bind_osra(st, "osra", s));
                                }));
  }
  {
    ParamManifest m;
    const SteShape s{16, 8, 4};
    append_ste(m, "ste", s);
    cases.push_back(module_case("ste", m, rt({2, 16, 4, 4}, "ste.x"), seed,
                                [s](const ParamStore<double>& st, const Tensor<double>& x) {
                                  return ste_forward(x, bind_ste(st, "ste", s));
                                }));
  }
  {
    ParamManifest m;
    const MsFfnShape s{4, 4, {1, 3, 5, 7}};
    append_msffn(m, "ffn", s);
    cases.push_back(module_case("msffn", m, rt({2, 4, 5, 5}, "ffn.x"), seed,
                                [s](const ParamStore<double>& st, const Tensor<double>& x) {
                                  return msffn_forward(x, bind_msffn(st, "ffn", s));
                                }));
  }
  {
    // First block of the micro model at its native 16x16 resolution.
    const auto cfg = presets::micro(MixerMode::kDMixer);
    const auto& st = cfg.stages[0];
    ParamManifest m;
    append_rel_bias(m, "rel_bias", dmixer_shape(cfg, st).osra);
    append_block(m, "block", cfg, st);
    const Shape xs{1, std::size_t(st.channels), std::size_t(st.height), std::size_t(st.width)};
    cases.push_back(module_case("micro D-Mixer block", m, rt(xs, "block.x"), seed,
                                [cfg, st](const ParamStore<double>& store, const Tensor<double>& x) {
                                  return block_forward(x, bind_block(store, "block", cfg, st, "rel_bias"));
                                }));
  }
  return cases;
}

// ---------------------------------------------------------------------------
// IDConv oracle suite

struct OracleReport {
  std::size_t instances = 0;
  double max_abs_diff = 0.0;      // idconv_forward vs idconv_oracle
  double g1_max_abs_diff = 0.0;   // G = 1 vs static depthwise conv
  double batch_max_abs_diff = 0.0;  // identical samples vs one shared kernel
  double tolerance = 1e-6;

  bool passed() const {
    return max_abs_diff < tolerance && g1_max_abs_diff < tolerance && batch_max_abs_diff < tolerance;
  }
};

namespace detail {

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline IdConvParams<double> random_idconv(const IdConvShape& s, std::uint64_t seed, const std::string& prefix) {
  ParamManifest m;
  append_idconv(m, prefix, s);
  return bind_idconv(random_store(m, seed), prefix, s);
}

}  // namespace detail

/// `instances` random IDConv configurations with extents <= 8, each compared
/// against the loop oracle, plus the G = 1 and batch-constant reductions.
inline OracleReport run_idconv_oracle(std::uint64_t seed = 1, std::size_t instances = 50) {
  OracleReport rep;
  rep.instances = instances;
  RandomStream pick(seed, "oracle.shapes");
  const std::size_t kernels[] = {1, 3, 5, 7};
  for (std::size_t i = 0; i < instances; ++i) {
    const std::string key = "oracle" + std::to_string(i);
    const std::size_t n = 1 + pick.next_u64() % 2;
    const std::size_t c = 4 * (1 + pick.next_u64() % 2);
    const std::size_t h = 3 + pick.next_u64() % 6, w = 3 + pick.next_u64() % 6;
    std::size_t k = kernels[pick.next_u64() % 4];
    while (k > std::min(h, w)) k -= 2;
    const std::size_t g = 1 + pick.next_u64() % 4;
    const std::size_t r = std::size_t(1) << (pick.next_u64() % 3);
    const IdConvShape s{c, k, g, r};
    auto p = detail::random_idconv(s, seed + i, key);
    auto x = random_tensor(Shape{n, c, h, w}, seed, key + ".x");
    rep.max_abs_diff = std::max(rep.max_abs_diff, detail::max_abs_diff(idconv_forward(x, p), idconv_oracle(x, p)));

    // G = 1: softmax over one group is 1, so the kernel is the bank itself.
    const IdConvShape s1{c, k, 1, r};
    auto p1 = detail::random_idconv(s1, seed + i, key + ".g1");
    Conv2dParams<double> stat;
    stat.in_channels = stat.out_channels = stat.groups = c;
    stat.kernel_h = stat.kernel_w = k;
    stat.padding = k / 2;
    stat.weight = reshape(p1.kernel_bank, Shape{c, 1, k, k});
    rep.g1_max_abs_diff = std::max(rep.g1_max_abs_diff, detail::max_abs_diff(idconv_forward(x, p1), conv2d(x, stat)));

    // Identical samples share one generated kernel.
    const std::size_t per = c * h * w;
    std::vector<double> rep_data;
    for (std::size_t b = 0; b < 3; ++b) rep_data.insert(rep_data.end(), x.data().begin(), x.data().begin() + per);
    Tensor<double> batch(Shape{3, c, h, w}, rep_data);
    Tensor<double> first(Shape{1, c, h, w}, std::vector<double>(x.data().begin(), x.data().begin() + per));
    Conv2dParams<double> shared = stat;
    shared.weight = reshape(idconv_generate_kernels(first, p), Shape{c, 1, k, k});
    const auto out = idconv_forward(batch, p);
    const auto ref = conv2d(batch, shared);
    rep.batch_max_abs_diff = std::max(rep.batch_max_abs_diff, detail::max_abs_diff(out, ref));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Whole suite

struct CheckSuiteReport {
  std::vector<GradCheckReport> grads;
  OracleReport oracle;

  bool passed() const {
    for (const auto& g : grads)
      if (!g.passed()) return false;
    return oracle.passed();
  }

  const GradCheckReport* worst() const {
    const GradCheckReport* w = nullptr;
    for (const auto& g : grads)
      if (!w || g.max_rel_error / g.tolerance > w->max_rel_error / w->tolerance) w = &g;
    return w;
  }
};

/// Runs the standard cases, any `extra` cases, and the oracle suite.
inline CheckSuiteReport run_check_suite(std::uint64_t seed = 1, const std::vector<GradCase>& extra = {}) {
  CheckSuiteReport rep;
  auto cases = standard_grad_cases(seed);
  cases.insert(cases.end(), extra.begin(), extra.end());
  for (const auto& c : cases) rep.grads.push_back(grad_check(c.name, c.fn, c.inputs, c.tolerance, seed));
  rep.oracle = run_idconv_oracle(seed);
  return rep;
}

}  // namespace txnet
