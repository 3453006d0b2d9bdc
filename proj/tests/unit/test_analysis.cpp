#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <numeric>

#include "txnet/analysis.hpp"
#include "txnet/check_suite.hpp"

using namespace txnet;

namespace {

ModelConfig validated(ModelConfig cfg) {
  validate(cfg);
  return cfg;
}

// Parameter count of a config written out by hand from the layer list,
// independent of the manifest builders.
std::uint64_t hand_count(const ModelConfig& cfg) {
  auto conv = [](std::uint64_t cin, std::uint64_t cout, std::uint64_t k, std::uint64_t groups) {
    return cout * (cin / groups) * k * k + cout;
  };
  std::uint64_t total = 0, in = 3;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = cfg.stages[i];
    const std::uint64_t c = s.channels, res = s.height;
    total += conv(in, c, i == 0 ? 7 : 3, 1) + 2 * c;  // embed conv + BN affine
    const std::uint64_t ca = c / 2, ci = c - ca, cs = std::max<std::uint64_t>((c + 4) / 8, 16);
    std::uint64_t block = conv(c, c, 7, c) + 2 * c + 2 * c;  // dpe, norm1, norm2
    if (cfg.mixer_mode == MixerMode::kDMixer) {
      const std::uint64_t sr = s.sr_stride, k = s.kernel_size, g = s.groups, cr = ci / 4;
      if (sr > 1) block += conv(ca, ca, sr + 3, ca) + 2 * ca;
      block += conv(ca, ca, 3, ca) + (ca * ca + ca) + (ca * 2 * ca + 2 * ca);
      block += (ci * cr + cr) + (cr * g * ci + g * ci) + g * ci * k * k;
      const std::uint64_t kv = std::uint64_t(osr_extent(int(res), int(sr)));
      total += s.heads * res * res * kv * kv;  // shared per stage
    } else {
      block += conv(c, c, 7, c);
    }
    block += conv(c, c, 3, c) + (c * cs + cs) + (cs * c + c);
    const std::uint64_t hid = c * s.expansion, part = hid / 4;
    block += (c * hid + hid) + (hid * c + c);
    for (std::uint64_t k : {1, 3, 5, 7}) block += part * k * k + part;
    total += block * std::uint64_t(s.blocks);
    in = c;
  }
  return total + in * cfg.num_classes + cfg.num_classes;
}

}  // namespace

TEST(CountParams, PointwiseConvToy) {
  ParamManifest m;
  append_pointwise(m, "fc", 4, 8);
  const auto r = count_params(m);
  EXPECT_EQ(r.total_params, 40u);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].layer, "fc");
}

TEST(CountParams, MicroMatchesHandCount) {
  for (auto mode : {MixerMode::kDMixer, MixerMode::kDwConvBaseline}) {
    const auto cfg = presets::micro(mode);
    EXPECT_EQ(count_params(cfg).total_params, hand_count(cfg)) << to_string(mode);
    EXPECT_EQ(count_params(build_model<float>(cfg, 1)).total_params, hand_count(cfg));
  }
  EXPECT_EQ(count_params(presets::tiny()).total_params, hand_count(presets::tiny()));
}

TEST(CountParams, ExcludesRunningStatsAndIgnoresResolution) {
  const auto cfg = presets::micro();
  const auto r = count_params(cfg);
  EXPECT_EQ(r.find("stage0.embed.norm")->params, 16u);
  const auto cfg2 = with_resolution(cfg, 128);
  validate(cfg2);
  const auto a = count_params(cfg), b = count_params(cfg2);
  // Only the relative-position tables depend on the token count.
  std::uint64_t rel_a = 0, rel_b = 0;
  for (const auto& row : a.rows)
    if (row.layer.ends_with("rel_bias")) rel_a += row.params;
  for (const auto& row : b.rows)
    if (row.layer.ends_with("rel_bias")) rel_b += row.params;
  EXPECT_EQ(a.total_params - rel_a, b.total_params - rel_b);
  const auto base = presets::micro(MixerMode::kDwConvBaseline);
  EXPECT_EQ(count_params(base).total_params, count_params(with_resolution(base, 128)).total_params);
}

TEST(CostReport, TotalsAreColumnSums) {
  const auto r = summarize(presets::small());
  std::uint64_t p = 0, f = 0;
  for (const auto& row : r.rows) {
    p += row.params;
    f += row.flops;
  }
  EXPECT_EQ(p, r.total_params);
  EXPECT_EQ(f, r.total_flops);
  const auto s = r.by_stage();
  EXPECT_EQ(s.total_params, r.total_params);
  EXPECT_EQ(s.total_flops, r.total_flops);
  EXPECT_EQ(s.rows.size(), 6u);  // stage0..3, pool, head
  const auto j = r.to_json();
  EXPECT_EQ(j["convention"], "1 MAC = 1 FLOP");
  EXPECT_EQ(j["total_flops"].get<std::uint64_t>(), r.total_flops);
}

TEST(CountFlops, SteClosedForm) {
  EXPECT_EQ(ste_flops({128, 8, 16}, 7, 7), 257152u);
  for (std::size_t c : {128, 256, 448, 512})
    for (std::size_t hw : {7, 14, 28}) {
      const SteShape s{c, 8, 16};
      ASSERT_GE(c / 8, 16u);
      EXPECT_EQ(ste_flops(s, hw, hw), hw * hw * c * (2 * c / 8 + 9));
    }
}

TEST(CountFlops, AnalyticEqualsInstrumentedTally) {
  for (auto mode : {MixerMode::kDMixer, MixerMode::kDwConvBaseline}) {
    auto m = build_model<double>(presets::micro(mode), 2);
    EXPECT_EQ(count_flops(m, 64).total_flops, measure_flops(m)) << to_string(mode);
  }
  auto big = build_model<float>(validated(with_resolution(presets::micro(), 128)), 2);
  EXPECT_EQ(count_flops(big, 128).total_flops, measure_flops(big));
}

TEST(CountFlops, ConvNetworkScalesWithArea) {
  const auto a = count_flops(presets::micro(MixerMode::kDwConvBaseline));
  const auto b = count_flops(validated(with_resolution(presets::micro(MixerMode::kDwConvBaseline), 128)));
  const auto head = a.find("head")->flops;
  EXPECT_EQ(b.find("head")->flops, head);
  EXPECT_EQ(b.total_flops - head, 4 * (a.total_flops - head));
}

TEST(CountFlops, UnboundResolutionIsContractError) {
  auto m = build_model<float>(presets::micro(), 1);
  EXPECT_THROW(count_flops(m, 224), ContractError);
}

TEST(Erf, StemSupportIsTheKernelFootprint) {
  auto m = build_model<double>(presets::micro(), 3);
  auto e = erf_map_seeded(m, 1, 4, "stage0.embed", 1);
  EXPECT_EQ(e.center_h, 8u);
  // Output cell 8 at stride 4, kernel 7, pad 3 reads pixels 29..35.
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const bool inside = y >= 29 && y <= 35 && x >= 29 && x <= 35;
      ASSERT_EQ(e.at(y, x) > 0.0, inside) << y << "," << x;
    }
  EXPECT_DOUBLE_EQ(support_fraction(e, 0.0), 49.0 / 4096.0);
}

TEST(Erf, IdconvSupportWithinReceptiveField) {
  auto m = build_model<double>(presets::micro(), 5);
  auto e = erf_map_seeded(m, 2, 8, "stage0.block0.idconv", 1);
  // Stage-0 radius: DPE 3 + IDConv 3 cells around cell 8 -> cells 2..14,
  // which read pixels 4*2-3 .. 4*14+3.
  const std::size_t lo = 4 * 2 - 3, hi = 4 * 14 + 3;
  std::size_t inside = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const bool in_field = y >= lo && y <= hi && x >= lo && x <= hi;
      if (e.at(y, x) > kErfSupportThreshold) {
        ASSERT_TRUE(in_field) << y << "," << x << " = " << e.at(y, x);
        ++inside;
      }
    }
  EXPECT_GT(inside, 0u);
}

TEST(Erf, OsraReachesEverywhere) {
  auto m = build_model<double>(presets::micro(), 5);
  auto e = erf_map_seeded(m, 2, 8, "stage0.block0.osra", 1);
  EXPECT_GE(support_fraction(e), 0.95);
}

TEST(Erf, NormalizedNonnegativeAndScaleInvariantAtStem) {
  auto m = build_model<double>(presets::micro(), 3);
  auto imgs = random_images<double>(4, 3, 3, 64);
  auto a = erf_map(m, imgs, "stage0.embed", 1);
  auto b = erf_map(m, mul(imgs, 3.5), "stage0.embed", 1);
  EXPECT_DOUBLE_EQ(*std::max_element(a.values.begin(), a.values.end()), 1.0);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    ASSERT_GE(a.values[i], 0.0);
    ASSERT_NEAR(a.values[i], b.values[i], 1e-12);
  }
}

TEST(Erf, ThreadCountDoesNotChangeTheMap) {
  auto m = build_model<float>(presets::micro(), 3);
  auto a = erf_map_seeded(m, 6, 6, "stage1", 1);
  auto b = erf_map_seeded(m, 6, 6, "stage1", 3);
  ASSERT_EQ(a.values.size(), b.values.size());
  EXPECT_EQ(std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)), 0);
  // parameters are tracked again afterwards
  EXPECT_TRUE(m.params().get("head.weight").requires_grad());
}

TEST(Erf, UnknownTap) {
  auto m = build_model<float>(presets::micro(), 3);
  EXPECT_THROW(erf_map_seeded(m, 1, 1, "stage7", 1), SelectorError);
}

TEST(GradCheck, LinearAndSoftmaxTolerances) {
  for (const auto& c : standard_grad_cases(4)) {
    if (c.name != "linear" && c.name.rfind("softmax", 0) != 0) continue;
    const auto r = grad_check(c.name, c.fn, c.inputs, c.tolerance, 4);
    EXPECT_GE(r.coordinates, 32u);
    if (c.name == "linear") {
      EXPECT_LT(r.max_rel_error, 1e-8) << r.describe();
    } else {
      EXPECT_LT(r.max_rel_error, 1e-5) << r.describe();
    }
  }
}

TEST(GradCheck, FullSuitePasses) {
  const auto rep = run_check_suite(2);
  for (const auto& g : rep.grads) EXPECT_TRUE(g.passed()) << g.describe();
  EXPECT_TRUE(rep.oracle.passed());
}

namespace {

// y = 2x with a backward rule that claims 3.
Tensor<double> doubled_wrong(const Tensor<double>& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2 * x[i];
  auto xn = x.node();
  return detail::finish<double>("doubled_wrong", Tensor<double>(x.shape(), out), {x}, [xn](std::span<const double> g) {
    auto gx = detail::grad_of(xn);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 3 * g[i];
  });
}

}  // namespace

TEST(GradCheck, CorruptedBackwardFailsLoudly) {
  GradCase bad{"corrupted", [](const std::vector<Tensor<double>>& in) { return doubled_wrong(in[0]); },
               {random_tensor({2, 3, 2, 2}, 1, "bad")}, 1e-3};
  const auto r = grad_check(bad.name, bad.fn, bad.inputs, bad.tolerance);
  EXPECT_FALSE(r.passed());
  EXPECT_NEAR(r.max_rel_error, 1.0 / 3.0, 1e-6);
  EXPECT_NE(r.describe().find("worst at input 0"), std::string::npos);
  EXPECT_FALSE(run_check_suite(1, {bad}).passed());
}
