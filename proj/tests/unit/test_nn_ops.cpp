#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "txnet/check_suite.hpp"
#include "txnet/nn_ops.hpp"

using namespace txnet;

namespace {

Tensor<double> rnd(Shape s, const char* key) { return random_tensor(s, 3, key); }

// Direct cross-correlation with zero padding, any stride and groups.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                               std::size_t stride, std::size_t pad, std::size_t groups, std::size_t& ho,
                               std::size_t& wo) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), cg = w.dim(1), k = w.dim(2);
  ho = (h + 2 * pad - k) / stride + 1;
  wo = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * cout * ho * wo);
  const std::size_t opg = cout / groups;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t z = 0; z < wo; ++z) {
          double acc = b.defined() ? b[o] : 0.0;
          const std::size_t g = o / opg;
          for (std::size_t ci = 0; ci < cg; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = long(y * stride + ky) - long(pad), ix = long(z * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                acc += w[((o * cg + ci) * k + ky) * k + kx] * x.at(i, g * cg + ci, std::size_t(iy), std::size_t(ix));
              }
          out[((i * cout + o) * ho + y) * wo + z] = acc;
        }
  (void)cin;
  return out;
}

Conv2dParams<double> conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                          std::size_t groups, const char* key) {
  Conv2dParams<double> p;
  p.in_channels = cin;
  p.out_channels = cout;
  p.kernel_h = p.kernel_w = k;
  p.stride = stride;
  p.padding = pad;
  p.groups = groups;
  p.weight = rnd({cout, cin / groups, k, k}, key);
  p.bias = rnd({cout}, "bias");
  return p;
}

}  // namespace

struct ConvCase {
  std::size_t cin, cout, k, stride, pad, groups, h, w;
};

class Conv2dReference : public ::testing::TestWithParam<ConvCase> {};

TEST_P(Conv2dReference, MatchesDirectLoops) {
  const auto c = GetParam();
  auto x = rnd({2, c.cin, c.h, c.w}, "x");
  auto p = conv(c.cin, c.cout, c.k, c.stride, c.pad, c.groups, "w");
  FlopTally tally;
  Tensor<double> y;
  {
    FlopScope s(tally);
    y = conv2d(x, p);
  }
  std::size_t ho = 0, wo = 0;
  auto ref = naive_conv(x, p.weight, p.bias, c.stride, c.pad, c.groups, ho, wo);
  ASSERT_EQ(y.dim(2), ho);
  ASSERT_EQ(y.dim(3), wo);
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-12) << "at " << i;
  EXPECT_EQ(tally.flops, 2 * ho * wo * c.cout * (c.cin / c.groups) * c.k * c.k);
}

INSTANTIATE_TEST_SUITE_P(Shapes, Conv2dReference,
                         ::testing::Values(ConvCase{3, 4, 3, 1, 1, 1, 5, 6}, ConvCase{3, 8, 7, 4, 3, 1, 16, 16},
                                           ConvCase{6, 6, 7, 1, 3, 6, 5, 4}, ConvCase{4, 4, 11, 8, 5, 4, 16, 16},
                                           ConvCase{4, 6, 1, 1, 0, 2, 3, 3}, ConvCase{5, 5, 5, 1, 2, 5, 2, 2},
                                           ConvCase{2, 3, 3, 2, 1, 1, 7, 7}));

TEST(Conv2d, RejectsChannelMismatch) {
  auto p = conv(4, 4, 3, 1, 1, 1, "w");
  EXPECT_THROW(conv2d(rnd({1, 3, 4, 4}, "x"), p), ShapeError);
}

TEST(DepthwisePerSample, EvenKernelIsContractError) {
  EXPECT_THROW(depthwise_conv_per_sample(rnd({1, 2, 4, 4}, "x"), rnd({1, 2, 4, 4}, "k"), 2), ContractError);
}

TEST(DepthwisePerSample, EachSampleUsesItsOwnKernel) {
  auto x = rnd({2, 3, 5, 5}, "x");
  auto k = rnd({2, 3, 3, 3}, "k");
  auto y = depthwise_conv_per_sample(x, k, 1);
  for (std::size_t b = 0; b < 2; ++b) {
    Conv2dParams<double> p;
    p.in_channels = p.out_channels = p.groups = 3;
    p.kernel_h = p.kernel_w = 3;
    p.padding = 1;
    auto kd = k.data().subspan(b * 27, 27);
    p.weight = Tensor<double>(Shape{3, 1, 3, 3}, std::vector<double>(kd.begin(), kd.end()));
    auto xd = x.data().subspan(b * 75, 75);
    auto ref = conv2d(Tensor<double>(Shape{1, 3, 5, 5}, std::vector<double>(xd.begin(), xd.end())), p);
    for (std::size_t i = 0; i < 75; ++i) ASSERT_NEAR(y[b * 75 + i], ref[i], 1e-13);
  }
}

TEST(AdaptivePool, DivisibleCaseIsBlockMean) {
  auto x = rnd({1, 2, 4, 6}, "x");
  auto y = adaptive_avg_pool(x, 2, 3);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double m = 0;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) m += x.at(0, c, 2 * i + a, 2 * j + b);
        EXPECT_NEAR(y.at(0, c, i, j), m / 4, 1e-14);
      }
}

TEST(AdaptivePool, OverlappingWindows) {
  // 5 -> 3: windows [0,2), [1,4), [3,5)
  Tensor<double> x(Shape{1, 1, 1, 5}, {1, 2, 3, 4, 5});
  auto y = adaptive_avg_pool(x, 1, 3);
  EXPECT_DOUBLE_EQ(y[0], 1.5);
  EXPECT_DOUBLE_EQ(y[1], 3.0);
  EXPECT_DOUBLE_EQ(y[2], 4.5);
}

TEST(Softmax, NormalizesAndIsStable) {
  Tensor<double> x(Shape{1, 4}, {1000.0, 1001.0, 999.0, -1e6});
  auto y = softmax(x, 1);
  double s = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(std::isfinite(y[i]));
    s += y[i];
  }
  EXPECT_NEAR(s, 1.0, 1e-15);
  EXPECT_NEAR(y[1] / y[0], std::exp(1.0), 1e-12);
  EXPECT_EQ(y[3], 0.0);
}

TEST(Softmax, AxisOne) {
  auto x = rnd({2, 3, 2, 2}, "x");
  auto y = softmax(x, 1);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t w = 0; w < 2; ++w) {
        double s = 0;
        for (std::size_t c = 0; c < 3; ++c) s += y.at(n, c, h, w);
        EXPECT_NEAR(s, 1.0, 1e-15);
      }
}

TEST(BatchNorm, InferenceFormula) {
  auto x = rnd({2, 3, 2, 2}, "x");
  NormParams<double> p;
  p.num_channels = 3;
  p.scale = Tensor<double>(Shape{3}, {1.5, -0.5, 2.0});
  p.shift = Tensor<double>(Shape{3}, {0.1, 0.2, 0.3});
  p.running_mean = Tensor<double>(Shape{3}, {0.5, -1.0, 0.0});
  p.running_var = Tensor<double>(Shape{3}, {4.0, 0.25, 1.0});
  auto y = batch_norm_inference(x, p);
  for (std::size_t c = 0; c < 3; ++c) {
    const double v = x.at(1, c, 1, 0);
    const double want = (v - p.running_mean[c]) / std::sqrt(p.running_var[c] + 1e-5) * p.scale[c] + p.shift[c];
    EXPECT_NEAR(y.at(1, c, 1, 0), want, 1e-14);
  }
}

TEST(Linear, MatchesMatrixProduct) {
  auto x = rnd({2, 3, 4}, "x");
  auto w = rnd({5, 4}, "w");
  auto b = rnd({5}, "b");
  auto y = linear(x, w, b);
  ASSERT_EQ(y.dim(2), 5u);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t o = 0; o < 5; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < 4; ++i) acc += x[r * 4 + i] * w[o * 4 + i];
      EXPECT_NEAR(y[r * 5 + o], acc, 1e-13);
    }
}

TEST(Gelu, TanhApproximationValues) {
  Tensor<double> x(Shape{3}, {0.0, 1.0, -2.0});
  auto y = gelu(x);
  auto ref = [](double v) {
    return 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
  };
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.8411919906082768, 1e-14);
  EXPECT_NEAR(y[2], ref(-2.0), 1e-14);
}

TEST(Tokens, RoundTripsAndHeadsLayout) {
  auto x = rnd({2, 6, 3, 4}, "x");
  auto t = to_tokens(x);
  ASSERT_TRUE((t.shape() == Shape{2, 12, 6}));
  EXPECT_DOUBLE_EQ(t[(1 * 12 + 5) * 6 + 4], x.at(1, 4, 1, 1));
  auto heads = split_heads(t, 3);
  ASSERT_TRUE((heads.shape() == Shape{2, 3, 12, 2}));
  // head 2, token 5, channel 1 -> channel 5
  EXPECT_DOUBLE_EQ(heads[((1 * 3 + 2) * 12 + 5) * 2 + 1], x.at(1, 5, 1, 1));
  auto back = from_tokens(merge_heads(heads), 3, 4);
  for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(back[i], x[i]);
}

TEST(Matmul, NtAndNnAgreeWithLoops) {
  auto a = rnd({1, 2, 3, 4}, "a");
  auto b = rnd({1, 2, 5, 4}, "b");
  auto s = matmul_nt(a, b);
  ASSERT_TRUE((s.shape() == Shape{1, 2, 3, 5}));
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (std::size_t d = 0; d < 4; ++d) acc += a[((h * 3) + i) * 4 + d] * b[((h * 5) + j) * 4 + d];
        EXPECT_NEAR(s[(h * 3 + i) * 5 + j], acc, 1e-13);
      }
  auto v = rnd({1, 2, 5, 4}, "v");
  auto z = matmul_nn(s, v);
  ASSERT_TRUE((z.shape() == Shape{1, 2, 3, 4}));
  double acc = 0;
  for (std::size_t j = 0; j < 5; ++j) acc += s[(1 * 3 + 2) * 5 + j] * v[(1 * 5 + j) * 4 + 3];
  EXPECT_NEAR(z[(1 * 3 + 2) * 4 + 3], acc, 1e-13);
}

TEST(BlendKernels, WeightedSumOverGroups) {
  auto attn = rnd({1, 2, 3, 4}, "a");
  auto bank = rnd({2, 3, 2, 2}, "bank");
  auto k = blend_kernels(attn, bank);
  ASSERT_TRUE((k.shape() == Shape{1, 3, 2, 2}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 4; ++p) {
      const double want = attn[(0 * 3 + c) * 4 + p] * bank[(0 * 3 + c) * 4 + p] +
                          attn[(1 * 3 + c) * 4 + p] * bank[(1 * 3 + c) * 4 + p];
      EXPECT_NEAR(k[c * 4 + p], want, 1e-14);
    }
}

#ifndef NDEBUG
TEST(NumericGuard, NonFiniteIsReported) {
  Tensor<double> x(Shape{2}, {1.0, std::numeric_limits<double>::infinity()});
  EXPECT_THROW(gelu(mul(x, 0.0)), NumericError);
}
#endif
