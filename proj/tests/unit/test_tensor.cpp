#include <gtest/gtest.h>

#include <cstring>
#include <limits>
#include <vector>

#include "txnet/random.hpp"
#include "txnet/tensor.hpp"

using namespace txnet;

namespace {

Tensor<double> iota_tensor(Shape s, double start = 0.0) {
  std::vector<double> v(s.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = start + double(i);
  return Tensor<double>(s, v);
}

}  // namespace

TEST(Shape, RejectsZeroExtentAndBadRank) {
  EXPECT_THROW((Shape{2, 0, 3}), SizeError);
  EXPECT_THROW((Shape{1, 1, 1, 1, 1}), ShapeError);
  const std::size_t huge = std::numeric_limits<std::size_t>::max() / 2;
  EXPECT_THROW((Shape{huge, 4}), SizeError);
}

TEST(Shape, PadsToNchw) {
  Shape s{5, 7};
  auto d = s.nchw();
  EXPECT_EQ(d[0], 1u);
  EXPECT_EQ(d[1], 1u);
  EXPECT_EQ(d[2], 5u);
  EXPECT_EQ(d[3], 7u);
  EXPECT_EQ(s.numel(), 35u);
}

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
}

TEST(Tensor, SplitConcatIsExactIdentity) {
  auto x = iota_tensor({2, 7, 3, 2}, -4.25);
  const std::size_t sizes[] = {4, 3};
  auto parts = split_channels(x, std::span<const std::size_t>(sizes));
  ASSERT_EQ(parts.size(), 2u);
  EXPECT_EQ(parts[0].dim(1), 4u);
  auto y = concat_channels(parts);
  ASSERT_TRUE(y.shape() == x.shape());
  EXPECT_EQ(std::memcmp(y.data().data(), x.data().data(), x.numel() * sizeof(double)), 0);
}

TEST(Tensor, SplitErrors) {
  auto x = iota_tensor({1, 5, 2, 2});
  EXPECT_THROW(split_channels(x, std::size_t(2)), SplitError);
  const std::size_t bad[] = {2, 2};
  EXPECT_THROW(split_channels(x, std::span<const std::size_t>(bad)), SplitError);
  const std::size_t empty[] = {0, 5};
  EXPECT_THROW(split_channels(x, std::span<const std::size_t>(empty)), SplitError);
}

TEST(Tensor, BroadcastAddAndShapeMismatch) {
  auto x = iota_tensor({2, 3, 2, 2});
  Tensor<double> b(Shape{1, 3, 1, 1}, {10, 20, 30});
  auto y = add(x, b);
  EXPECT_DOUBLE_EQ(y.at(1, 2, 1, 1), x.at(1, 2, 1, 1) + 30);
  EXPECT_THROW(add(x, iota_tensor({2, 3, 2, 1})), ShapeError);
}

TEST(Tape, RecordsOnlyTrackedOps) {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto a = iota_tensor({2, 2});
  auto b = iota_tensor({2, 2});
  (void)add(a, b);
  EXPECT_EQ(tape.size(), 0u);
  a.set_requires_grad(true);
  (void)add(a, b);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Tape, NoRecordingWithoutScope) {
  auto a = iota_tensor({2, 2});
  a.set_requires_grad(true);
  auto y = sum(mul(a, a));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, GradientOfProductAndFanOut) {
  auto a = iota_tensor({3}, 1.0);  // 1 2 3
  a.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto y = sum(add(mul(a, a), mul(a, 3.0)));  // sum a^2 + 3a
    tape.backward(y);
  }
  ASSERT_TRUE(a.has_grad());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a.grad()[i], 2 * a[i] + 3);
}

TEST(Tape, BackwardContract) {
  auto a = iota_tensor({2});
  a.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = mul(a, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);  // not scalar
  auto s = sum(y);
  tape.backward(s);
  EXPECT_THROW(tape.backward(s), ContractError);  // second call
}

TEST(Tape, ScopesNestAndRestore) {
  Tape<double> outer, inner;
  auto a = iota_tensor({2});
  a.set_requires_grad(true);
  {
    TapeScope<double> s1(outer);
    {
      TapeScope<double> s2(inner);
      (void)mul(a, 2.0);
    }
    (void)mul(a, 2.0);
    (void)mul(a, 2.0);
  }
  EXPECT_EQ(inner.size(), 1u);
  EXPECT_EQ(outer.size(), 2u);
}

TEST(Tensor, CastRoundTrip) {
  auto x = iota_tensor({4}, 0.5);
  auto f = cast<float>(x);
  auto d = cast<double>(f);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(d[i], x[i]);
}

TEST(Random, StreamsAreKeyedAndReproducible) {
  RandomStream a(7, "w"), b(7, "w"), c(7, "v"), d(8, "w");
  const auto x = a.next_u64();
  EXPECT_EQ(x, b.next_u64());
  EXPECT_NE(x, c.next_u64());
  EXPECT_NE(x, d.next_u64());
}

TEST(Random, TruncatedNormalIsBoundedWithRightSpread) {
  RandomStream r(1, "t");
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = r.truncated_normal(0.02);
    ASSERT_LE(std::abs(v), 0.04);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(mean, 0.0, 1e-3);
  // std of a normal truncated at +-2 sigma is 0.8796 sigma
  EXPECT_NEAR(sd, 0.02 * 0.8796, 5e-4);
}

TEST(FlopScope, CountsOnlyInsideScope) {
  FlopTally t;
  detail::count_flops(5);
  {
    FlopScope s(t);
    detail::count_flops(7);
  }
  detail::count_flops(11);
  EXPECT_EQ(t.flops, 7u);
}
