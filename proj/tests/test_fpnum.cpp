// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "mpt/fpnum.hpp"
#include "support.hpp"

namespace mpt {
namespace {

TEST(FpFormat, DerivedLimits) {
  const FpFormat f{5, 2, 0};
  EXPECT_EQ(f.bitwidth(), 8);
  EXPECT_EQ(f.base_bias(), 15);
  EXPECT_EQ(f.max_magnitude(), 114688.0);
  EXPECT_EQ(f.min_subnormal(), std::ldexp(1.0, -16));
  EXPECT_EQ((FpFormat{4, 3, 4}.max_magnitude()), 30.0);
  EXPECT_EQ((FpFormat{6, 9, 0}.bitwidth()), 16);
}

TEST(FpFormat, Fp32LimitsFollowTheAllFiniteConvention) {
  // Every exponent code is finite, so the top binade is 2^128.
  EXPECT_EQ(kFp32.max_magnitude(), std::ldexp(2.0 - std::ldexp(1.0, -23), 128));
  EXPECT_EQ(kFp32.min_subnormal(), std::ldexp(1.0, -149));
}

TEST(FpFormat, ValidityGuard) {
  EXPECT_FALSE((FpFormat{0, 3, 0}.is_valid()));
  EXPECT_FALSE((FpFormat{3, -1, 0}.is_valid()));
  EXPECT_FALSE((FpFormat{11, 52, -100}.is_valid()));
  EXPECT_THROW(round(FpFormat{0, 3, 0}, 1.0), DomainError);
}

TEST(EnumerateValues, Fp210HandEnumeration) {
  const auto v = enumerate_values(FpFormat{2, 1, 0});
  // Hand enumeration of the 4 exponent codes x 2 mantissas: 0 and 0.5
  // (subnormal), then 1, 1.5, 2, 3, 4, 6. All codes are finite, so 8
  // magnitudes give 15 signed values.
  const std::vector<double> want{-6, -4, -3, -2, -1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2, 3, 4, 6};
  EXPECT_EQ(v, want);
  for (std::size_t k = 0; k < v.size(); ++k) EXPECT_EQ(v[k], -v[v.size() - 1 - k]);
}

TEST(EnumerateValues, ContainsZeroOnceAndIsStrictlyAscending) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 30; ++t) {
    const FpFormat f = testing::random_format(rng, 12);
    const auto v = enumerate_values(f);
    EXPECT_EQ(std::count(v.begin(), v.end(), 0.0), 1) << f.name();
    EXPECT_TRUE(std::is_sorted(v.begin(), v.end(), std::less_equal<>{}) &&
                std::adjacent_find(v.begin(), v.end()) == v.end())
        << f.name();
    EXPECT_EQ(v.size(), (std::size_t{1} << (f.bitwidth())) - 1) << f.name();
  }
}

TEST(EnumerateValues, MaxOfFp520) {
  EXPECT_EQ(enumerate_values(FpFormat{5, 2, 0}).back(), 114688.0);
}

TEST(EnumerateValues, RefusesWideFormats) {
  EXPECT_THROW(enumerate_values(FpFormat{8, 8, 0}), EnumerationRefused);
  EXPECT_NO_THROW(enumerate_values(FpFormat{6, 9, 0}));
}

TEST(Round, ExactValueHasNoFlags) {
  const RoundOutcome r = round(FpFormat{5, 2, 0}, 1.0);
  EXPECT_EQ(r.value, 1.0);
  EXPECT_FALSE(r.overflowed);
  EXPECT_FALSE(r.underflowed_to_zero);
}

TEST(Round, SaturatesAndFlagsOverflow) {
  const RoundOutcome r = round(FpFormat{5, 2, 0}, 2e5);
  EXPECT_EQ(r.value, 114688.0);
  EXPECT_TRUE(r.overflowed);
  EXPECT_EQ(round(FpFormat{5, 2, 0}, -2e5).value, -114688.0);
}

TEST(Round, ExactMaxIsNotAnOverflow) {
  const FpFormat f{4, 3, 4};
  EXPECT_FALSE(round(f, 30.0).overflowed);
  EXPECT_TRUE(round(f, std::nextafter(30.0, 31.0)).overflowed);
}

TEST(Round, UnderflowToZeroIsFlagged) {
  const FpFormat f{5, 2, 0};
  const RoundOutcome r = round(f, f.min_subnormal() * 0.25);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.underflowed_to_zero);
  EXPECT_FALSE(round(f, 0.0).underflowed_to_zero);
}

TEST(Round, NonFiniteInputIsADomainError) {
  EXPECT_THROW(round(kFp32, std::numeric_limits<double>::infinity()), DomainError);
  EXPECT_THROW(round(kFp32, std::numeric_limits<double>::quiet_NaN()), DomainError);
}

TEST(Round, MidpointsGoToTheEvenCode) {
  for (const FpFormat f : {FpFormat{5, 2, 0}, FpFormat{4, 3, 4}, FpFormat{3, 0, 0},
                           FpFormat{1, 2, -1}, FpFormat{2, 0, 1}}) {
    const auto table = enumerate_values(f);
    const auto zero = std::find(table.begin(), table.end(), 0.0) - table.begin();
    for (auto k = zero; k + 1 < static_cast<long>(table.size()); ++k) {
      const double mid = 0.5 * (table[k] + table[k + 1]);
      const long code = k - zero;  // magnitude code of the lower neighbour
      const double want = code % 2 == 0 ? table[k] : table[k + 1];
      EXPECT_EQ(round(f, mid).value, want) << f.name() << " mid " << mid;
      EXPECT_EQ(round(f, -mid).value, -want) << f.name() << " mid " << -mid;
    }
  }
}

TEST(Round, ZeroMantissaTieUsesTheExponentCode) {
  // With no mantissa bits, 2 and 4 sit in adjacent exponent codes and 3 is
  // their midpoint.
  const FpFormat f{3, 0, 0};
  const auto table = enumerate_values(f);
  const auto two = std::find(table.begin(), table.end(), 2.0);
  const auto zero = std::find(table.begin(), table.end(), 0.0);
  const long code_of_two = two - zero;
  EXPECT_EQ(round(f, 3.0).value, code_of_two % 2 == 0 ? 2.0 : 4.0);
}

TEST(Round, MatchesTheTableOracle) {
  std::mt19937_64 rng(17);
  std::vector<FpFormat> formats{{4, 3, 4}, {5, 2, 0}, {6, 9, 0}, {2, 1, 0}, {1, 0, 0}};
  for (int t = 0; t < 10; ++t) formats.push_back(testing::random_format(rng, 10));
  for (const FpFormat& f : formats) {
    const auto table = enumerate_values(f);
    for (double x : testing::rounding_samples(f, table, rng, 2000)) {
      ASSERT_EQ(round(f, x).value, testing::nearest_by_table(table, x))
          << f.name() << " x=" << x;
    }
  }
}

TEST(Round, Properties) {
  std::mt19937_64 rng(99);
  for (int t = 0; t < 20; ++t) {
    const FpFormat f = testing::random_format(rng, 16);
    const auto table = enumerate_values(f);
    auto xs = testing::rounding_samples(f, table, rng, 1000);
    std::sort(xs.begin(), xs.end());
    double prev = -std::numeric_limits<double>::infinity();
    for (double x : xs) {
      const double r = round(f, x).value;
      EXPECT_EQ(round(f, r).value, r) << "idempotence " << f.name();
      EXPECT_EQ(round(f, -x).value, -r) << "symmetry " << f.name();
      EXPECT_LE(prev, r) << "monotonicity " << f.name();
      EXPECT_TRUE(std::binary_search(table.begin(), table.end(), r)) << f.name();
      const RoundOutcome o = round(f, x);
      if (o.overflowed) {
        EXPECT_EQ(std::fabs(o.value), f.max_magnitude());
      }
      prev = r;
    }
    for (double v : table) {
      const RoundOutcome o = round(f, v);
      EXPECT_EQ(o.value, v);
      EXPECT_FALSE(o.overflowed);
      EXPECT_FALSE(o.underflowed_to_zero);
    }
  }
}

TEST(RoundTensor, CountsOverflows) {
  const FpFormat f{5, 2, 0};
  std::vector<double> xs(100, 1.0);
  xs[3] = 2e5;
  xs[40] = -1e6;
  xs[99] = 114689.0;
  xs[50] = 114688.0;  // exactly max: not an overflow
  const RoundedTensor r = round_tensor(f, xs);
  EXPECT_EQ(r.overflow_count, 3u);
  EXPECT_EQ(r.element_count, 100u);
  EXPECT_EQ(r.values[40], -114688.0);
}

TEST(RoundTensor, ZerosUnchanged) {
  const std::vector<double> zeros(10, 0.0);
  const RoundedTensor r = round_tensor(FpFormat{4, 3, 4}, zeros);
  EXPECT_EQ(r.values, zeros);
  EXPECT_EQ(r.overflow_count, 0u);
}

TEST(RoundTensor, Fp32ValuesAreFixedPoints) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 100.0);
  std::vector<double> xs;
  for (int k = 0; k < 1000; ++k) xs.push_back(static_cast<double>(static_cast<float>(n(rng))));
  EXPECT_EQ(round_tensor(kFp32, xs).values, xs);
}

TEST(RoundTensor, Fp32AgreesWithFloatCast) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int k = 0; k < 10000; ++k) {
    const double x = u(rng) * std::exp2(std::uniform_int_distribution<int>(-120, 100)(rng));
    if (std::fabs(x) > std::numeric_limits<float>::max()) continue;
    ASSERT_EQ(round_value(kFp32, x), static_cast<double>(static_cast<float>(x))) << x;
  }
}

TEST(RoundTensor, NonFiniteElementThrows) {
  std::vector<double> xs{1.0, std::numeric_limits<double>::infinity()};
  EXPECT_THROW(round_tensor(kFp32, xs), DomainError);
}

}  // namespace
}  // namespace mpt
