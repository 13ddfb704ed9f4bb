#include "dasent/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

namespace dasent {
namespace {

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs |= x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, DerivedStreamsAreIndependentOfCallOrder) {
  Rng a = Rng::derive(7, 1);
  Rng b = Rng::derive(7, 2);
  Rng a2 = Rng::derive(7, 1);
  EXPECT_NE(a.next(), b.next());
  a2.next();
  EXPECT_EQ(a.next(), a2.next());
}

TEST(Rng, UniformStaysInRange) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double v = r.uniform(-3.0, 5.0);
    ASSERT_GE(v, -3.0);
    ASSERT_LT(v, 5.0);
  }
}

TEST(Rng, BelowIsRoughlyUniform) {
  Rng r(2);
  std::array<int, 7> counts{};
  constexpr int n = 70000;
  for (int i = 0; i < n; ++i) ++counts[r.below(7)];
  for (int c : counts) EXPECT_NEAR(c, n / 7, 5 * std::sqrt(n / 7.0));
}

TEST(Rng, CategoricalFollowsWeights) {
  Rng r(3);
  const std::vector<double> w{1.0, 0.0, 3.0};
  std::array<int, 3> counts{};
  constexpr int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[r.categorical(w)];
  EXPECT_EQ(counts[1], 0);
  EXPECT_NEAR(counts[0] / double(n), 0.25, 0.01);
  EXPECT_NEAR(counts[2] / double(n), 0.75, 0.01);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng r(4);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  r.shuffle(std::span<int>(w));
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

}  // namespace
}  // namespace dasent
