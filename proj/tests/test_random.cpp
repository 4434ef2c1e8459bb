#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "gradsigns/random.hpp"

using namespace gradsigns;

TEST(Random, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(uniform01(a), uniform01(b));
}

TEST(Random, Uniform01Range) {
  Rng r(1);
  for (int i = 0; i < 100000; ++i) {
    const double u = uniform01(r);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Random, UniformIndexCoversRange) {
  Rng r(2);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 70000; ++i) ++hits[uniform_index(r, 7)];
  for (const int h : hits) EXPECT_NEAR(h, 10000, 500);
}

TEST(Random, NormalMoments) {
  Rng r(3);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = standard_normal(r);
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Random, SampleWithoutReplacementDistinct) {
  Rng r(4);
  const auto v = sample_without_replacement(r, 784, 384);
  EXPECT_EQ(std::set<std::size_t>(v.begin(), v.end()).size(), 384u);
  EXPECT_TRUE(std::all_of(v.begin(), v.end(), [](std::size_t i) { return i < 784; }));
}

TEST(Random, ShuffleIsPermutation) {
  Rng r(5);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  shuffle(r, std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Random, MixSeedSeparatesStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 100; ++s) seen.insert(mix_seed(7, s));
  EXPECT_EQ(seen.size(), 100u);
  EXPECT_EQ(mix_seed(7, 3), mix_seed(7, 3));
  EXPECT_NE(mix_seed(7, 3), mix_seed(8, 3));
}
