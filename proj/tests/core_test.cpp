#include "trialemu/core.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace trialemu;

TEST(Rng, DeterministicPerSeed) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.NextU64(), b.NextU64());
}

TEST(Rng, DerivedStreamsDiffer) {
  Rng a = Rng::Derive(1, 0), b = Rng::Derive(1, 1), c = Rng::Derive(2, 0);
  const auto x = a.NextU64(), y = b.NextU64(), z = c.NextU64();
  EXPECT_NE(x, y);
  EXPECT_NE(x, z);
}

TEST(Rng, UniformAndIndexRanges) {
  Rng rng(5);
  std::set<std::size_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const double u = rng.Uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const std::size_t k = rng.Index(7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, NormalMoments) {
  Rng rng(9);
  double s = 0, ss = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.Normal();
    s += z;
    ss += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.01);
}

TEST(Rng, ExponentialMean) {
  Rng rng(10);
  double s = 0;
  for (int i = 0; i < 200000; ++i) s += rng.Exponential(0.5);
  EXPECT_NEAR(s / 200000, 2.0, 0.02);
}

TEST(Hash, Fnv1aKnownVectors) {
  EXPECT_EQ(Fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(Fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(HexDigest(0xaf63dc4c8601ec8cULL), "af63dc4c8601ec8c");
}

TEST(Format, ShortestAndFixed) {
  EXPECT_EQ(FormatDouble(0.1), "0.1");
  EXPECT_EQ(FormatDouble(2.0), "2");
  EXPECT_EQ(Format4(0.123456), "0.1235");
  EXPECT_EQ(Format4(-0.00001), "0.0000");
}

TEST(Format, ParseDouble) {
  EXPECT_DOUBLE_EQ(ParseDouble("3.25", "x"), 3.25);
  try {
    ParseDouble("abc", "row 2 column time");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
  }
  EXPECT_THROW(ParseDouble("1.5x", "c"), Error);
  EXPECT_THROW(ParseDouble("", "c"), Error);
}
