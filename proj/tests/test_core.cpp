#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tractseg/core.hpp"
#include "tractseg/parallel.hpp"
#include "tractseg/rng.hpp"

using namespace tractseg;

TEST(Grid, RejectsZeroDimsAndNonPositiveSpacing) {
  EXPECT_THROW(Grid3({0, 2, 2}), Error);
  EXPECT_THROW(Grid3({2, 2, 2}, {1.0, 0.0, 1.0}), Error);
  EXPECT_NO_THROW(Grid3({1, 1, 1}, {0.5, 2.0, 1.0}));
}

TEST(VoxelIndex, HandCases) {
  const Grid3 g({2, 2, 2});
  EXPECT_EQ(voxel_index(g, 0, 0, 0), 0u);
  EXPECT_EQ(voxel_index(g, 1, 0, 0), 1u);
}

TEST(VoxelIndex, MatchesNestedLoopEnumeration) {
  const Grid3 g({3, 4, 5});
  std::size_t n = 0;
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 3; ++i, ++n) EXPECT_EQ(voxel_index(g, i, j, k), n);
  EXPECT_EQ(voxel_index(g, 2, 3, 4), 59u);
}

TEST(VoxelIndex, OutOfRangeThrowsIndexError) {
  const Grid3 g({3, 4, 5});
  try {
    voxel_index(g, 3, 0, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::index);
  }
  EXPECT_THROW(voxel_coords(g, 60), Error);
}

TEST(VoxelIndex, RoundTripsEveryVoxel) {
  const Grid3 g({5, 6, 7});
  for (std::size_t v = 0; v < g.voxels(); ++v) {
    const auto [i, j, k] = voxel_coords(g, v);
    EXPECT_EQ(voxel_index(g, i, j, k), v);
  }
}

TEST(Volume, ChannelIsSlowest) {
  Volume v(Grid3({2, 3, 4}), 3);
  v.at(1, 2, 3, 2) = 7.0f;
  EXPECT_EQ(v.data()[23 + 2 * 24], 7.0f);
  EXPECT_EQ(v.extract_channel(2).at(1, 2, 3), 7.0f);
  const std::size_t pick[] = {2, 0};
  const auto s = v.select_channels(pick);
  EXPECT_EQ(s.channels(), 2u);
  EXPECT_EQ(s.at(1, 2, 3, 0), 7.0f);
  EXPECT_THROW(v.extract_channel(3), Error);
}

TEST(Volume, LengthContract) {
  EXPECT_THROW(Volume(Grid3({2, 2, 2}), 2, std::vector<float>(15)), Error);
  EXPECT_THROW(Volume(Grid3({2, 2, 2}), 0), Error);
}

TEST(Binarize, HandCases) {
  Volume p(Grid3({2, 2, 2}), 2, 0.9f);
  for (const auto& m : argmax_threshold_binarize(p, 0.5)) EXPECT_EQ(m.count(), 8u);
  Volume z(Grid3({2, 2, 2}), 2, 0.0f);
  for (const auto& m : argmax_threshold_binarize(z, 0.5)) EXPECT_TRUE(m.empty());

  Volume one(Grid3({1, 1, 1}), 2);
  one(0, 0) = 0.49f;
  one(0, 1) = 0.51f;
  const auto m = argmax_threshold_binarize(one, 0.5);
  EXPECT_FALSE(m[0](0));
  EXPECT_TRUE(m[1](0));

  Volume half(Grid3({1, 1, 1}), 1, 0.5f);
  EXPECT_TRUE(argmax_threshold_binarize(half, 0.5)[0](0));
}

TEST(Binarize, RejectsNonProbabilities) {
  Volume p(Grid3({2, 1, 1}), 1, 0.5f);
  p(1) = 1.5f;
  try {
    argmax_threshold_binarize(p, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::domain);
  }
  EXPECT_THROW(argmax_threshold_binarize(Volume(Grid3({1, 1, 1}), 1), 1.0), Error);
}

TEST(MasksToVolume, PacksChannels) {
  BinaryMask a(Grid3({2, 2, 1})), b(Grid3({2, 2, 1}));
  a.set(1, true);
  b.set(3, true);
  const BinaryMask ms[] = {a, b};
  const auto v = masks_to_volume(ms);
  EXPECT_EQ(v(1, 0), 1.0f);
  EXPECT_EQ(v(3, 1), 1.0f);
  EXPECT_EQ(v(3, 0), 0.0f);
}

TEST(ResampleCubic, ConstantStaysConstant) {
  Volume v(Grid3({8, 12, 16}, {1.5, 1.5, 1.5}), 1, 3.25f);
  const auto r = resample_cubic(v, 4);
  EXPECT_EQ(r.grid().dims, (Index3{2, 3, 4}));
  EXPECT_DOUBLE_EQ(r.grid().spacing[0], 6.0);
  for (float x : r.data()) EXPECT_NEAR(x, 3.25, 3.25 * 1e-6);
}

TEST(ResampleCubic, ZeroStaysZero) {
  const auto r = resample_cubic(Volume(Grid3({8, 8, 8}), 1), 4);
  for (float x : r.data()) EXPECT_EQ(x, 0.0f);
}

TEST(ResampleCubic, LinearRampSampledAtBlockCentres) {
  Volume v(Grid3({10, 4, 6}), 1);
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 10; ++i) v.at(i, j, k) = static_cast<float>(i);
  const auto r = resample_cubic(v, 2);
  ASSERT_EQ(r.grid().dims, (Index3{5, 2, 3}));
  // Direct evaluation: block o spans source samples 2o and 2o+1, centre 2o+0.5.
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t o = 0; o < 5; ++o) EXPECT_NEAR(r.at(o, j, k), 2.0 * o + 0.5, 1e-6);
}

TEST(ResampleCubic, LinearFieldIsReproducedInEveryAxis) {
  Volume v(Grid3({9, 9, 9}), 1);
  for (std::size_t k = 0; k < 9; ++k)
    for (std::size_t j = 0; j < 9; ++j)
      for (std::size_t i = 0; i < 9; ++i) v.at(i, j, k) = static_cast<float>(0.5 * i - 0.25 * j + 2.0 * k + 1.0);
  const auto r = resample_cubic(v, 3);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t i = 0; i < 3; ++i) {
        const double x = 3.0 * i + 1.0, y = 3.0 * j + 1.0, z = 3.0 * k + 1.0;
        EXPECT_NEAR(r.at(i, j, k), 0.5 * x - 0.25 * y + 2.0 * z + 1.0, 1e-5);
      }
}

TEST(ResampleCubic, NonDivisibleDimsArePadded) {
  Volume v(Grid3({5, 4, 4}), 1, 1.0f);
  const auto r = resample_cubic(v, 4);
  EXPECT_EQ(r.grid().dims, (Index3{2, 1, 1}));
  EXPECT_EQ(pad_to_multiple(v, 4).grid().dims, (Index3{8, 4, 4}));
  EXPECT_EQ(pad_to_multiple(v, 4).at(7, 0, 0), 0.0f);
}

TEST(ResampleCubic, CommutesWithScaling) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Volume v(Grid3({12, 8, 16}), 1);
  for (auto& x : v.data()) x = u(rng);
  Volume s = v;
  for (auto& x : s.data()) x *= 2.5f;
  const auto a = resample_cubic(v, 4), b = resample_cubic(s, 4);
  for (std::size_t n = 0; n < a.size(); ++n)
    EXPECT_NEAR(b.data()[n], 2.5 * a.data()[n], 1e-6 * std::max(1.0, std::abs(2.5 * a.data()[n])));
}

TEST(ResampleCubic, FactorOneIsIdentity) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Volume v(Grid3({4, 5, 6}), 1);
  for (auto& x : v.data()) x = u(rng);
  EXPECT_EQ(resample_cubic(v, 1).data(), v.data());
}

TEST(Parallel, CoversRangeOnceAndRethrows) {
  std::vector<int> hits(1000, 0);
  parallel_for(0, hits.size(), Exec{4}, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) ++hits[i];
  });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(0, 10, Exec{3},
                            [](std::size_t lo, std::size_t) {
                              if (lo == 0) fail(ErrorKind::domain, "boom");
                            }),
               Error);
}

TEST(Rng, CounterNormalIsDeterministicAndStandard) {
  EXPECT_EQ(counter_normal(9, 42), counter_normal(9, 42));
  EXPECT_NE(counter_normal(9, 42), counter_normal(9, 43));
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = counter_normal(1, static_cast<std::uint64_t>(i));
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, UniformBelowStaysInRange) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) EXPECT_LT(uniform_below(rng, 7), 7u);
}
