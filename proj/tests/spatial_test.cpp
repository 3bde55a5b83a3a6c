#include "baaf/spatial.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "testing/oracles.hpp"

using namespace baaf;

namespace {

std::vector<float> random_cloud(std::int64_t n, Rng& rng, float extent = 2.0f, bool snap = false) {
  std::vector<float> pos(static_cast<std::size_t>(n) * 3);
  for (float& v : pos) {
    v = extent * (rng.uniform_f() - 0.5f);
    if (snap) v = std::round(v * 4.0f) / 4.0f;  // duplicates and distance ties
  }
  return pos;
}

double min_pairwise_distance(const std::vector<float>& positions, const std::vector<std::int32_t>& subset) {
  double best = std::numeric_limits<double>::max();
  for (std::size_t a = 0; a < subset.size(); ++a)
    for (std::size_t b = a + 1; b < subset.size(); ++b) {
      double d2 = 0.0;
      for (int d = 0; d < 3; ++d) {
        const double diff = positions[static_cast<std::size_t>(subset[a] * 3 + d)] -
                            positions[static_cast<std::size_t>(subset[b] * 3 + d)];
        d2 += diff * diff;
      }
      best = std::min(best, d2);
    }
  return std::sqrt(best);
}

TEST(Fps, FullSampleCoversAllIndices) {
  Rng rng(1);
  const std::vector<float> pos = random_cloud(17, rng);
  const SampleSet s = fps(pos, 17, 0);
  std::set<std::int32_t> seen(s.indices.begin(), s.indices.end());
  EXPECT_EQ(seen.size(), 17u);
}

TEST(Fps, PicksFarthestPoint) {
  const std::vector<float> pos = {0, 0, 0, 0.1f, 0, 0, 0.9f, 0, 0, 1, 0, 0};
  const SampleSet s = fps(pos, 2, 0);
  ASSERT_EQ(s.indices.size(), 2u);
  EXPECT_EQ(s.indices[0], 0);
  EXPECT_EQ(s.indices[1], 3);
}

TEST(Fps, SingleSampleIsStart) {
  Rng rng(2);
  const std::vector<float> pos = random_cloud(9, rng);
  const SampleSet s = fps(pos, 1, 4);
  ASSERT_EQ(s.indices.size(), 1u);
  EXPECT_EQ(s.indices[0], 4);
  EXPECT_FLOAT_EQ(s.positions[0], pos[12]);
}

TEST(Fps, RejectsOversizedRequest) {
  const std::vector<float> pos = {0, 0, 0};
  EXPECT_THROW(fps(pos, 2, 0), ValueError);
  EXPECT_THROW(fps(pos, 1, 5), IndexError);
}

TEST(Fps, MatchesGreedyOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    const std::int64_t n = 2 + rng.uniform_int(60);
    const std::vector<float> pos = random_cloud(n, rng, 2.0f, trial % 3 == 0);
    const std::int64_t m = 1 + rng.uniform_int(n);
    const SampleSet got = fps(pos, m, 0);
    EXPECT_EQ(got.indices, testing_oracles::greedy_fps(pos, m, 0));
  }
}

TEST(Fps, SpreadBeatsRandomSubsetsInExpectation) {
  Rng rng(4);
  const std::vector<float> pos = random_cloud(128, rng);
  const SampleSet s = fps(pos, 16, 0);
  const double fps_spread = min_pairwise_distance(pos, s.indices);
  double random_total = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::int32_t> subset(128);
    for (int i = 0; i < 128; ++i) subset[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < 16; ++i)
      std::swap(subset[static_cast<std::size_t>(i)],
                subset[static_cast<std::size_t>(i + rng.uniform_int(128 - i))]);
    subset.resize(16);
    random_total += min_pairwise_distance(pos, subset);
  }
  EXPECT_GE(fps_spread, random_total / 100.0);
}

TEST(Knn, SelfQueryReturnsOwnIndex) {
  Rng rng(5);
  const std::vector<float> pos = random_cloud(20, rng);
  const NeighborIndex nbr = knn(pos, pos, 1);
  for (std::int64_t i = 0; i < 20; ++i) EXPECT_EQ(nbr.at(i, 0), i);
}

TEST(Knn, SortedByDistance) {
  const std::vector<float> reference = {0, 0, 0, 1, 0, 0, 2, 0, 0};
  const std::vector<float> query = {0.6f, 0, 0};
  const NeighborIndex nbr = knn(query, reference, 2);
  EXPECT_EQ(nbr.at(0, 0), 1);
  EXPECT_EQ(nbr.at(0, 1), 0);
}

TEST(Knn, PadsWithNearestWhenKExceedsReference) {
  const std::vector<float> reference = {0, 0, 0, 1, 0, 0};
  const std::vector<float> query = {0.9f, 0, 0};
  const NeighborIndex nbr = knn(query, reference, 4);
  EXPECT_EQ(nbr.k, 4);
  EXPECT_EQ(nbr.at(0, 0), 1);
  EXPECT_EQ(nbr.at(0, 1), 0);
  EXPECT_EQ(nbr.at(0, 2), 1);
  EXPECT_EQ(nbr.at(0, 3), 1);
}

TEST(Knn, EmptyReferenceRejected) {
  EXPECT_THROW(knn({0, 0, 0}, {}, 1), ValueError);
}

TEST(Knn, MatchesBruteForceExhaustively) {
  Rng rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    const std::int64_t nr = 1 + rng.uniform_int(300);
    const std::int64_t nq = 1 + rng.uniform_int(64);
    const bool snap = trial % 2 == 0;
    const std::vector<float> reference = random_cloud(nr, rng, 2.0f, snap);
    const std::vector<float> query = random_cloud(nq, rng, 2.0f, snap);
    const int k = 1 + static_cast<int>(rng.uniform_int(16));
    const NeighborIndex got = knn(query, reference, k);
    const NeighborIndex want = testing_oracles::brute_knn(query, reference, k);
    ASSERT_EQ(got.indices, want.indices) << "nr=" << nr << " nq=" << nq << " k=" << k;
  }
}

TEST(DilatedKnn, DilationOneEqualsKnn) {
  Rng rng(7);
  const std::vector<float> pos = random_cloud(50, rng);
  EXPECT_EQ(dilated_knn(pos, pos, 5, 1).indices, knn(pos, pos, 5).indices);
}

TEST(DilatedKnn, KeepsEveryDthRank) {
  // Unit-spaced collinear points; ranks from the origin are 0,1,2,...
  const std::vector<float> reference = {0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0, 4, 0, 0};
  const std::vector<float> query = {0, 0, 0};
  const NeighborIndex nbr = dilated_knn(query, reference, 2, 2);
  EXPECT_EQ(nbr.at(0, 0), 0);
  EXPECT_EQ(nbr.at(0, 1), 2);
}

TEST(DilatedKnn, SingleNeighborIsNearest) {
  const std::vector<float> reference = {0, 0, 0, 1, 0, 0, 2, 0, 0};
  const NeighborIndex nbr = dilated_knn({0.1f, 0, 0}, reference, 1, 2);
  EXPECT_EQ(nbr.at(0, 0), 0);
}

TEST(DilatedKnn, MatchesBruteForceRanks) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<float> reference = random_cloud(100, rng);
    const std::vector<float> query = random_cloud(10, rng);
    const NeighborIndex got = dilated_knn(query, reference, 4, 3);
    const NeighborIndex wide = testing_oracles::brute_knn(query, reference, 12);
    for (std::int64_t i = 0; i < got.n; ++i)
      for (int j = 0; j < 4; ++j) EXPECT_EQ(got.at(i, j), wide.at(i, j * 3));
  }
}

TEST(NnInterpolate, SingleSourceBroadcasts) {
  const std::vector<float> low_pos = {0, 0, 0};
  const std::vector<float> low_feat = {7, 8};
  const std::vector<float> high_pos = {1, 0, 0, 0, 2, 0};
  const std::vector<float> out = nn_interpolate(low_pos, low_feat, 2, high_pos);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_FLOAT_EQ(out[0], 7.0f);
  EXPECT_FLOAT_EQ(out[3], 8.0f);
}

TEST(NnInterpolate, IdentityAtSamePositions) {
  Rng rng(9);
  const std::vector<float> pos = random_cloud(12, rng);
  std::vector<float> feat(24);
  for (std::size_t i = 0; i < feat.size(); ++i) feat[i] = static_cast<float>(i);
  EXPECT_EQ(nn_interpolate(pos, feat, 2, pos), feat);
}

TEST(NnInterpolate, MatchesBruteForceAndIsIdempotent) {
  Rng rng(10);
  const std::vector<float> low_pos = random_cloud(8, rng);
  const std::vector<float> high_pos = random_cloud(20, rng);
  std::vector<float> low_feat(16);
  for (std::size_t i = 0; i < low_feat.size(); ++i) low_feat[i] = rng.uniform_f();
  const std::vector<float> out = nn_interpolate(low_pos, low_feat, 2, high_pos);
  const NeighborIndex nn1 = testing_oracles::brute_knn(high_pos, low_pos, 1);
  for (std::int64_t i = 0; i < 20; ++i)
    for (int c = 0; c < 2; ++c)
      EXPECT_FLOAT_EQ(out[static_cast<std::size_t>(i * 2 + c)],
                      low_feat[static_cast<std::size_t>(nn1.at(i, 0) * 2 + c)]);
  // Re-interpolating at the same positions changes nothing.
  EXPECT_EQ(nn_interpolate(high_pos, out, 2, high_pos), out);
  EXPECT_THROW(nn_interpolate({}, {}, 2, high_pos), ValueError);
}

TEST(NeighborhoodStats, DegenerateNeighborhoodIsZero) {
  const std::vector<float> values = {1, 2, 3};
  NeighborIndex nbr;
  nbr.n = 1;
  nbr.k = 3;
  nbr.indices = {0, 0, 0};
  const NeighborhoodStats s = neighborhood_stats(values, 3, nbr);
  EXPECT_DOUBLE_EQ(s.mean_dist, 0.0);
  EXPECT_DOUBLE_EQ(s.mean_variance, 0.0);
}

TEST(NeighborhoodStats, SymmetricPairArithmetic) {
  const std::vector<float> values = {0, 0, 0};
  NeighborIndex nbr;
  nbr.n = 1;
  nbr.k = 2;
  nbr.indices = {0, 0};
  const std::vector<float> shifted = {1, 0, 0, -1, 0, 0};
  const NeighborhoodStats s = neighborhood_stats(values, 3, nbr, shifted);
  EXPECT_NEAR(s.mean_dist, 1.0, 1e-9);
  EXPECT_NEAR(s.mean_variance, 1.0, 1e-9);
}

TEST(NeighborhoodStats, MatchesDoubleLoopOracle) {
  Rng rng(11);
  const std::int64_t n = 15, k = 4, dim = 5;
  std::vector<float> values(static_cast<std::size_t>(n * dim));
  for (float& v : values) v = rng.uniform_f();
  NeighborIndex nbr;
  nbr.n = n;
  nbr.k = k;
  for (std::int64_t i = 0; i < n * k; ++i)
    nbr.indices.push_back(static_cast<std::int32_t>(rng.uniform_int(n)));

  double mean_dist = 0.0, mean_var = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<double> bary(static_cast<std::size_t>(dim), 0.0);
    for (std::int64_t j = 0; j < k; ++j) {
      double d2 = 0.0;
      for (std::int64_t d = 0; d < dim; ++d) {
        const double diff = values[static_cast<std::size_t>(nbr.at(i, j) * dim + d)] -
                            values[static_cast<std::size_t>(i * dim + d)];
        d2 += diff * diff;
        bary[static_cast<std::size_t>(d)] += values[static_cast<std::size_t>(nbr.at(i, j) * dim + d)];
      }
      mean_dist += std::sqrt(d2) / static_cast<double>(n * k);
    }
    for (std::int64_t d = 0; d < dim; ++d) bary[static_cast<std::size_t>(d)] /= static_cast<double>(k);
    for (std::int64_t j = 0; j < k; ++j)
      for (std::int64_t d = 0; d < dim; ++d) {
        const double diff = values[static_cast<std::size_t>(nbr.at(i, j) * dim + d)] - bary[static_cast<std::size_t>(d)];
        mean_var += diff * diff / static_cast<double>(n * k);
      }
  }
  const NeighborhoodStats s = neighborhood_stats(values, dim, nbr);
  EXPECT_NEAR(s.mean_dist, mean_dist, 1e-6);
  EXPECT_NEAR(s.mean_variance, mean_var, 1e-6);
}

TEST(KdTree, PreservesExternalIndexing) {
  Rng rng(12);
  std::vector<float> pos = random_cloud(64, rng);
  const std::vector<float> snapshot = pos;
  KdTree tree(pos);
  EXPECT_EQ(pos, snapshot);  // construction does not touch the points
  for (std::int64_t i = 0; i < 64; ++i) {
    const std::int32_t nn = tree.nearest(pos.data() + i * 3);
    // Nearest of an existing point is itself unless an identical twin with
    // a lower index exists.
    EXPECT_LE(nn, i);
    for (int d = 0; d < 3; ++d)
      EXPECT_FLOAT_EQ(pos[static_cast<std::size_t>(nn * 3 + d)], pos[static_cast<std::size_t>(i * 3 + d)]);
  }
}

}  // namespace
