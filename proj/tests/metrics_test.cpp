#include "baaf/metrics.hpp"

#include <gtest/gtest.h>

#include "baaf/common.hpp"

using namespace baaf;

namespace {

TEST(ConfusionMatrix, PerfectPredictionsAreDiagonal) {
  ConfusionMatrix cm(3);
  cm.accumulate({0, 1, 2, 1}, {0, 1, 2, 1});
  EXPECT_EQ(cm.at(1, 1), 2);
  EXPECT_EQ(cm.at(0, 1), 0);
  const Scores s = scores(cm);
  EXPECT_DOUBLE_EQ(s.oa, 1.0);
  EXPECT_DOUBLE_EQ(s.macc, 1.0);
  EXPECT_DOUBLE_EQ(s.miou, 1.0);
}

TEST(ConfusionMatrix, SinglePoint) {
  ConfusionMatrix cm(2);
  cm.add(0, 1);
  EXPECT_EQ(cm.at(0, 1), 1);
  EXPECT_EQ(cm.total(), 1);
}

TEST(ConfusionMatrix, RejectsOutOfRange) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(cm.add(2, 0), ValueError);
  EXPECT_THROW(cm.add(0, -1), ValueError);
  EXPECT_THROW(cm.accumulate({0}, {0, 1}), ShapeError);
}

TEST(ConfusionMatrix, MatchesDoubleLoopOracle) {
  Rng rng(3);
  std::vector<std::int32_t> truth(100), pred(100);
  for (int i = 0; i < 100; ++i) {
    truth[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(rng.uniform_int(4));
    pred[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(rng.uniform_int(4));
  }
  ConfusionMatrix cm(4);
  cm.accumulate(truth, pred);
  for (int t = 0; t < 4; ++t)
    for (int p = 0; p < 4; ++p) {
      std::int64_t count = 0;
      for (int i = 0; i < 100; ++i)
        if (truth[static_cast<std::size_t>(i)] == t && pred[static_cast<std::size_t>(i)] == p) ++count;
      EXPECT_EQ(cm.at(t, p), count);
    }
}

TEST(Scores, HandComputedCase) {
  // cm = [[1,1],[0,2]]: OA=0.75, IoU0=0.5, IoU1=2/3, mIoU=7/12.
  ConfusionMatrix cm(2);
  cm.add(0, 0);
  cm.add(0, 1);
  cm.add(1, 1);
  cm.add(1, 1);
  const Scores s = scores(cm);
  EXPECT_DOUBLE_EQ(s.oa, 0.75);
  EXPECT_DOUBLE_EQ(s.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(s.iou[1], 2.0 / 3.0);
  EXPECT_NEAR(s.miou, 7.0 / 12.0, 1e-12);
  EXPECT_NEAR(s.macc, (0.5 + 1.0) / 2.0, 1e-12);
}

TEST(Scores, ClassPermutationFixesGlobalMetrics) {
  ConfusionMatrix cm(3), permuted(3);
  const int perm[3] = {2, 0, 1};
  Rng rng(5);
  for (int i = 0; i < 60; ++i) {
    const int t = static_cast<int>(rng.uniform_int(3));
    const int p = static_cast<int>(rng.uniform_int(3));
    cm.add(t, p);
    permuted.add(perm[t], perm[p]);
  }
  const Scores a = scores(cm);
  const Scores b = scores(permuted);
  EXPECT_DOUBLE_EQ(a.oa, b.oa);
  EXPECT_DOUBLE_EQ(a.miou, b.miou);
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(a.iou[static_cast<std::size_t>(c)], b.iou[static_cast<std::size_t>(perm[c])]);
}

TEST(Scores, AbsentClassesExcluded) {
  ConfusionMatrix cm(4);  // class 3 never appears anywhere
  cm.add(0, 0);
  cm.add(1, 1);
  cm.add(2, 2);
  const Scores s = scores(cm);
  EXPECT_DOUBLE_EQ(s.miou, 1.0);
  EXPECT_DOUBLE_EQ(s.iou[3], -1.0);

  ConfusionMatrix cm2(3);  // class 2 predicted but never true: IoU 0, no accuracy entry
  cm2.add(0, 0);
  cm2.add(1, 2);
  const Scores s2 = scores(cm2);
  EXPECT_DOUBLE_EQ(s2.iou[2], 0.0);
  EXPECT_DOUBLE_EQ(s2.macc, 0.5);
}

TEST(Scores, RangeProperty) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    ConfusionMatrix cm(5);
    const int n = 1 + static_cast<int>(rng.uniform_int(200));
    for (int i = 0; i < n; ++i)
      cm.add(static_cast<std::int32_t>(rng.uniform_int(5)), static_cast<std::int32_t>(rng.uniform_int(5)));
    const Scores s = scores(cm);
    EXPECT_GE(s.oa, 0.0);
    EXPECT_LE(s.oa, 1.0);
    EXPECT_GE(s.macc, 0.0);
    EXPECT_LE(s.macc, 1.0);
    EXPECT_GE(s.miou, 0.0);
    EXPECT_LE(s.miou, 1.0);
  }
}

TEST(Scores, MergeEqualsJointAccumulation) {
  Rng rng(9);
  ConfusionMatrix a(3), b(3), joint(3);
  for (int i = 0; i < 40; ++i) {
    const auto t = static_cast<std::int32_t>(rng.uniform_int(3));
    const auto p = static_cast<std::int32_t>(rng.uniform_int(3));
    (i % 2 == 0 ? a : b).add(t, p);
    joint.add(t, p);
  }
  a.merge(b);
  EXPECT_DOUBLE_EQ(scores(a).miou, scores(joint).miou);
  EXPECT_EQ(a.total(), joint.total());
}

TEST(Scores, EmptyMatrixRejected) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(scores(cm), ValueError);
}

}  // namespace
