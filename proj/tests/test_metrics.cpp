#include "fctn/metrics.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace fctn;

namespace {

ConfusionMatrix confusion(const Mask& pred, const Mask& gt, int classes) {
  ConfusionMatrix cm(classes);
  cm.accumulate(pred, gt);
  return cm;
}

}  // namespace

TEST(Confusion, PerfectPredictionIsDiagonal) {
  const Mask gt = test::random_mask(6, 6, 3, 0.0, 1);
  const ConfusionMatrix cm = confusion(gt, gt, 3);
  const auto& m = cm.counts();
  EXPECT_EQ(m.sum(), m.diagonal().sum());
  EXPECT_EQ(cm.total(), 36);
  const IouReport r = iou_report(cm);
  for (const auto& v : r.iou)
    if (v) {
      EXPECT_EQ(*v, 1.0);
    }
  EXPECT_EQ(*r.miou, 1.0);
}

TEST(Confusion, IgnoredGroundTruthLeavesCountsUnchanged) {
  ConfusionMatrix cm(3);
  cm.accumulate(test::random_mask(4, 5, 3, 0.0, 2), Mask::Constant(4, 5, kIgnoreId));
  EXPECT_EQ(cm.total(), 0);
  EXPECT_FALSE(iou_report(cm).miou.has_value());
}

TEST(Confusion, MatchesCountingOracle) {
  const Mask gt = test::random_mask(6, 6, 3, 0.15, 3), pred = test::random_mask(6, 6, 3, 0.0, 4);
  const ConfusionMatrix cm = confusion(pred, gt, 3);
  for (int g = 0; g < 3; ++g)
    for (int p = 0; p < 3; ++p) {
      std::int64_t n = 0;
      for (Index y = 0; y < 6; ++y)
        for (Index x = 0; x < 6; ++x) n += gt(y, x) == g && pred(y, x) == p;
      EXPECT_EQ(cm.counts()(g, p), n) << g << "," << p;
    }
  const IouReport r = iou_report(cm);
  for (int c = 0; c < 3; ++c) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (Index i = 0; i < 36; ++i) {
      const int g = gt.data()[i], p = pred.data()[i];
      if (g == kIgnoreId) continue;
      tp += g == c && p == c;
      fp += g != c && p == c;
      fn += g == c && p != c;
    }
    ASSERT_TRUE(r.iou[std::size_t(c)].has_value());
    EXPECT_DOUBLE_EQ(*r.iou[std::size_t(c)], double(tp) / double(tp + fp + fn));
  }
}

TEST(Iou, HalfAndZeroAverageToQuarter) {
  // Class 0: TP 1, FN 1. Class 1: TP 0, FP 1.
  Mask gt(1, 2), pred(1, 2);
  gt << 0, 0;
  pred << 0, 1;
  const IouReport r = iou_report(confusion(pred, gt, 2));
  EXPECT_DOUBLE_EQ(*r.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(*r.iou[1], 0.0);
  EXPECT_DOUBLE_EQ(*r.miou, 0.25);
}

TEST(Iou, AbsentClassesAreUndefinedNotZero) {
  Mask gt(1, 2);
  gt << 0, 1;
  const IouReport r = iou_report(confusion(gt, gt, 4));
  EXPECT_FALSE(r.iou[2].has_value());
  EXPECT_FALSE(r.iou[3].has_value());
  EXPECT_EQ(*r.miou, 1.0);
}

TEST(Iou, SymmetricInPredictionAndGroundTruth) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Mask a = test::random_mask(5, 7, 4, 0.0, seed), b = test::random_mask(5, 7, 4, 0.0, seed + 50);
    const IouReport ab = iou_report(confusion(a, b, 4)), ba = iou_report(confusion(b, a, 4));
    for (std::size_t c = 0; c < 4; ++c) {
      ASSERT_EQ(ab.iou[c].has_value(), ba.iou[c].has_value());
      if (ab.iou[c]) {
        EXPECT_DOUBLE_EQ(*ab.iou[c], *ba.iou[c]);
      }
    }
  }
}

TEST(Confusion, SumEqualsConcatenation) {
  const Mask g1 = test::random_mask(3, 4, 3, 0.1, 1), p1 = test::random_mask(3, 4, 3, 0.0, 2);
  const Mask g2 = test::random_mask(3, 4, 3, 0.1, 3), p2 = test::random_mask(3, 4, 3, 0.0, 4);
  ConfusionMatrix both(3);
  both.accumulate(p1, g1);
  both.accumulate(p2, g2);
  ConfusionMatrix sum = confusion(p1, g1, 3);
  sum += confusion(p2, g2, 3);
  EXPECT_TRUE(sum == both);
  EXPECT_THROW(sum += ConfusionMatrix(4), ShapeError);
}

TEST(Confusion, RejectsOutOfRangeIdsAndSizes) {
  Mask gt = Mask::Zero(2, 2), pred = Mask::Zero(2, 2);
  pred(0, 0) = 5;
  EXPECT_THROW(confusion(pred, gt, 3), DomainError);
  EXPECT_THROW(confusion(Mask::Zero(2, 3), gt, 3), ShapeError);
  EXPECT_THROW(ConfusionMatrix(0), Error);
}

TEST(Format, MetricLines) {
  IouReport r;
  r.iou = {0.5, std::nullopt};
  r.miou = 0.5;
  const std::vector<std::string> names = {"road", "sky"};
  EXPECT_EQ(format_metric_lines(r, names, "round1"), "round1.iou.road 0.5\nround1.iou.sky nan\nround1.mIoU 0.5\n");
  EXPECT_EQ(format_metric_lines(r, names, ""), "iou.road 0.5\niou.sky nan\nmIoU 0.5\n");
}

TEST(Format, TableShowsPercentAndMean) {
  IouReport r;
  r.iou = {0.734, std::nullopt};
  r.miou = 0.734;
  const std::vector<std::string> names = {"road", "sky"};
  const std::string t = format_iou_table(r, names);
  EXPECT_NE(t.find("73.4"), std::string::npos) << t;
  EXPECT_NE(t.find("n/a"), std::string::npos) << t;
  EXPECT_NE(t.find("mIoU"), std::string::npos) << t;
}

TEST(Format, DefaultNames) {
  EXPECT_EQ(default_class_names(8)[2], "road");
  EXPECT_EQ(default_class_names(3)[2], "class2");
}
