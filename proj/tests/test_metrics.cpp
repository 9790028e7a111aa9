#include <gtest/gtest.h>

#include <algorithm>

#include "ilss/errors.hpp"
#include "ilss/metrics.hpp"
#include "metrics_oracle.hpp"
#include "test_support.hpp"

namespace ilss {
namespace {

using testing::make_plan;

ConfusionMatrix two_by_two(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  ConfusionMatrix cm({0, 1});
  cm.add(0, 0, a);
  cm.add(0, 1, b);
  cm.add(1, 0, c);
  cm.add(1, 1, d);
  return cm;
}

TEST(Accumulate, PerfectPredictionFillsDiagonal) {
  ConfusionMatrix cm({0, 1});
  const std::vector<std::uint8_t> y{0, 1, 1, 0};
  accumulate(cm, y, y);
  EXPECT_EQ(cm, two_by_two(2, 0, 0, 2));
}

TEST(Accumulate, IgnoredGroundTruthNotCounted) {
  ConfusionMatrix cm({0, 1});
  accumulate(cm, std::vector<std::uint8_t>{0, 1, 1, 0}, std::vector<std::uint8_t>(4, kIgnoreLabel));
  EXPECT_EQ(cm.total(), 0u);
}

TEST(Accumulate, HandTally) {
  ConfusionMatrix cm({0, 1});
  accumulate(cm, std::vector<std::uint8_t>{0, 1, 1, 1}, std::vector<std::uint8_t>{0, 0, 1, 1});
  EXPECT_EQ(cm, two_by_two(1, 1, 0, 2));
}

TEST(Accumulate, Errors) {
  ConfusionMatrix cm({0, 1});
  EXPECT_THROW(accumulate(cm, std::vector<std::uint8_t>{0, 1}, std::vector<std::uint8_t>{0}), ShapeError);
  EXPECT_THROW(accumulate(cm, std::vector<std::uint8_t>{0, 2}, std::vector<std::uint8_t>{0, 1}), LabelError);
  EXPECT_THROW(accumulate(cm, std::vector<std::uint8_t>{0, 1}, std::vector<std::uint8_t>{3, 1}), LabelError);
  EXPECT_EQ(cm.total(), 0u);
}

TEST(ConfusionMatrix, MergeIsElementwiseSum) {
  auto a = two_by_two(1, 2, 3, 4);
  a.merge(two_by_two(10, 20, 30, 40));
  EXPECT_EQ(a, two_by_two(11, 22, 33, 44));
  ConfusionMatrix other({0, 2});
  EXPECT_THROW(a.merge(other), ShapeError);
}

TEST(IouPerClass, SymmetricExample) {
  const auto iou = iou_per_class(two_by_two(3, 1, 1, 3));
  EXPECT_EQ(iou.at(0), 0.6);
  EXPECT_EQ(iou.at(1), 0.6);
}

TEST(IouPerClass, DiagonalIsOne) {
  ConfusionMatrix cm({0, 1, 2});
  cm.add(0, 0, 5);
  cm.add(1, 1, 2);
  cm.add(2, 2, 9);
  for (const auto& [id, v] : iou_per_class(cm)) EXPECT_EQ(v, 1.0);
}

TEST(IouPerClass, ZeroUnionClassAbsent) {
  ConfusionMatrix cm({0, 1, 2});
  cm.add(0, 0, 4);
  cm.add(1, 0, 1);
  const auto iou = iou_per_class(cm);
  EXPECT_FALSE(iou.contains(2));
  EXPECT_TRUE(iou.contains(1));
  EXPECT_EQ(iou.at(1), 0.0);
}

TEST(Summarize, HandEvaluation) {
  const auto b = summarize(two_by_two(3, 1, 1, 3), {0}, {1});
  EXPECT_EQ(b.miou, 0.6);
  EXPECT_EQ(*b.miou_old, 0.6);
  EXPECT_EQ(*b.miou_new, 0.6);
  EXPECT_EQ(b.mpa, 0.75);
  EXPECT_EQ(b.mca, 0.75);
}

TEST(Summarize, PerfectIsOne) {
  const auto b = summarize(two_by_two(5, 0, 0, 7), {0}, {1});
  EXPECT_EQ(b.miou, 1.0);
  EXPECT_EQ(b.mpa, 1.0);
  EXPECT_EQ(b.mca, 1.0);
}

TEST(Summarize, TwentyOldOneNewExposesSeparateMeans) {
  std::vector<ClassId> ids(21);
  for (ClassId c = 0; c < 21; ++c) ids[static_cast<std::size_t>(c)] = c;
  ConfusionMatrix cm(ids);
  ClassSet old_set;
  for (ClassId c = 0; c < 20; ++c) {
    cm.add(c, c, 9);
    cm.add(c, 20, 1);
    old_set.insert(c);
  }
  cm.add(20, 20, 1);
  const auto b = summarize(cm, old_set, {20});
  ASSERT_TRUE(b.miou_old && b.miou_new);
  EXPECT_DOUBLE_EQ(*b.miou_old, 0.9);
  EXPECT_DOUBLE_EQ(*b.miou_new, 1.0 / 21.0);
  EXPECT_NE(*b.miou_old, b.miou);
  // Recall on the new class is perfect while its IoU is poor.
  EXPECT_EQ(b.per_class_recall.at(20), 1.0);
}

TEST(Summarize, EmptyGroupIsAbsentAndOverlapRejected) {
  const auto b = summarize(two_by_two(1, 0, 0, 1), {0, 1}, {});
  EXPECT_FALSE(b.miou_new.has_value());
  EXPECT_THROW(summarize(two_by_two(1, 0, 0, 1), {0, 1}, {1}), PartitionError);
  EXPECT_THROW(summarize(two_by_two(1, 0, 0, 1), {0}, {}), PartitionError);
}

TEST(Summarize, SingleClassEqualsItsOwnScores) {
  ConfusionMatrix cm({3});
  cm.add(3, 3, 4);
  const auto b = summarize(cm, {3}, {});
  EXPECT_EQ(b.miou, b.per_class_iou.at(3));
  EXPECT_EQ(b.mca, b.per_class_recall.at(3));
}

TEST(BundleJson, RoundTrip) {
  auto b = summarize(two_by_two(3, 1, 2, 7), {0}, {1}, 4);
  EXPECT_EQ(bundle_from_json(bundle_to_json(b)), b);
  b = summarize(two_by_two(3, 1, 2, 7), {0, 1}, {}, 0);
  EXPECT_EQ(bundle_from_json(bundle_to_json(b)), b);
  EXPECT_THROW(bundle_from_json("{\"step\": 1}"), FormatError);
}

TEST(PerClassCsv, ColumnsAndGroups) {
  const auto plan = make_plan({{0}, {1}}, 2);
  const auto csv = per_class_csv(summarize(two_by_two(3, 1, 1, 3), {0}, {1}, 1), plan);
  EXPECT_EQ(csv, "class_id,name,iou,recall,group\n0,background,0.6,0.75,old\n1,class1,0.6,0.75,new\n");
}

// Randomized checks against the brute-force recount.

TEST(MetricsProperties, MatchBruteForceRecountExactly) {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::vector<ClassId> classes{0, 1, 2, 3, 4};
    std::vector<std::vector<std::uint8_t>> preds, gts;
    ConfusionMatrix cm(classes);
    for (int s = 0; s < 5; ++s) {
      preds.push_back(testing::random_label_map(rng, {0, 1, 2, 3}, 256, false));
      gts.push_back(testing::random_label_map(rng, {0, 1, 2, 4}, 256, true));
      accumulate(cm, preds.back(), gts.back());
    }
    const auto b = summarize(cm, {0, 1, 2}, {3, 4});
    const auto oracle = testing::brute_force_metrics(classes, preds, gts);
    EXPECT_EQ(b.per_class_iou, oracle.iou);
    EXPECT_EQ(b.miou, oracle.miou);
    EXPECT_EQ(b.mpa, oracle.mpa);
    EXPECT_EQ(b.mca, oracle.mca);
  }
}

TEST(MetricsProperties, AccumulationOrderDoesNotMatter) {
  Rng rng(5);
  const std::vector<ClassId> classes{0, 1, 2};
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>>> samples;
    for (int s = 0; s < 6; ++s) {
      samples.emplace_back(testing::random_label_map(rng, classes, 16, false), testing::random_label_map(rng, classes, 16, true));
    }
    ConfusionMatrix a(classes), b(classes);
    for (const auto& [p, g] : samples) accumulate(a, p, g);
    std::shuffle(samples.begin(), samples.end(), rng);
    for (const auto& [p, g] : samples) accumulate(b, p, g);
    EXPECT_EQ(a, b);
  }
}

TEST(MetricsProperties, PixelAccuracyIsRowWeightedRecallAndIouBoundedByRecall) {
  Rng rng(6);
  const std::vector<ClassId> classes{0, 1, 2, 3};
  for (int trial = 0; trial < 100; ++trial) {
    ConfusionMatrix cm(classes);
    accumulate(cm, testing::random_label_map(rng, classes, 64, false), testing::random_label_map(rng, classes, 64, true));
    const auto b = summarize(cm, {0, 1}, {2, 3});
    double weighted = 0.0;
    double rows = 0.0;
    for (const auto& [c, r] : b.per_class_recall) {
      weighted += static_cast<double>(cm.row_sum(c)) * r;
      rows += static_cast<double>(cm.row_sum(c));
      EXPECT_LE(b.per_class_iou.at(c), r);
    }
    EXPECT_NEAR(b.mpa, weighted / rows, 1e-12);
    for (const double v : {b.miou, b.mpa, b.mca}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

// Model evaluation.

SegmentationModel tiny_model(std::vector<ClassId> classes) {
  ArchConfig a;
  a.encoder_channels = {4};
  a.decoder_channels = 4;
  return SegmentationModel::build(std::move(classes), a, 2);
}

DatasetPool random_eval_pool(Rng& rng, const std::vector<ClassId>& classes, std::size_t n) {
  DatasetPool pool;
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  for (std::size_t i = 0; i < n; ++i) {
    SegSample s;
    s.id = "v" + std::to_string(i);
    s.image = Tensor({3, 16, 16});
    for (auto& v : s.image.data()) v = unit(rng);
    s.label = testing::random_label_map(rng, classes, 256, true);
    pool.samples.push_back(std::move(s));
  }
  return pool;
}

TEST(EvaluateModel, MatchesBruteForceOnPredictions) {
  Rng rng(12);
  const std::vector<ClassId> classes{0, 1, 2};
  const auto model = tiny_model(classes);
  const auto pool = random_eval_pool(rng, classes, 5);
  const auto [cm, b] = evaluate_model(model, pool, {0, 1, 2}, {0, 1}, {2});
  std::vector<std::vector<std::uint8_t>> preds, gts;
  for (const auto& s : pool.samples) {
    std::vector<std::size_t> one{preds.size()};
    auto [images, labels] = make_batch(pool, one);
    preds.push_back(predict_labels(model, images, {0, 1, 2}));
    gts.push_back(s.label);
  }
  const auto oracle = testing::brute_force_metrics(classes, preds, gts);
  EXPECT_EQ(b.per_class_iou, oracle.iou);
  EXPECT_EQ(b.miou, oracle.miou);
  EXPECT_EQ(b.mpa, oracle.mpa);
  EXPECT_EQ(b.mca, oracle.mca);
}

TEST(EvaluateModel, SnapshotGivesIdenticalBundle) {
  Rng rng(13);
  const auto model = tiny_model({0, 1, 2});
  const auto pool = random_eval_pool(rng, {0, 1, 2}, 4);
  const auto plan = make_plan({{0, 1, 2}}, 3);
  EXPECT_EQ(evaluate_model(model, pool, plan, 0).second, evaluate_model(model.snapshot(), pool, plan, 0).second);
}

TEST(EvaluateModel, ChannelsOutsideSeenNeverWin) {
  Rng rng(14);
  auto model = tiny_model({0, 1, 2});
  model.parameter("decoder.classifier.bias").value[2] = 1e6f;
  const auto pool = random_eval_pool(rng, {0, 1, 2}, 3);
  const auto [images, labels] = make_batch(pool, std::vector<std::size_t>{0, 1, 2});
  for (const auto v : predict_labels(model, images, {0, 1})) EXPECT_NE(v, 2);
  for (const auto v : predict_labels(model, images, {0, 1, 2})) EXPECT_EQ(v, 2);
  // Ground-truth pixels of unseen classes are not scored.
  const auto [cm, b] = evaluate_model(model, pool, {0, 1}, {0, 1}, {});
  EXPECT_FALSE(cm.has_class(2));
}

TEST(EvaluateModel, TiesGoToLowestClassId) {
  auto model = tiny_model({3, 1, 2});
  for (auto& p : model.parameters()) p.value.fill(0.0f);
  Rng rng(1);
  const auto pool = random_eval_pool(rng, {1, 2, 3}, 1);
  const auto [images, labels] = make_batch(pool, std::vector<std::size_t>{0});
  for (const auto v : predict_labels(model, images, {1, 2, 3})) EXPECT_EQ(v, 1);
}

TEST(EvaluateModel, Errors) {
  const auto model = tiny_model({0, 1});
  EXPECT_THROW(evaluate_model(model, DatasetPool{}, {0, 1}, {0, 1}, {}), DataError);
  Rng rng(2);
  const auto pool = random_eval_pool(rng, {0, 1}, 1);
  EXPECT_THROW(evaluate_model(model, pool, {0, 1, 2}, {0, 1, 2}, {}), ConfigError);
}

TEST(EvaluateModel, PlanOverloadSplitsOldAndNew) {
  Rng rng(3);
  const auto plan = make_plan({{0, 1}, {2}}, 3);
  const auto model = tiny_model({0, 1, 2});
  const auto pool = random_eval_pool(rng, {0, 1, 2}, 2);
  const auto b0 = evaluate_model(model, pool, plan, 0).second;
  EXPECT_EQ(b0.old_classes, (std::vector<ClassId>{0, 1}));
  EXPECT_TRUE(b0.new_classes.empty());
  const auto b1 = evaluate_model(model, pool, plan, 1).second;
  EXPECT_EQ(b1.new_classes, (std::vector<ClassId>{2}));
}

}  // namespace
}  // namespace ilss
