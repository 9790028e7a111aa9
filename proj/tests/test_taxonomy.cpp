#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "ilss/errors.hpp"
#include "ilss/taxonomy.hpp"
#include "test_support.hpp"

namespace ilss {
namespace {

using testing::draft_from_steps;
using testing::make_plan;

bool has_rule(const std::vector<PlanViolation>& vs, const std::string& rule) {
  return std::any_of(vs.begin(), vs.end(), [&](const PlanViolation& v) { return v.rule == rule; });
}

TEST(ValidatePlan, AcceptsDisjointPlanWithBackgroundFirst) {
  EXPECT_TRUE(validate_plan(draft_from_steps({{0, 1, 2}, {3}}, 4)).empty());
}

TEST(ValidatePlan, ReportsOverlapWithStepsAndId) {
  const auto vs = validate_plan(draft_from_steps({{0, 1}, {1, 2}}, 3));
  ASSERT_EQ(vs.size(), 1u);
  EXPECT_EQ(vs[0].rule, "disjointness");
  EXPECT_EQ(vs[0].ids, std::vector<ClassId>{1});
  EXPECT_EQ(vs[0].message, "disjointness: class 1 in steps 0 and 1");
}

TEST(ValidatePlan, ReportsMissingBackgroundInFirstStep) {
  const auto vs = validate_plan(draft_from_steps({{1, 2}, {3}}, 4));
  ASSERT_EQ(vs.size(), 1u);
  EXPECT_EQ(vs[0].rule, "background-in-s0");
  EXPECT_EQ(vs[0].message, "background not in S0");
}

TEST(ValidatePlan, ReportsEveryBrokenRule) {
  auto draft = draft_from_steps({{0}, {}, {7}}, 3);
  draft.classes.push_back({1, "dup", false});
  draft.classes[1].is_background = true;
  const auto vs = validate_plan(draft);
  EXPECT_TRUE(has_rule(vs, "unique-ids"));
  EXPECT_TRUE(has_rule(vs, "background"));
  EXPECT_TRUE(has_rule(vs, "empty-step"));
  EXPECT_TRUE(has_rule(vs, "unknown-class"));
}

TEST(ValidatePlan, RejectsSparseIdsAndEmptyStepList) {
  PlanDraft sparse;
  sparse.classes = {{0, "bg", true}, {2, "a", false}};
  sparse.step_sets = {{0, 2}};
  EXPECT_TRUE(has_rule(validate_plan(sparse), "dense-ids"));
  EXPECT_TRUE(has_rule(validate_plan(draft_from_steps({}, 2)), "no-steps"));
}

TEST(IncrementalPlan, CreateThrowsConfigErrorOnViolation) {
  EXPECT_THROW(make_plan({{0, 1}, {1, 2}}, 3), ConfigError);
  try {
    make_plan({{1, 2}, {3}}, 4);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("background not in S0"), std::string::npos);
  }
}

TEST(SeenClasses, FirstStepIsS0) {
  const auto plan = make_plan({{0, 1}, {2}, {3}}, 4);
  EXPECT_EQ(seen_classes(plan, 0), (ClassSet{0, 1}));
  EXPECT_EQ(seen_classes(plan, 2), (ClassSet{0, 1, 2, 3}));
}

TEST(SeenClasses, LastClassAddedToTwentyBaseClasses) {
  std::vector<ClassId> base(20);
  std::iota(base.begin(), base.end(), 0);
  const auto plan = make_plan({base, {20}}, 21);
  ClassSet all;
  for (ClassId c = 0; c <= 20; ++c) all.insert(c);
  EXPECT_EQ(seen_classes(plan, 1), all);
}

TEST(SeenClasses, ReturnsIndependentCopy) {
  const auto plan = make_plan({{0, 1}, {2}}, 3);
  auto s = seen_classes(plan, 0);
  s.insert(9);
  EXPECT_EQ(seen_classes(plan, 0), (ClassSet{0, 1}));
  EXPECT_EQ(plan.step_set(0), (ClassSet{0, 1}));
}

TEST(SeenClasses, OutOfRangeStepThrows) {
  const auto plan = make_plan({{0, 1}, {2}}, 3);
  EXPECT_THROW(seen_classes(plan, 2), StepIndexError);
}

TEST(UnseenClasses, ReturnsStepSet) {
  EXPECT_EQ(unseen_classes(make_plan({{0, 1}, {2}}, 3), 1), (ClassSet{2}));
  std::vector<ClassId> base(16);
  std::iota(base.begin(), base.end(), 0);
  EXPECT_EQ(unseen_classes(make_plan({base, {16, 17, 18, 19, 20}}, 21), 1), (ClassSet{16, 17, 18, 19, 20}));
}

TEST(UnseenClasses, StepZeroAndOutOfRangeThrow) {
  const auto plan = make_plan({{0, 1}, {2}}, 3);
  EXPECT_THROW(unseen_classes(plan, 0), StepIndexError);
  EXPECT_THROW(unseen_classes(plan, 2), StepIndexError);
}

TEST(ChannelOrder, StepSetsInPlanOrderAscendingWithin) {
  const auto plan = make_plan({{0, 3}, {2, 1}, {4}}, 5);
  EXPECT_EQ(channel_order(plan, 0), (std::vector<ClassId>{0, 3}));
  EXPECT_EQ(channel_order(plan, 1), (std::vector<ClassId>{0, 3, 1, 2}));
  EXPECT_EQ(channel_order(plan, 2), (std::vector<ClassId>{0, 3, 1, 2, 4}));
}

TEST(PlanJson, RoundTripAndFormat) {
  const auto plan = make_plan({{0, 1, 2}, {3}}, 4);
  const auto text = plan_to_json(plan);
  EXPECT_EQ(parse_plan(text), plan);
  const auto parsed = parse_plan(R"({"classes":[{"id":0,"name":"background"},{"id":1,"name":"a"}],"steps":[[0],[1]]})");
  EXPECT_EQ(parsed.class_name(1), "a");
  EXPECT_TRUE(parsed.classes()[0].is_background);
  EXPECT_EQ(unseen_classes(parsed, 1), (ClassSet{1}));
}

TEST(PlanJson, MalformedInputIsConfigError) {
  EXPECT_THROW(parse_plan("{"), ConfigError);
  EXPECT_THROW(parse_plan(R"({"classes":[]})"), ConfigError);
  EXPECT_THROW(parse_plan(R"({"classes":[{"id":0,"name":"bg"},{"id":1,"name":"a"}],"steps":[[0,1],[1]]})"), ConfigError);
}

TEST(PlanJson, SaveAndLoadFile) {
  testing::TempDir dir("plan");
  const auto plan = make_plan({{0, 2}, {1}, {3}}, 4);
  save_plan(plan, dir.path() / "plan.json");
  EXPECT_EQ(load_plan(dir.path() / "plan.json"), plan);
}

// Properties over random plans.

TEST(TaxonomyProperties, SeenSetsGrowAndStayDisjointFromNextStep) {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const auto plan = testing::random_plan(rng, 30);
    std::size_t total = 0;
    for (std::size_t k = 0; k < plan.num_steps(); ++k) total += plan.step_set(k).size();
    for (std::size_t k = 0; k < plan.num_steps(); ++k) {
      const auto seen = seen_classes(plan, k);
      if (k >= 1) {
        const auto prev = seen_classes(plan, k - 1);
        EXPECT_TRUE(std::includes(seen.begin(), seen.end(), prev.begin(), prev.end()));
      }
      if (k + 1 < plan.num_steps()) {
        const auto next = unseen_classes(plan, k + 1);
        for (const auto id : next) EXPECT_FALSE(seen.contains(id));
      }
      EXPECT_TRUE(seen.contains(kBackgroundClass));
    }
    EXPECT_EQ(seen_classes(plan, plan.num_steps() - 1).size(), total);
  }
}

TEST(TaxonomyProperties, MovingAnyClassIntoAnotherStepBreaksDisjointness) {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    auto draft = testing::random_plan(rng).to_draft();
    std::uniform_int_distribution<std::size_t> step(0, draft.step_sets.size() - 1);
    const auto from = step(rng);
    auto to = step(rng);
    if (to == from) to = (from + 1) % draft.step_sets.size();
    const auto id = draft.step_sets[from].back();
    draft.step_sets[to].push_back(id);
    const auto vs = validate_plan(draft);
    ASSERT_TRUE(has_rule(vs, "disjointness"));
    for (const auto& v : vs) {
      if (v.rule == "disjointness") {
        EXPECT_EQ(v.ids, std::vector<ClassId>{id});
      }
    }
  }
}

}  // namespace
}  // namespace ilss
