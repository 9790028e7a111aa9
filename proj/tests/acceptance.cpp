// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ilss/cli.hpp"
#include "ilss/errors.hpp"
#include "ilss/experiment.hpp"
#include "ilss/gradcheck.hpp"
#include "metrics_oracle.hpp"
#include "test_support.hpp"

namespace ilss {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

// Pinned tolerances and thresholds.
constexpr double kGradEps = 1e-3;
constexpr double kGradTolerance = 1e-3;
constexpr double kGradRuntimeSeconds = 60.0;
constexpr double kLossTolerance = 1e-6;
constexpr int kMetricPairs = 50;
constexpr std::size_t kMetricSide = 16;
constexpr std::size_t kScheduleSamples = 1000;
constexpr int kSplitTrials = 250;
constexpr int kMinSplitTrials = 200;

// Forgetting run. Calibration of this exact configuration (data seed 1,
// seeds 0..2) gave fine-tuning drops in mIoU-old of 5.8, 7.7 and 9.2 points
// and out_distill / freeze_out_distill above fine-tuning on every seed.
constexpr double kMinForgettingDrop = 5.0;  // absolute mIoU points
constexpr double kMinOrderingMargin = 0.0;  // strict ordering
constexpr int kMinOrderedSeeds = 2;
constexpr std::uint64_t kDeskDataSeed = 1;
constexpr std::size_t kDeskStepsPerClass = 200;

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.base_lr = 5e-3;
  c.incremental_base_lr = 2.5e-3;
  c.steps_per_class = kDeskStepsPerClass;
  c.batch_size = 4;
  return c;
}

void write_dataset(const ShapesConfig& sc, const IncrementalPlan& plan, const fs::path& dir) {
  const auto [train, val] = generate_shapes_dataset(sc);
  save_pool(train, dir / "train");
  save_pool(val, dir / "val");
  save_plan(plan, dir / "plan.json");
}

// 1 ------------------------------------------------------------------------

Outcome gradient_correctness() {
  GradCheckOptions o;
  o.eps = kGradEps;
  o.tolerance = kGradTolerance;
  o.double_precision = true;
  const auto start = std::chrono::steady_clock::now();
  const auto results = run_gradcheck(o);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Outcome out{results.size() == 4 && seconds < kGradRuntimeSeconds, ""};
  for (const auto& r : results) {
    out.passed = out.passed && r.passed && r.max_rel_error < kGradTolerance;
    out.detail += r.loss + " " + fmt(r.max_rel_error, 2) + ", ";
  }
  out.detail += fmt(seconds, 2) + " s";
  return out;
}

// 2 ------------------------------------------------------------------------

Outcome loss_unit_values() {
  Tensor z2({1, 2, 1, 1});
  const std::vector<ClassId> two{0, 1};
  const double ce = cross_entropy(z2, LabelBatch{1, 1, 1, {0}}, two).value;
  const double od = output_distillation(Tensor({1, 3, 1, 1}), Tensor({1, 2, 1, 1}), two).value;
  Rng rng(1);
  Tensor f({1, 2, 2, 2});
  for (auto& v : f.data()) v = std::uniform_real_distribution<float>(-1.0f, 1.0f)(rng);
  const double fd_same = feature_distillation(f, f).value;
  Tensor ones({1, 2, 2, 2});
  ones.fill(1.0f);
  const double fd_unit = feature_distillation(Tensor({1, 2, 2, 2}), ones).value;
  const bool ok = std::abs(ce - std::log(2.0)) <= kLossTolerance && std::abs(od - std::log(3.0)) <= kLossTolerance &&
                  fd_same == 0.0 && fd_unit == 8.0;
  return {ok, "ce " + fmt(ce, 9) + ", out " + fmt(od, 9) + ", feat " + fmt(fd_same) + " / " + fmt(fd_unit)};
}

// 3 ------------------------------------------------------------------------

Outcome metrics_oracle() {
  Rng rng(2024);
  const std::vector<ClassId> classes{0, 1, 2, 3, 4};
  int matched = 0;
  for (int i = 0; i < kMetricPairs; ++i) {
    const auto pred = testing::random_label_map(rng, classes, kMetricSide * kMetricSide, false);
    const auto gt = testing::random_label_map(rng, classes, kMetricSide * kMetricSide, true);
    ConfusionMatrix cm(classes);
    accumulate(cm, pred, gt);
    const auto b = summarize(cm, {0, 1, 2}, {3, 4});
    const auto o = testing::brute_force_metrics(classes, {pred}, {gt});
    if (b.per_class_iou == o.iou && b.miou == o.miou && b.mpa == o.mpa && b.mca == o.mca) ++matched;
  }
  return {matched == kMetricPairs, std::to_string(matched) + "/" + std::to_string(kMetricPairs) + " pairs exact"};
}

// 4 ------------------------------------------------------------------------

Outcome schedule_endpoints() {
  const Schedule s{1e-4, 1e-6, 0.9, 16000};
  bool ok = poly_lr(s, 0) == s.base_lr && poly_lr(s, s.total_steps) == s.end_lr;
  double prev = poly_lr(s, 0);
  for (std::size_t i = 1; i <= kScheduleSamples; ++i) {
    const double lr = poly_lr(s, i * s.total_steps / kScheduleSamples);
    ok = ok && lr <= prev;
    prev = lr;
  }
  return {ok, "base/end exact, " + std::to_string(kScheduleSamples) + " samples monotone"};
}

// 5 ------------------------------------------------------------------------

Outcome split_invariants() {
  Rng rng(55);
  int trials = 0;
  int violations = 0;
  std::size_t sets = 0;
  for (int t = 0; t < kSplitTrials; ++t) {
    const auto plan = testing::random_plan(rng, 12);
    const auto pool = testing::random_pool(rng, plan, 60);
    ++trials;
    std::set<std::string> used;
    try {
      for (const auto& id : filter_initial_training_set(pool, plan).ids) used.insert(id);
    } catch (const EmptySplitError&) {
    }
    for (std::size_t k = 1; k < plan.num_steps(); ++k) {
      StepTrainingSet set;
      try {
        set = filter_step_training_set(pool, plan, k, used);
      } catch (const EmptySplitError&) {
        continue;
      }
      ++sets;
      const auto allowed = seen_classes(plan, k);
      const auto added = unseen_classes(plan, k);
      for (std::size_t i = 0; i < set.size(); ++i) {
        const auto& sample = pool.samples[set.indices[i]];
        if (used.contains(sample.id)) ++violations;
        bool has_new = false;
        for (const auto l : sample.label) {
          if (l == kIgnoreLabel) continue;
          if (!allowed.contains(l)) ++violations;
          has_new = has_new || added.contains(l);
        }
        if (!has_new) ++violations;
      }
      used.insert(set.ids.begin(), set.ids.end());
    }
    // Moving background out of S0 must be rejected.
    auto draft = plan.to_draft();
    draft.step_sets[0].erase(std::find(draft.step_sets[0].begin(), draft.step_sets[0].end(), kBackgroundClass));
    draft.step_sets.back().push_back(kBackgroundClass);
    try {
      IncrementalPlan::create(draft);
      ++violations;
    } catch (const ConfigError&) {
    }
  }
  return {trials >= kMinSplitTrials && violations == 0 && sets > 0,
          std::to_string(trials) + " plans, " + std::to_string(sets) + " step sets, " + std::to_string(violations) +
              " violations"};
}

// 6 ------------------------------------------------------------------------

Outcome freeze_and_snapshot() {
  ShapesConfig sc;
  sc.num_train = 80;
  sc.num_val = 10;
  sc.seed = 3;
  const auto [train, val] = generate_shapes_dataset(sc);
  const auto plan = default_shapes_plan(sc.num_classes);
  auto config = desk_train_config();
  config.steps_per_class = 10;
  const auto m0 = train_initial(train, plan, config);

  // Frozen encoder after a step.
  const auto step = incremental_step(m0.model, train, plan, 1, mode_loss_config(MethodMode::Freeze), config, m0.used_ids);
  bool encoder_same = true;
  for (std::size_t i = 0; i < m0.model.parameters().size(); ++i) {
    const auto& p = m0.model.parameters()[i];
    if (p.in_encoder) encoder_same = encoder_same && p.value == step.model.parameters()[i].value;
  }

  // Teacher outputs are unaffected by training the student.
  const auto teacher = m0.model.snapshot();
  std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto [images, labels] = make_batch(train, idx);
  const auto before = teacher.forward(images).logits;
  auto student = m0.model;
  MomentumState momentum;
  for (int i = 0; i < 20; ++i) {
    const auto fwd = student.forward(images);
    const auto loss = cross_entropy(fwd.logits, labels, student.channel_classes());
    student.backward(fwd, loss.gradients.at(kLogitsGrad));
    sgd_update(student, 1e-2, 1e-4, 0.9, momentum);
  }
  const bool teacher_same = teacher.forward(images).logits == before && !student.same_state(teacher);

  // Head growth keeps old logits.
  auto grown = m0.model;
  const std::vector<ClassId> added{5};
  grown.grow_classifier(added, 9);
  const auto old_logits = m0.model.forward(images).logits;
  const auto new_logits = grown.forward(images).logits;
  bool growth_same = new_logits.dim(1) == old_logits.dim(1) + 1;
  const std::size_t hw = old_logits.dim(2) * old_logits.dim(3);
  for (std::size_t n = 0; n < old_logits.dim(0) && growth_same; ++n) {
    for (std::size_t c = 0; c < old_logits.dim(1); ++c) {
      for (std::size_t p = 0; p < hw; ++p) {
        growth_same = growth_same && old_logits[(n * old_logits.dim(1) + c) * hw + p] ==
                                         new_logits[(n * new_logits.dim(1) + c) * hw + p];
      }
    }
  }
  return {encoder_same && teacher_same && growth_same,
          std::string("encoder ") + (encoder_same ? "identical" : "changed") + ", teacher " +
              (teacher_same ? "unchanged" : "changed") + ", old logits " + (growth_same ? "preserved" : "changed")};
}

// 7 ------------------------------------------------------------------------

Outcome desk_forgetting() {
  TempDir data("acc_desk_data");
  TempDir out("acc_desk_out");
  ShapesConfig sc;  // 6 classes, 32x32, 200 train images
  sc.seed = kDeskDataSeed;
  write_dataset(sc, default_shapes_plan(sc.num_classes), data.path());
  ExperimentConfig config;
  config.data_dir = data.path();
  config.protocol = Protocol::AddOne;
  config.modes = {MethodMode::Finetune, MethodMode::OutDistill, MethodMode::FreezeOutDistill};
  config.seeds = {0, 1, 2};
  config.train = desk_train_config();
  config.out_dir = out.path();
  run_experiment(config);

  auto load = [&](MethodMode mode, std::uint64_t seed, std::size_t k) {
    return bundle_from_json(read_file(step_directory(out.path(), Protocol::AddOne, mode, seed, k) / "metrics.json"));
  };
  double drop_sum = 0.0;
  int od_wins = 0, fod_wins = 0;
  std::string per_seed;
  for (const auto seed : config.seeds) {
    const double m0 = load(MethodMode::Finetune, seed, 0).miou;
    const double ft = *load(MethodMode::Finetune, seed, 1).miou_old;
    const double od = *load(MethodMode::OutDistill, seed, 1).miou_old;
    const double fod = *load(MethodMode::FreezeOutDistill, seed, 1).miou_old;
    drop_sum += 100.0 * (m0 - ft);
    od_wins += od - ft > kMinOrderingMargin;
    fod_wins += fod - ft > kMinOrderingMargin;
    per_seed += " s" + std::to_string(seed) + "[M0 " + fmt(100 * m0) + " ft " + fmt(100 * ft) + " od " + fmt(100 * od) +
                " fod " + fmt(100 * fod) + "]";
  }
  const double drop = drop_sum / static_cast<double>(config.seeds.size());
  const bool a = drop >= kMinForgettingDrop;
  const bool b = od_wins >= kMinOrderedSeeds;
  const bool c = fod_wins >= kMinOrderedSeeds;
  return {a && b && c, std::string("(a) ") + (a ? "ok" : "no") + " mean drop " + fmt(drop) + " pts; (b) " +
                           (b ? "ok " : "no ") + std::to_string(od_wins) + "/3; (c) " + (c ? "ok " : "no ") +
                           std::to_string(fod_wins) + "/3;" + per_seed};
}

// 8 ------------------------------------------------------------------------

Outcome sequential_structure() {
  TempDir data("acc_seq_data");
  TempDir out("acc_seq_out");
  constexpr std::size_t kClasses = 11;
  ShapesConfig sc;
  sc.num_classes = kClasses;
  sc.num_train = 300;
  sc.seed = 4;
  std::vector<std::vector<ClassId>> steps{{0, 1, 2, 3, 4, 5}, {6}, {7}, {8}, {9}, {10}};
  PlanDraft draft;
  for (std::size_t c = 0; c < kClasses; ++c) {
    const auto id = static_cast<ClassId>(c);
    draft.classes.push_back({id, std::string(shape_family_name(id)), c == 0});
  }
  draft.step_sets = steps;
  write_dataset(sc, IncrementalPlan::create(draft), data.path());

  ExperimentConfig config;
  config.data_dir = data.path();
  config.protocol = Protocol::Sequential;
  config.modes = {MethodMode::Finetune, MethodMode::OutDistill};
  config.seeds = {0};
  config.train = desk_train_config();
  config.train.steps_per_class = 10;
  config.out_dir = out.path();
  const auto summaries = run_experiment(config);

  bool ok = summaries.size() == 2;
  std::string channels;
  for (const auto mode : config.modes) {
    for (std::size_t k = 0; k < steps.size(); ++k) {
      const auto dir = step_directory(out.path(), Protocol::Sequential, mode, 0, k) / "checkpoint";
      if (!fs::exists(dir)) {
        ok = false;
        continue;
      }
      const auto n = load_checkpoint(dir).num_output_classes();
      ok = ok && n == 6 + k;
      if (mode == MethodMode::Finetune) channels += (k ? "," : "") + std::to_string(n);
    }
  }
  const auto table = step_table(summaries);
  const std::vector<std::string> header{"model",           "finetune mIoU",    "finetune mPA",   "finetune mCA",
                                        "out_distill mIoU", "out_distill mPA", "out_distill mCA"};
  ok = ok && table.header == header && table.rows.size() == steps.size();
  for (std::size_t k = 0; k < table.rows.size() && ok; ++k) {
    ok = table.rows[k].size() == header.size() && table.rows[k][0].rfind("M" + std::to_string(k) + " (", 0) == 0;
  }
  return {ok, "channels " + channels + ", " + std::to_string(table.rows.size()) + " table rows x " +
                  std::to_string(table.header.size()) + " columns"};
}

// 9 ------------------------------------------------------------------------

std::map<std::string, std::string> artifact_bytes(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root).string();
    const bool checkpoint = rel.find("/checkpoint/") != std::string::npos;
    const auto name = e.path().filename().string();
    if (checkpoint || name == "metrics.json" || name == "summary.json" || name == "loss_curve.csv") {
      files[rel] = read_file(e.path());
    }
  }
  return files;
}

Outcome determinism() {
  TempDir data("acc_det_data");
  TempDir first("acc_det_a");
  TempDir second("acc_det_b");
  ShapesConfig sc;
  sc.num_train = 60;
  sc.num_val = 10;
  sc.seed = 8;
  write_dataset(sc, default_shapes_plan(sc.num_classes), data.path());
  ExperimentConfig config;
  config.data_dir = data.path();
  config.modes.assign(kAllModes.begin(), kAllModes.end());
  config.seeds = {0, 1};
  config.train = desk_train_config();
  config.train.steps_per_class = 8;
  config.out_dir = first.path();
  run_experiment(config);
  config.out_dir = second.path();
  run_experiment(config);
  const auto a = artifact_bytes(first.path());
  const auto b = artifact_bytes(second.path());
  std::size_t checkpoints = 0;
  for (const auto& [rel, bytes] : a) checkpoints += rel.ends_with("weights.bin");
  return {!a.empty() && a == b, std::to_string(a.size()) + " files compared (" + std::to_string(checkpoints) +
                                    " checkpoints), " + (a == b ? "all identical" : "differences found")};
}

// 10 -----------------------------------------------------------------------

Outcome config_validation() {
  std::string message;
  bool rejected = false;
  try {
    LossConfig{1.0, false, true, true}.validate();
  } catch (const ConfigError& e) {
    rejected = true;
    message = e.what();
  }
  const bool cites = message.find("frozen encoder") != std::string::npos &&
                     message.find("feature distillation") != std::string::npos;

  TempDir data("acc_cfg_data");
  TempDir out("acc_cfg_out");
  ShapesConfig sc;
  sc.num_train = 10;
  sc.num_val = 2;
  write_dataset(sc, default_shapes_plan(sc.num_classes), data.path());
  const std::string data_arg = data.path().string(), out_arg = out.path().string();
  const std::vector<const char*> argv{"ilss", "run", "--data", data_arg.c_str(), "--out", out_arg.c_str(), "--mode",
                                      "freeze", "--feat-distill"};
  std::ostringstream cout_text, cerr_text;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), cout_text, cerr_text);
  const bool cli_ok = code == kExitConfig && cerr_text.str().find("frozen encoder") != std::string::npos;
  return {rejected && cites && cli_ok, "diagnostic: \"" + message + "\"; cli exit " + std::to_string(code)};
}

}  // namespace
}  // namespace ilss

int main() {
  using namespace ilss;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"loss unit values", loss_unit_values},
      {"metrics oracle equivalence", metrics_oracle},
      {"schedule endpoints", schedule_endpoints},
      {"split-protocol invariants", split_invariants},
      {"freeze and snapshot contracts", freeze_and_snapshot},
      {"desk-scale forgetting", desk_forgetting},
      {"sequential protocol structure", sequential_structure},
      {"determinism", determinism},
      {"config validation", config_validation},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " [" << (i + 1) << "] " << criteria[i].first << ": " << o.detail
              << " (" << fmt(seconds, 3) << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
