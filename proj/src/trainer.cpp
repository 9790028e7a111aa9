#include "ilss/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "ilss/errors.hpp"

namespace ilss {

void Schedule::validate() const {
  if (!(end_lr > 0.0) || !(base_lr > end_lr)) throw ConfigError("schedule: need base_lr > end_lr > 0");
  if (total_steps < 1) throw ConfigError("schedule: total_steps must be at least 1");
  if (!(power > 0.0)) throw ConfigError("schedule: power must be positive");
}

double poly_lr(const Schedule& schedule, std::size_t t) {
  if (t > schedule.total_steps) {
    throw ConfigError("poly_lr: iteration " + std::to_string(t) + " beyond " + std::to_string(schedule.total_steps));
  }
  if (t == schedule.total_steps) return schedule.end_lr;
  const double progress = 1.0 - static_cast<double>(t) / static_cast<double>(schedule.total_steps);
  return (schedule.base_lr - schedule.end_lr) * std::pow(progress, schedule.power) + schedule.end_lr;
}

void TrainConfig::validate() const {
  Schedule{base_lr, end_lr, power, 1}.validate();
  Schedule{incremental_base_lr, end_lr, power, 1}.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (steps_per_class < 1) throw ConfigError("steps_per_class must be at least 1");
  arch.validate();
}

void sgd_update(SegmentationModel& model, double lr, double weight_decay, double momentum, MomentumState& state) {
  const auto lr_f = static_cast<float>(lr);
  const auto wd_f = static_cast<float>(weight_decay);
  const auto mom_f = static_cast<float>(momentum);
  for (auto& p : model.parameters()) {
    if (p.frozen) continue;
    auto it = state.find(p.name);
    if (it == state.end() || it->second.shape() != p.value.shape()) {
      // Grown classifier rows start with zero velocity; existing rows keep theirs.
      Tensor fresh(p.value.shape());
      if (it != state.end()) {
        const auto old = it->second.data();
        std::copy(old.begin(), old.begin() + static_cast<std::ptrdiff_t>(std::min(old.size(), fresh.size())), fresh.data().begin());
      }
      it = state.insert_or_assign(p.name, std::move(fresh)).first;
    }
    auto v = it->second.data();
    auto w = p.value.data();
    auto g = p.gradient.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float grad = g[i] + wd_f * w[i];
      v[i] = mom_f * v[i] + grad;
      w[i] -= lr_f * v[i];
      g[i] = 0.0f;
    }
  }
}

BatchSampler::BatchSampler(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed)
    : order_(std::move(indices)), batch_size_(batch_size), rng_(seed) {
  if (order_.empty()) throw EmptySplitError("batch sampler over an empty set");
  if (batch_size_ == 0) throw ConfigError("batch size must be positive");
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> batch;
  batch.reserve(batch_size_);
  while (batch.size() < batch_size_) {
    if (cursor_ == order_.size()) reshuffle();
    batch.push_back(order_[cursor_++]);
  }
  return batch;
}

std::string report_to_json(const StepReport& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["total_steps"] = r.total_steps;
  j["train_set_size"] = r.train_set_size;
  j["loss"] = {{"lambda_d", r.loss.lambda_d},
               {"use_output_distill", r.loss.use_output_distill},
               {"use_feature_distill", r.loss.use_feature_distill},
               {"encoder_frozen", r.loss.encoder_frozen}};
  j["wall_seconds"] = r.wall_seconds;
  j["checkpoint"] = r.checkpoint_path;
  if (!r.curve.empty()) {
    j["initial_total_loss"] = r.curve.front().total;
    j["final_total_loss"] = r.curve.back().total;
  }
  return j.dump(2);
}

std::string loss_curve_csv(const StepReport& r) {
  std::ostringstream out;
  out.precision(9);
  out << "iteration,lr,ce,out_distill,feat_distill,total\n";
  for (const auto& p : r.curve) {
    out << p.iteration << ',' << p.lr << ',' << p.ce << ',' << p.out_distill << ',' << p.feat_distill << ',' << p.total << '\n';
  }
  return out.str();
}

std::size_t initial_step_count(const IncrementalPlan& plan, const TrainConfig& config) {
  return plan.step_set(0).size() * config.steps_per_class;
}

std::size_t incremental_step_count(const IncrementalPlan& plan, std::size_t k, const TrainConfig& config) {
  return unseen_classes(plan, k).size() * config.steps_per_class;
}

namespace {

std::uint64_t shuffle_seed(const TrainConfig& config, std::size_t k) {
  return derive_seed(derive_seed(config.seed, stream::kShuffle), k);
}

StepReport train_loop(SegmentationModel& student, const SegmentationModel* teacher, const StepTrainingSet& set,
                      const LossConfig& loss, const Schedule& schedule, const TrainConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  StepReport report;
  report.step = set.step;
  report.total_steps = schedule.total_steps;
  report.train_set_size = set.size();
  report.loss = loss;
  report.curve.reserve(schedule.total_steps);

  const bool use_teacher = teacher != nullptr && loss.needs_teacher();
  const auto& channels = student.channel_classes();
  BatchSampler sampler(set.indices, config.batch_size, shuffle_seed(config, set.step));
  MomentumState momentum;
  student.zero_grad();

  for (std::size_t t = 0; t < schedule.total_steps; ++t) {
    const double lr = poly_lr(schedule, t);
    const auto idx = sampler.next();
    auto [images, labels] = make_batch(*set.pool, idx);
    const auto fwd = student.forward(images);

    LossComponents components;
    components.cross_entropy = cross_entropy(fwd.logits, labels, channels);
    if (use_teacher) {
      const auto target = teacher->forward(images);
      if (loss.use_output_distill) {
        components.output_distill = output_distillation(fwd.logits, target.logits, teacher->channel_classes());
      }
      if (loss.use_feature_distill) components.feature_distill = feature_distillation(fwd.features, target.features);
    } else {
      // Terms switched on with lambda_D = 0 contribute nothing; keep the
      // component layout consistent with the config.
      if (loss.use_output_distill) components.output_distill = LossValue{};
      if (loss.use_feature_distill) components.feature_distill = LossValue{};
    }
    const auto total = total_loss(loss, components);
    if (!std::isfinite(total.value)) {
      throw NumericalError("non-finite loss at iteration " + std::to_string(t) + " of step " + std::to_string(set.step));
    }
    const auto features_grad = total.gradients.find(kFeaturesGrad);
    student.backward(fwd, total.gradients.at(kLogitsGrad),
                     features_grad == total.gradients.end() ? nullptr : &features_grad->second);
    sgd_update(student, lr, config.weight_decay, config.momentum, momentum);

    report.curve.push_back({t, lr, components.cross_entropy.value,
                            components.output_distill ? components.output_distill->value : 0.0,
                            components.feature_distill ? components.feature_distill->value : 0.0, total.value});
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace

StageResult train_initial(const DatasetPool& pool, const IncrementalPlan& plan, const TrainConfig& config) {
  config.validate();
  const auto set = filter_initial_training_set(pool, plan);
  auto model = SegmentationModel::build(channel_order(plan, 0), config.arch, config.seed);
  model.set_step(0);
  const Schedule schedule{config.base_lr, config.end_lr, config.power, initial_step_count(plan, config)};
  auto report = train_loop(model, nullptr, set, LossConfig{0.0, false, false, false}, schedule, config);
  return {std::move(model), std::move(report), std::set<std::string>(set.ids.begin(), set.ids.end())};
}

StageResult incremental_step(const SegmentationModel& previous, const DatasetPool& pool, const IncrementalPlan& plan,
                             std::size_t k, const LossConfig& loss, const TrainConfig& config,
                             const std::set<std::string>& used_ids) {
  if (k == 0) throw StepIndexError("incremental steps start at k = 1");
  loss.validate();
  config.validate();
  if (previous.channel_classes() != channel_order(plan, k - 1)) {
    throw ConfigError("incremental step " + std::to_string(k) + ": previous model's classes do not match S_" +
                      std::to_string(k - 1) + " of the plan");
  }
  const auto teacher = previous.snapshot();
  SegmentationModel student = previous;
  student.unfreeze_all();
  const auto added = unseen_classes(plan, k);
  const std::vector<ClassId> added_ids(added.begin(), added.end());
  student.grow_classifier(added_ids, derive_seed(config.seed, 100 + k));
  if (loss.encoder_frozen) student.freeze_encoder();
  student.set_step(k);

  const auto set = filter_step_training_set(pool, plan, k, used_ids);
  const Schedule schedule{config.incremental_base_lr, config.end_lr, config.power, incremental_step_count(plan, k, config)};
  auto report = train_loop(student, &teacher, set, loss, schedule, config);

  auto used = used_ids;
  used.insert(set.ids.begin(), set.ids.end());
  return {std::move(student), std::move(report), std::move(used)};
}

std::string_view protocol_name(Protocol protocol) {
  switch (protocol) {
    case Protocol::AddOne: return "add-one";
    case Protocol::AddBatch: return "add-batch";
    case Protocol::Sequential: return "sequential";
  }
  return "?";
}

Protocol parse_protocol(std::string_view name) {
  if (name == "add-one") return Protocol::AddOne;
  if (name == "add-batch") return Protocol::AddBatch;
  if (name == "sequential") return Protocol::Sequential;
  throw ConfigError("unknown protocol '" + std::string(name) + "' (expected add-one, add-batch or sequential)");
}

void validate_protocol(const IncrementalPlan& plan, Protocol protocol) {
  const std::string name(protocol_name(protocol));
  switch (protocol) {
    case Protocol::AddOne:
      if (plan.num_steps() != 2 || plan.step_set(1).size() != 1) {
        throw ConfigError("protocol add-one needs a 2-step plan adding exactly one class");
      }
      break;
    case Protocol::AddBatch:
      if (plan.num_steps() != 2) throw ConfigError("protocol add-batch needs a 2-step plan");
      break;
    case Protocol::Sequential:
      if (plan.num_steps() < 2) throw ConfigError("protocol sequential needs at least one incremental step");
      for (std::size_t k = 1; k < plan.num_steps(); ++k) {
        if (plan.step_set(k).size() != 1) {
          throw ConfigError("protocol sequential adds one class per step; step " + std::to_string(k) + " adds " +
                            std::to_string(plan.step_set(k).size()));
        }
      }
      break;
  }
}

std::vector<ProtocolStep> continue_protocol(const StageResult& initial, const DatasetPool& train, const DatasetPool& val,
                                            const IncrementalPlan& plan, Protocol protocol, const LossConfig& loss,
                                            const TrainConfig& config) {
  validate_protocol(plan, protocol);
  loss.validate();
  std::vector<ProtocolStep> steps;
  steps.push_back({initial.model, initial.report, evaluate_model(initial.model, val, plan, 0).second, initial.used_ids});
  for (std::size_t k = 1; k < plan.num_steps(); ++k) {
    auto stage = incremental_step(steps.back().model, train, plan, k, loss, config, steps.back().used_ids);
    auto metrics = evaluate_model(stage.model, val, plan, k).second;
    steps.push_back({std::move(stage.model), std::move(stage.report), std::move(metrics), std::move(stage.used_ids)});
  }
  return steps;
}

std::vector<ProtocolStep> run_protocol(const DatasetPool& train, const DatasetPool& val, const IncrementalPlan& plan,
                                       Protocol protocol, const LossConfig& loss, const TrainConfig& config) {
  validate_protocol(plan, protocol);
  loss.validate();
  return continue_protocol(train_initial(train, plan, config), train, val, plan, protocol, loss, config);
}

}  // namespace ilss
