#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ilss/dataset.hpp"
#include "ilss/losses.hpp"
#include "ilss/metrics.hpp"
#include "ilss/network.hpp"
#include "ilss/random.hpp"
#include "ilss/taxonomy.hpp"

namespace ilss {

struct Schedule {
  double base_lr = 1e-4;
  double end_lr = 1e-6;
  double power = 0.9;
  std::size_t total_steps = 1;

  void validate() const;
};

/// (base - end) * (1 - t/T)^power + end, for 0 <= t <= T.
double poly_lr(const Schedule& schedule, std::size_t t);

struct TrainConfig {
  double base_lr = 1e-4;              // initial stage
  double incremental_base_lr = 5e-5;  // steps k >= 1
  double end_lr = 1e-6;
  double power = 0.9;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::size_t batch_size = 4;
  std::size_t steps_per_class = 1000;
  std::uint64_t seed = 0;
  ArchConfig arch;

  void validate() const;
};

/// Velocity buffer per parameter name.
using MomentumState = std::map<std::string, Tensor>;

/// Per non-frozen parameter: g = grad + wd * w; v = momentum * v + g;
/// w -= lr * v; grad = 0. Frozen parameters (values, velocity, gradient)
/// are left alone.
void sgd_update(SegmentationModel& model, double lr, double weight_decay, double momentum, MomentumState& state);

/// Epoch-wise shuffled mini-batches; a batch crossing an epoch boundary is
/// completed from the next epoch's permutation.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  void reshuffle();

  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

struct LossCurvePoint {
  std::size_t iteration = 0;
  double lr = 0.0;
  double ce = 0.0;
  double out_distill = 0.0;
  double feat_distill = 0.0;
  double total = 0.0;

  friend bool operator==(const LossCurvePoint&, const LossCurvePoint&) = default;
};

struct StepReport {
  std::size_t step = 0;
  std::size_t total_steps = 0;
  std::size_t train_set_size = 0;
  LossConfig loss;
  std::vector<LossCurvePoint> curve;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
};

std::string report_to_json(const StepReport& report);
std::string loss_curve_csv(const StepReport& report);

struct StageResult {
  SegmentationModel model;
  StepReport report;
  std::set<std::string> used_ids;
};

std::size_t initial_step_count(const IncrementalPlan& plan, const TrainConfig& config);
std::size_t incremental_step_count(const IncrementalPlan& plan, std::size_t k, const TrainConfig& config);

/// Trains M0 on the S0-only split with cross-entropy alone.
StageResult train_initial(const DatasetPool& pool, const IncrementalPlan& plan, const TrainConfig& config);

/// Step k: the previous model becomes a frozen teacher, a copy of it grows
/// its head by |U_k| channels and is trained on the unused samples holding
/// a new class.
StageResult incremental_step(const SegmentationModel& previous, const DatasetPool& pool, const IncrementalPlan& plan,
                             std::size_t k, const LossConfig& loss, const TrainConfig& config,
                             const std::set<std::string>& used_ids);

enum class Protocol { AddOne, AddBatch, Sequential };

std::string_view protocol_name(Protocol protocol);
Protocol parse_protocol(std::string_view name);

/// Throws ConfigError when the plan's step structure does not fit.
void validate_protocol(const IncrementalPlan& plan, Protocol protocol);

struct ProtocolStep {
  SegmentationModel model;
  StepReport report;
  MetricBundle metrics;
  std::set<std::string> used_ids;  // after this step
};

/// M0..MK with their validation metrics.
std::vector<ProtocolStep> run_protocol(const DatasetPool& train, const DatasetPool& val, const IncrementalPlan& plan,
                                       Protocol protocol, const LossConfig& loss, const TrainConfig& config);

/// Same as run_protocol but reuses an already trained M0.
std::vector<ProtocolStep> continue_protocol(const StageResult& initial, const DatasetPool& train, const DatasetPool& val,
                                            const IncrementalPlan& plan, Protocol protocol, const LossConfig& loss,
                                            const TrainConfig& config);

}  // namespace ilss
