#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilss/losses.hpp"
#include "ilss/metrics.hpp"
#include "ilss/taxonomy.hpp"
#include "ilss/trainer.hpp"

namespace ilss {

enum class MethodMode { Finetune, OutDistill, Freeze, FreezeOutDistill, FeatDistill, BothDistill };

inline constexpr std::array<MethodMode, 6> kAllModes{MethodMode::Finetune,         MethodMode::OutDistill,
                                                     MethodMode::Freeze,           MethodMode::FreezeOutDistill,
                                                     MethodMode::FeatDistill,      MethodMode::BothDistill};

std::string_view mode_name(MethodMode mode);
MethodMode parse_mode(std::string_view name);

/// finetune and freeze carry lambda_d = 0; the distilling modes carry
/// `lambda_d`.
LossConfig mode_loss_config(MethodMode mode, double lambda_d = 1.0);

/// Inverse of mode_loss_config, keyed on which terms are active. Throws
/// ConfigError for invalid combinations.
MethodMode mode_from_loss_config(const LossConfig& loss);

struct ExperimentConfig {
  std::filesystem::path data_dir;   // holds train/ and val/
  std::filesystem::path plan_file;  // empty: <data_dir>/plan.json
  Protocol protocol = Protocol::AddOne;
  // Modes sharing one M0 per seed.
  std::vector<MethodMode> modes{MethodMode::Finetune};
  double lambda_d = 1.0;
  TrainConfig train;  // train.seed is replaced by each entry of `seeds`
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::filesystem::path out_dir;

  std::filesystem::path resolved_plan_file() const;
  /// Throws ConfigError for missing inputs, empty seeds or modes, and
  /// invalid training settings.
  void validate() const;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single run
  std::size_t runs = 0;

  friend bool operator==(const MeanStd&, const MeanStd&) = default;
};

MeanStd mean_std(std::span<const double> values);

struct StepSummary {
  std::size_t step = 0;
  std::vector<ClassId> old_classes;
  std::vector<ClassId> new_classes;
  std::map<ClassId, MeanStd> per_class_iou;
  std::optional<MeanStd> miou_old;
  std::optional<MeanStd> miou_new;
  MeanStd miou;
  MeanStd mpa;
  MeanStd mca;
};

/// Aggregate of one protocol + mode over seeds.
struct ModeSummary {
  std::string protocol;
  std::string mode;
  std::vector<std::uint64_t> seeds;
  std::map<ClassId, std::string> class_names;
  std::vector<StepSummary> steps;
};

/// per_seed[s][k] is the bundle of step k for seed s; all seeds must cover
/// the same steps and classes.
ModeSummary summarize_seeds(std::string protocol, std::string mode, std::vector<std::uint64_t> seeds,
                            const IncrementalPlan& plan, const std::vector<std::vector<MetricBundle>>& per_seed);

std::string summary_to_json(const ModeSummary& summary);
ModeSummary summary_from_json(std::string_view text);

/// out/<protocol>/<mode>/<seed>/step_<k>
std::filesystem::path step_directory(const std::filesystem::path& out, Protocol protocol, MethodMode mode,
                                     std::uint64_t seed, std::size_t k);
std::filesystem::path mode_directory(const std::filesystem::path& out, Protocol protocol, MethodMode mode);

/// Writes checkpoint/ (with used_ids.json), metrics.json, per_class.csv,
/// loss_curve.csv and report.json into `directory`.
void write_step_artifacts(const std::filesystem::path& directory, const SegmentationModel& model, StepReport report,
                          const MetricBundle& metrics, const std::set<std::string>& used_ids,
                          const IncrementalPlan& plan);

void save_used_ids(const std::set<std::string>& ids, const std::filesystem::path& checkpoint_dir);
std::set<std::string> load_used_ids(const std::filesystem::path& checkpoint_dir);

/// Runs the protocol for every seed and mode and writes the directory
/// layout plus one summary.json per mode. Returns the summaries in mode
/// order. Errors are rethrown with their mode and seed prepended.
std::vector<ModeSummary> run_experiment(const ExperimentConfig& config);

struct ReportTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

/// Per-class IoU table: an M0 row, then one row per summary for its final
/// model. Columns: model, method, one per class, mIoU old, mIoU new, mIoU,
/// mPA, mCA; values in percent, "-" where a class is not scored. Throws
/// ReportError if the summaries disagree on classes or steps.
ReportTable class_table(std::span<const ModeSummary> summaries);

/// One row per model M_k; an mIoU, mPA and mCA column triple per summary.
ReportTable step_table(std::span<const ModeSummary> summaries);

std::string table_to_csv(const ReportTable& table);
std::string table_to_markdown(const ReportTable& table);

/// Loads <dir>/summary.json for every directory.
std::vector<ModeSummary> load_summaries(std::span<const std::filesystem::path> directories);

}  // namespace ilss
