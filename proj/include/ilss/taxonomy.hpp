#pragma once

#include <cstddef>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace ilss {

using ClassId = int;
using ClassSet = std::set<ClassId>;

inline constexpr ClassId kBackgroundClass = 0;

struct ClassLabel {
  ClassId id = 0;
  std::string name;
  bool is_background = false;

  friend bool operator==(const ClassLabel&, const ClassLabel&) = default;
};

/// Unvalidated plan as read from disk or assembled by hand. Step 0 holds the
/// initially learned classes, step k >= 1 the classes added at step k.
struct PlanDraft {
  std::vector<ClassLabel> classes;
  std::vector<std::vector<ClassId>> step_sets;
};

struct PlanViolation {
  std::string rule;
  std::vector<ClassId> ids;
  std::string message;
};

std::vector<PlanViolation> validate_plan(const PlanDraft& draft);

/// Validated, immutable class schedule.
class IncrementalPlan {
 public:
  /// Throws ConfigError listing every violation.
  static IncrementalPlan create(PlanDraft draft);

  const std::vector<ClassLabel>& classes() const { return classes_; }
  std::size_t num_classes() const { return classes_.size(); }
  std::size_t num_steps() const { return steps_.size(); }
  const ClassSet& step_set(std::size_t k) const;
  const std::string& class_name(ClassId id) const;
  bool has_class(ClassId id) const;

  PlanDraft to_draft() const;

  friend bool operator==(const IncrementalPlan&, const IncrementalPlan&) = default;

 private:
  IncrementalPlan() = default;

  std::vector<ClassLabel> classes_;
  std::vector<ClassSet> steps_;
};

/// Union of step sets 0..k.
ClassSet seen_classes(const IncrementalPlan& plan, std::size_t k);

/// The classes introduced at step k; k must be >= 1.
ClassSet unseen_classes(const IncrementalPlan& plan, std::size_t k);

/// Class id of every output channel of the step-k model: step sets in plan
/// order, each in ascending id order. The first |S_{k-1}| entries are the
/// channels the model already had before step k.
std::vector<ClassId> channel_order(const IncrementalPlan& plan, std::size_t k);

IncrementalPlan parse_plan(std::string_view json_text);
std::string plan_to_json(const IncrementalPlan& plan);
IncrementalPlan load_plan(const std::filesystem::path& path);
void save_plan(const IncrementalPlan& plan, const std::filesystem::path& path);

}  // namespace ilss
