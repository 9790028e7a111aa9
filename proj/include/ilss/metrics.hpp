#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ilss/dataset.hpp"
#include "ilss/network.hpp"
#include "ilss/taxonomy.hpp"

namespace ilss {

/// Pixel counts, rows = ground truth, columns = prediction, over an ordered
/// list of class ids.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::vector<ClassId> classes);

  const std::vector<ClassId>& classes() const { return classes_; }
  bool has_class(ClassId id) const;
  std::uint64_t count(ClassId ground_truth, ClassId predicted) const;
  std::uint64_t row_sum(ClassId ground_truth) const;
  std::uint64_t column_sum(ClassId predicted) const;
  std::uint64_t total() const;

  void add(ClassId ground_truth, ClassId predicted, std::uint64_t n = 1);

  /// Elementwise sum; both matrices must cover the same classes.
  void merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t index_of(ClassId id) const;

  std::vector<ClassId> classes_;
  std::array<int, 256> index_{};
  std::vector<std::uint64_t> counts_;
};

/// counts[gt][pred] += 1 for every pixel whose ground truth is not
/// ignore_index.
void accumulate(ConfusionMatrix& cm, std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> ground_truth,
                std::uint8_t ignore_index = kIgnoreLabel);

/// TP / (TP + FP + FN); classes with an empty union are left out.
std::map<ClassId, double> iou_per_class(const ConfusionMatrix& cm);

struct MetricBundle {
  std::size_t step = 0;
  std::map<ClassId, double> per_class_iou;
  std::map<ClassId, double> per_class_recall;
  double miou = 0.0;
  std::optional<double> miou_old;
  std::optional<double> miou_new;
  double mpa = 0.0;  // global pixel accuracy
  double mca = 0.0;  // mean per-class recall
  std::vector<ClassId> old_classes;
  std::vector<ClassId> new_classes;

  friend bool operator==(const MetricBundle&, const MetricBundle&) = default;
};

MetricBundle summarize(const ConfusionMatrix& cm, const ClassSet& old_classes, const ClassSet& new_classes,
                       std::size_t step = 0);

/// Per-pixel argmax over the channels whose class is in `seen` (ties go to
/// the lowest class id). Ground-truth pixels of classes outside `seen` are
/// not scored.
std::pair<ConfusionMatrix, MetricBundle> evaluate_model(const SegmentationModel& model, const DatasetPool& pool,
                                                        const ClassSet& seen, const ClassSet& old_classes,
                                                        const ClassSet& new_classes,
                                                        std::uint8_t ignore_index = kIgnoreLabel);

/// Old/new split taken from the plan: at step 0 every seen class is "old".
std::pair<ConfusionMatrix, MetricBundle> evaluate_model(const SegmentationModel& model, const DatasetPool& pool,
                                                        const IncrementalPlan& plan, std::size_t k);

/// Predicted class map (N x H x W) restricted to `seen`.
std::vector<std::uint8_t> predict_labels(const SegmentationModel& model, const Tensor& batch, const ClassSet& seen);

std::string bundle_to_json(const MetricBundle& bundle);
MetricBundle bundle_from_json(std::string_view text);

/// class_id,name,iou,recall,group
std::string per_class_csv(const MetricBundle& bundle, const IncrementalPlan& plan);

}  // namespace ilss
