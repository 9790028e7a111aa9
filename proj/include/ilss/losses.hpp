#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>

#include "ilss/taxonomy.hpp"
#include "ilss/tensor.hpp"

namespace ilss {

/// How the incremental objective combines its terms:
///   total = CE + lambda_d * (output distillation? + feature distillation?)
struct LossConfig {
  double lambda_d = 1.0;
  bool use_output_distill = false;
  bool use_feature_distill = false;
  bool encoder_frozen = false;

  /// Throws ConfigError for the frozen-encoder + feature-distillation
  /// combination and for negative weights.
  void validate() const;
  bool needs_teacher() const { return lambda_d != 0.0 && (use_output_distill || use_feature_distill); }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

/// Scalar plus gradients keyed by the input they belong to: "logits" for
/// student logits, "features" for student encoder features.
template <typename T>
struct BasicLossValue {
  double value = 0.0;
  std::map<std::string, BasicTensor<T>> gradients;
};

using LossValue = BasicLossValue<float>;

inline constexpr const char* kLogitsGrad = "logits";
inline constexpr const char* kFeaturesGrad = "features";

/// Mean over non-ignored pixels of -log softmax(logits)[label]. Channel i of
/// the logits scores class channel_classes[i]; labels must be one of those or
/// ignore_index.
template <typename T>
BasicLossValue<T> cross_entropy(const BasicTensor<T>& logits, const LabelBatch& labels,
                                std::span<const ClassId> channel_classes, std::uint8_t ignore_index = kIgnoreLabel);

/// Masked cross-entropy between the teacher's softmax and the student's
/// softmax, restricted to the old classes (the teacher's channels, which are
/// the student's leading channels). The student softmax runs over all of its
/// channels and is not renormalised; averaged over every pixel.
template <typename T>
BasicLossValue<T> output_distillation(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                                      std::span<const ClassId> old_classes);

/// Squared L2 distance between feature maps, summed per sample and averaged
/// over the batch.
template <typename T>
BasicLossValue<T> feature_distillation(const BasicTensor<T>& student_features, const BasicTensor<T>& teacher_features);

template <typename T>
struct BasicLossComponents {
  BasicLossValue<T> cross_entropy;
  std::optional<BasicLossValue<T>> output_distill;
  std::optional<BasicLossValue<T>> feature_distill;
};

using LossComponents = BasicLossComponents<float>;

template <typename T>
BasicLossValue<T> total_loss(const LossConfig& config, const BasicLossComponents<T>& components);

}  // namespace ilss
