#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ilss/taxonomy.hpp"
#include "ilss/tensor.hpp"

namespace ilss {

/// Encoder: one block per entry of encoder_channels, each a 3x3 conv, ReLU
/// and 2x2 average pool. Decoder: 3x3 conv, ReLU, 1x1 classifier, fixed
/// bilinear upsampling back to the input resolution.
struct ArchConfig {
  std::size_t input_channels = 3;
  std::vector<std::size_t> encoder_channels{16, 32, 64};
  std::size_t decoder_channels = 64;

  void validate() const;
  std::size_t downsample_factor() const { return std::size_t{1} << encoder_channels.size(); }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> gradient;
  bool frozen = false;
  bool in_encoder = false;
};

template <typename T>
struct BasicForwardResult {
  BasicTensor<T> logits;    // N x classes x H x W
  BasicTensor<T> features;  // encoder output, N x F x H/f x W/f

  // Backward cache: input of every conv and the ReLU outputs.
  std::vector<BasicTensor<T>> block_inputs;
  std::vector<BasicTensor<T>> block_activations;
  BasicTensor<T> decoder_activation;

  std::uint64_t model_id = 0;
  std::uint64_t backward_epoch = 0;
};

template <typename T>
class BasicSegmentationModel {
 public:
  using Tensor = BasicTensor<T>;
  using Parameter = BasicParameter<T>;
  using ForwardResult = BasicForwardResult<T>;

  /// He-initialised conv kernels, zero biases. Channel i of the classifier
  /// predicts channel_classes[i].
  static BasicSegmentationModel build(std::vector<ClassId> channel_classes, const ArchConfig& arch, std::uint64_t seed);
  static BasicSegmentationModel build(std::size_t num_classes, const ArchConfig& arch, std::uint64_t seed);

  BasicSegmentationModel(const BasicSegmentationModel& other);
  BasicSegmentationModel& operator=(const BasicSegmentationModel& other);
  BasicSegmentationModel(BasicSegmentationModel&& other) noexcept;
  BasicSegmentationModel& operator=(BasicSegmentationModel&& other) noexcept;
  ~BasicSegmentationModel() = default;

  ForwardResult forward(const Tensor& batch) const;

  /// Accumulates parameter gradients of non-frozen parameters. features_grad
  /// is an extra gradient injected at the encoder output.
  void backward(const ForwardResult& result, const Tensor& logits_grad, const Tensor* features_grad = nullptr);

  void freeze_encoder();
  void unfreeze_all();
  void zero_grad();

  /// Deep copy with every parameter frozen.
  BasicSegmentationModel snapshot() const;

  /// Appends one classifier channel per new class; existing channels keep
  /// their weights bit for bit.
  void grow_classifier(std::span<const ClassId> new_classes, std::uint64_t seed);

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;

  const ArchConfig& arch() const { return arch_; }
  std::size_t num_output_classes() const { return channel_classes_.size(); }
  const std::vector<ClassId>& channel_classes() const { return channel_classes_; }
  std::size_t step() const { return step_; }
  void set_step(std::size_t k) { step_ = k; }
  std::uint64_t id() const { return id_; }

  template <typename U>
  BasicSegmentationModel<U> cast() const;

  /// Values, names, flags and metadata equal (instance identity ignored).
  bool same_state(const BasicSegmentationModel& other) const;

 private:
  template <typename U>
  friend class BasicSegmentationModel;

  BasicSegmentationModel() = default;

  std::size_t classifier_weight_index() const { return params_.size() - 2; }

  ArchConfig arch_;
  std::vector<Parameter> params_;
  std::vector<ClassId> channel_classes_;
  std::size_t step_ = 0;
  std::uint64_t id_ = 0;
  std::uint64_t backward_epoch_ = 0;
};

using Parameter = BasicParameter<float>;
using ForwardResult = BasicForwardResult<float>;
using SegmentationModel = BasicSegmentationModel<float>;

template <typename T>
BasicTensor<T> pixelwise_softmax(const BasicTensor<T>& logits);

// Checkpoints ----------------------------------------------------------------

void save_checkpoint(const SegmentationModel& model, const std::filesystem::path& directory);
SegmentationModel load_checkpoint(const std::filesystem::path& directory);

// -- template definitions ----------------------------------------------------

std::uint64_t next_model_id();

template <typename T>
template <typename U>
BasicSegmentationModel<U> BasicSegmentationModel<T>::cast() const {
  BasicSegmentationModel<U> out;
  out.arch_ = arch_;
  out.channel_classes_ = channel_classes_;
  out.step_ = step_;
  out.id_ = next_model_id();
  for (const auto& p : params_) {
    out.params_.push_back({p.name, p.value.template cast<U>(), p.gradient.template cast<U>(), p.frozen, p.in_encoder});
  }
  return out;
}

}  // namespace ilss
