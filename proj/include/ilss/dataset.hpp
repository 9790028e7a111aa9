#pragma once

#include <bitset>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ilss/taxonomy.hpp"
#include "ilss/tensor.hpp"

namespace ilss {

/// One image with its dense label map. The image is C x H x W with values in
/// [0, 1]; the label map is H x W holding class ids or kIgnoreLabel.
struct SegSample {
  std::string id;
  Tensor image;
  std::vector<std::uint8_t> label;

  std::size_t channels() const { return image.dim(0); }
  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }

  friend bool operator==(const SegSample&, const SegSample&) = default;
};

enum class Split { Train, Val };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct DatasetPool {
  Split split = Split::Train;
  std::vector<SegSample> samples;

  std::size_t size() const { return samples.size(); }
  friend bool operator==(const DatasetPool&, const DatasetPool&) = default;
};

using LabelPresence = std::bitset<256>;

/// Which label values occur in the sample, kIgnoreLabel included.
LabelPresence label_presence(const SegSample& sample);

/// Throws ShapeError / LabelError when the SegSample invariants do not hold.
/// With a plan, every non-ignore label must be one of its classes.
void validate_sample(const SegSample& sample, const IncrementalPlan* plan = nullptr);
void validate_pool(const DatasetPool& pool, const IncrementalPlan* plan = nullptr);

/// The subset of a pool used to train step k. Holds a non-owning pointer to
/// the pool, which must outlive it.
struct StepTrainingSet {
  std::size_t step = 0;
  std::vector<std::size_t> indices;
  std::vector<std::string> ids;
  const DatasetPool* pool = nullptr;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
};

StepTrainingSet filter_initial_training_set(const DatasetPool& pool, const IncrementalPlan& plan);

StepTrainingSet filter_step_training_set(const DatasetPool& pool, const IncrementalPlan& plan,
                                         std::size_t k, const std::set<std::string>& used_ids);

/// Pixel count per class over the set, with an entry (possibly zero) for
/// every id below num_classes. Ignore pixels are not counted.
std::map<ClassId, std::uint64_t> class_histogram(const StepTrainingSet& set, std::size_t num_classes);

/// Stacks the selected samples into an N x C x H x W batch plus labels.
std::pair<Tensor, LabelBatch> make_batch(const DatasetPool& pool, std::span<const std::size_t> indices);

// Synthetic shapes dataset ---------------------------------------------------

struct ShapesConfig {
  std::size_t num_classes = 6;  // background included
  std::size_t image_size = 32;
  std::size_t num_train = 200;
  std::size_t num_val = 50;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 2;
  double companion_probability = 0.5;
  std::uint64_t seed = 0;
};

/// Number of distinct shape families, i.e. the largest supported number of
/// foreground classes.
std::size_t num_shape_families();
std::string_view shape_family_name(ClassId class_id);

/// The class designated to co-occur with `class_id`, or kBackgroundClass if
/// there is none (two-class datasets).
ClassId shape_companion(ClassId class_id, std::size_t num_classes);

std::pair<DatasetPool, DatasetPool> generate_shapes_dataset(const ShapesConfig& config);

/// Default plan for a generated dataset: every class but the last in S0,
/// the last class added at step 1.
IncrementalPlan default_shapes_plan(std::size_t num_classes);

// On-disk format ------------------------------------------------------------

void save_pool(const DatasetPool& pool, const std::filesystem::path& directory);
DatasetPool load_pool(const std::filesystem::path& directory);

}  // namespace ilss
