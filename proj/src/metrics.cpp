#include "ilss/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ilss/errors.hpp"

namespace ilss {

ConfusionMatrix::ConfusionMatrix(std::vector<ClassId> classes) : classes_(std::move(classes)) {
  index_.fill(-1);
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    const auto id = classes_[i];
    if (id < 0 || id >= kIgnoreLabel) throw LabelError("confusion matrix: invalid class id " + std::to_string(id));
    if (index_[static_cast<std::size_t>(id)] >= 0) throw LabelError("confusion matrix: duplicate class id " + std::to_string(id));
    index_[static_cast<std::size_t>(id)] = static_cast<int>(i);
  }
  counts_.assign(classes_.size() * classes_.size(), 0);
}

bool ConfusionMatrix::has_class(ClassId id) const {
  return id >= 0 && id < 256 && index_[static_cast<std::size_t>(id)] >= 0;
}

std::size_t ConfusionMatrix::index_of(ClassId id) const {
  if (!has_class(id)) throw LabelError("class " + std::to_string(id) + " is not tracked by the confusion matrix");
  return static_cast<std::size_t>(index_[static_cast<std::size_t>(id)]);
}

std::uint64_t ConfusionMatrix::count(ClassId ground_truth, ClassId predicted) const {
  return counts_[index_of(ground_truth) * classes_.size() + index_of(predicted)];
}

std::uint64_t ConfusionMatrix::row_sum(ClassId ground_truth) const {
  const std::size_t r = index_of(ground_truth), n = classes_.size();
  return std::accumulate(counts_.begin() + static_cast<std::ptrdiff_t>(r * n),
                         counts_.begin() + static_cast<std::ptrdiff_t>((r + 1) * n), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::column_sum(ClassId predicted) const {
  const std::size_t c = index_of(predicted), n = classes_.size();
  std::uint64_t s = 0;
  for (std::size_t r = 0; r < n; ++r) s += counts_[r * n + c];
  return s;
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

void ConfusionMatrix::add(ClassId ground_truth, ClassId predicted, std::uint64_t n) {
  counts_[index_of(ground_truth) * classes_.size() + index_of(predicted)] += n;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("cannot merge confusion matrices over different classes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

void accumulate(ConfusionMatrix& cm, std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> ground_truth,
                std::uint8_t ignore_index) {
  if (predicted.size() != ground_truth.size()) {
    throw ShapeError("accumulate: prediction has " + std::to_string(predicted.size()) + " pixels, ground truth " +
                     std::to_string(ground_truth.size()));
  }
  // Validate first so a bad map leaves the matrix untouched.
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (ground_truth[i] == ignore_index) continue;
    if (!cm.has_class(ground_truth[i])) {
      throw LabelError("accumulate: ground-truth label " + std::to_string(ground_truth[i]) + " at pixel " + std::to_string(i) +
                       " is not an evaluated class");
    }
    if (!cm.has_class(predicted[i])) {
      throw LabelError("accumulate: predicted label " + std::to_string(predicted[i]) + " at pixel " + std::to_string(i) +
                       " is not an evaluated class");
    }
  }
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (ground_truth[i] != ignore_index) cm.add(ground_truth[i], predicted[i]);
  }
}

std::map<ClassId, double> iou_per_class(const ConfusionMatrix& cm) {
  std::map<ClassId, double> out;
  for (const auto c : cm.classes()) {
    const std::uint64_t tp = cm.count(c, c);
    const std::uint64_t fp = cm.column_sum(c) - tp;
    const std::uint64_t fn = cm.row_sum(c) - tp;
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    out[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

namespace {

std::optional<double> mean_over(const std::map<ClassId, double>& values, const ClassSet& subset) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [id, v] : values) {
    if (!subset.contains(id)) continue;
    sum += v;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace

MetricBundle summarize(const ConfusionMatrix& cm, const ClassSet& old_classes, const ClassSet& new_classes, std::size_t step) {
  for (const auto c : old_classes) {
    if (new_classes.contains(c)) throw PartitionError("class " + std::to_string(c) + " is both old and new");
  }
  for (const auto c : cm.classes()) {
    if (!old_classes.contains(c) && !new_classes.contains(c)) {
      throw PartitionError("evaluated class " + std::to_string(c) + " is neither old nor new");
    }
  }
  MetricBundle b;
  b.step = step;
  b.old_classes.assign(old_classes.begin(), old_classes.end());
  b.new_classes.assign(new_classes.begin(), new_classes.end());
  b.per_class_iou = iou_per_class(cm);

  double iou_sum = 0.0;
  for (const auto& [id, v] : b.per_class_iou) iou_sum += v;
  b.miou = b.per_class_iou.empty() ? 0.0 : iou_sum / static_cast<double>(b.per_class_iou.size());
  b.miou_old = mean_over(b.per_class_iou, old_classes);
  b.miou_new = mean_over(b.per_class_iou, new_classes);

  std::uint64_t correct = 0;
  double recall_sum = 0.0;
  std::size_t recall_n = 0;
  for (const auto c : cm.classes()) {
    correct += cm.count(c, c);
    if (!b.per_class_iou.contains(c)) continue;
    const auto row = cm.row_sum(c);
    if (row == 0) continue;
    const double recall = static_cast<double>(cm.count(c, c)) / static_cast<double>(row);
    b.per_class_recall[c] = recall;
    recall_sum += recall;
    ++recall_n;
  }
  const auto total = cm.total();
  b.mpa = total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  b.mca = recall_n == 0 ? 0.0 : recall_sum / static_cast<double>(recall_n);
  return b;
}

std::vector<std::uint8_t> predict_labels(const SegmentationModel& model, const Tensor& batch, const ClassSet& seen) {
  const auto& channels = model.channel_classes();
  std::vector<std::size_t> candidates;
  for (std::size_t ch = 0; ch < channels.size(); ++ch) {
    if (seen.contains(channels[ch])) candidates.push_back(ch);
  }
  if (candidates.empty()) throw ConfigError("none of the model's output channels belongs to the evaluated classes");
  // Ascending class id, so a strict '>' keeps the lowest id on ties.
  std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) { return channels[a] < channels[b]; });

  const auto result = model.forward(batch);
  const auto& logits = result.logits;
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(n * hw);
  for (std::size_t b = 0; b < n; ++b) {
    const float* z = &logits[b * c * hw];
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = candidates.front();
      for (const auto ch : candidates) {
        if (z[ch * hw + p] > z[best * hw + p]) best = ch;
      }
      out[b * hw + p] = static_cast<std::uint8_t>(channels[best]);
    }
  }
  return out;
}

std::pair<ConfusionMatrix, MetricBundle> evaluate_model(const SegmentationModel& model, const DatasetPool& pool,
                                                        const ClassSet& seen, const ClassSet& old_classes,
                                                        const ClassSet& new_classes, std::uint8_t ignore_index) {
  if (pool.samples.empty()) throw DataError("cannot evaluate on an empty pool");
  if (seen.size() > model.num_output_classes()) {
    throw ConfigError("model has " + std::to_string(model.num_output_classes()) + " outputs for " + std::to_string(seen.size()) +
                      " evaluated classes");
  }
  ConfusionMatrix cm(std::vector<ClassId>(seen.begin(), seen.end()));
  constexpr std::size_t kEvalBatch = 16;
  for (std::size_t start = 0; start < pool.samples.size(); start += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + kEvalBatch, pool.samples.size()); ++i) idx.push_back(i);
    auto [images, labels] = make_batch(pool, idx);
    const auto predicted = predict_labels(model, images, seen);
    for (auto& v : labels.values) {
      if (v != ignore_index && !seen.contains(v)) v = ignore_index;
    }
    accumulate(cm, predicted, labels.values, ignore_index);
  }
  auto bundle = summarize(cm, old_classes, new_classes, model.step());
  return {std::move(cm), std::move(bundle)};
}

std::pair<ConfusionMatrix, MetricBundle> evaluate_model(const SegmentationModel& model, const DatasetPool& pool,
                                                        const IncrementalPlan& plan, std::size_t k) {
  const auto seen = seen_classes(plan, k);
  if (k == 0) return evaluate_model(model, pool, seen, seen, {});
  return evaluate_model(model, pool, seen, seen_classes(plan, k - 1), unseen_classes(plan, k));
}

namespace {

nlohmann::json map_to_json(const std::map<ClassId, double>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, v] : m) j[std::to_string(id)] = v;
  return j;
}

std::map<ClassId, double> map_from_json(const nlohmann::json& j) {
  std::map<ClassId, double> m;
  for (const auto& [key, v] : j.items()) m[std::stoi(key)] = v.get<double>();
  return m;
}

}  // namespace

std::string bundle_to_json(const MetricBundle& b) {
  nlohmann::json j;
  j["step"] = b.step;
  j["per_class_iou"] = map_to_json(b.per_class_iou);
  j["per_class_recall"] = map_to_json(b.per_class_recall);
  j["miou"] = b.miou;
  j["miou_old"] = b.miou_old ? nlohmann::json(*b.miou_old) : nlohmann::json(nullptr);
  j["miou_new"] = b.miou_new ? nlohmann::json(*b.miou_new) : nlohmann::json(nullptr);
  j["mpa"] = b.mpa;
  j["mca"] = b.mca;
  j["old_classes"] = b.old_classes;
  j["new_classes"] = b.new_classes;
  return j.dump(2);
}

MetricBundle bundle_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricBundle b;
    b.step = j.at("step").get<std::size_t>();
    b.per_class_iou = map_from_json(j.at("per_class_iou"));
    b.per_class_recall = map_from_json(j.at("per_class_recall"));
    b.miou = j.at("miou").get<double>();
    if (!j.at("miou_old").is_null()) b.miou_old = j.at("miou_old").get<double>();
    if (!j.at("miou_new").is_null()) b.miou_new = j.at("miou_new").get<double>();
    b.mpa = j.at("mpa").get<double>();
    b.mca = j.at("mca").get<double>();
    b.old_classes = j.at("old_classes").get<std::vector<ClassId>>();
    b.new_classes = j.at("new_classes").get<std::vector<ClassId>>();
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metrics JSON: ") + e.what());
  }
}

std::string per_class_csv(const MetricBundle& b, const IncrementalPlan& plan) {
  std::ostringstream out;
  out.precision(6);
  out << "class_id,name,iou,recall,group\n";
  auto emit = [&](ClassId id, const char* group) {
    out << id << ',' << plan.class_name(id) << ',';
    if (auto it = b.per_class_iou.find(id); it != b.per_class_iou.end()) out << it->second;
    out << ',';
    if (auto it = b.per_class_recall.find(id); it != b.per_class_recall.end()) out << it->second;
    out << ',' << group << '\n';
  };
  for (const auto id : b.old_classes) emit(id, "old");
  for (const auto id : b.new_classes) emit(id, "new");
  return out.str();
}

}  // namespace ilss
