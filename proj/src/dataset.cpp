#include "ilss/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "ilss/errors.hpp"
#include "ilss/random.hpp"

namespace ilss {

std::string_view split_name(Split split) { return split == Split::Train ? "train" : "val"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  throw FormatError("unknown split '" + std::string(name) + "'");
}

LabelPresence label_presence(const SegSample& sample) {
  LabelPresence present;
  for (const auto v : sample.label) present.set(v);
  return present;
}

void validate_sample(const SegSample& sample, const IncrementalPlan* plan) {
  if (sample.image.rank() != 3) {
    throw ShapeError("sample " + sample.id + ": image must be C x H x W, got " + shape_to_string(sample.image.shape()));
  }
  if (sample.label.size() != sample.height() * sample.width()) {
    throw ShapeError("sample " + sample.id + ": label map has " + std::to_string(sample.label.size()) +
                     " entries, image is " + shape_to_string(sample.image.shape()));
  }
  if (plan == nullptr) return;
  const auto present = label_presence(sample);
  for (std::size_t v = 0; v < kIgnoreLabel; ++v) {
    if (present.test(v) && !plan->has_class(static_cast<ClassId>(v))) {
      throw LabelError("sample " + sample.id + ": label " + std::to_string(v) + " is not a class of the plan");
    }
  }
}

void validate_pool(const DatasetPool& pool, const IncrementalPlan* plan) {
  std::set<std::string> ids;
  for (const auto& s : pool.samples) {
    validate_sample(s, plan);
    if (!ids.insert(s.id).second) throw DataError("duplicate sample id " + s.id);
  }
}

namespace {

LabelPresence to_presence(const ClassSet& classes) {
  LabelPresence p;
  for (const auto c : classes) p.set(static_cast<std::size_t>(c));
  return p;
}

StepTrainingSet make_set(std::size_t k, const DatasetPool& pool) {
  StepTrainingSet set;
  set.step = k;
  set.pool = &pool;
  return set;
}

void add_to_set(StepTrainingSet& set, std::size_t index) {
  set.indices.push_back(index);
  set.ids.push_back(set.pool->samples[index].id);
}

}  // namespace

StepTrainingSet filter_initial_training_set(const DatasetPool& pool, const IncrementalPlan& plan) {
  LabelPresence allowed = to_presence(plan.step_set(0));
  allowed.set(kIgnoreLabel);
  auto set = make_set(0, pool);
  for (std::size_t i = 0; i < pool.samples.size(); ++i) {
    const auto present = label_presence(pool.samples[i]);
    if ((present & ~allowed).none()) add_to_set(set, i);
  }
  if (set.empty()) throw EmptySplitError("no training sample contains only S0 classes");
  return set;
}

StepTrainingSet filter_step_training_set(const DatasetPool& pool, const IncrementalPlan& plan,
                                         std::size_t k, const std::set<std::string>& used_ids) {
  const LabelPresence added = to_presence(unseen_classes(plan, k));
  LabelPresence allowed = to_presence(seen_classes(plan, k));
  allowed.set(kIgnoreLabel);
  auto set = make_set(k, pool);
  for (std::size_t i = 0; i < pool.samples.size(); ++i) {
    const auto& sample = pool.samples[i];
    if (used_ids.contains(sample.id)) continue;
    const auto present = label_presence(sample);
    if ((present & added).any() && (present & ~allowed).none()) add_to_set(set, i);
  }
  if (set.empty()) throw EmptySplitError("no unused training sample contains a class added at step " + std::to_string(k));
  return set;
}

std::map<ClassId, std::uint64_t> class_histogram(const StepTrainingSet& set, std::size_t num_classes) {
  if (set.empty() || set.pool == nullptr) throw EmptySplitError("class histogram of an empty training set");
  std::array<std::uint64_t, 256> counts{};
  for (const auto i : set.indices) {
    for (const auto v : set.pool->samples[i].label) ++counts[v];
  }
  std::map<ClassId, std::uint64_t> out;
  for (std::size_t c = 0; c < num_classes; ++c) out[static_cast<ClassId>(c)] = 0;
  for (std::size_t c = 0; c < kIgnoreLabel; ++c) {
    if (counts[c] > 0) out[static_cast<ClassId>(c)] = counts[c];
  }
  return out;
}

std::pair<Tensor, LabelBatch> make_batch(const DatasetPool& pool, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("empty batch");
  const auto& first = pool.samples.at(indices.front());
  const std::size_t c = first.channels(), h = first.height(), w = first.width();
  Tensor images({indices.size(), c, h, w});
  LabelBatch labels{indices.size(), h, w, std::vector<std::uint8_t>(indices.size() * h * w)};
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& s = pool.samples.at(indices[n]);
    if (s.channels() != c || s.height() != h || s.width() != w) {
      throw ShapeError("sample " + s.id + " has shape " + shape_to_string(s.image.shape()) +
                       ", batch expects " + shape_to_string({c, h, w}));
    }
    std::copy(s.image.data().begin(), s.image.data().end(), images.data().begin() + static_cast<std::ptrdiff_t>(n * c * h * w));
    std::copy(s.label.begin(), s.label.end(), labels.values.begin() + static_cast<std::ptrdiff_t>(n * h * w));
  }
  return {std::move(images), std::move(labels)};
}

// Synthetic shapes -----------------------------------------------------------

namespace {

enum class Family { Circle, Square, Triangle, Cross, Ring, Bar, Diamond, Frame, Pillar, Dome };

constexpr std::array<std::string_view, 10> kFamilyNames = {
    "circle", "square", "triangle", "cross", "ring", "bar", "diamond", "frame", "pillar", "dome"};

// Consecutive classes share a hue so that shape, not colour alone, separates them.
constexpr std::array<std::array<float, 3>, 5> kHues = {{
    {0.95f, 0.30f, 0.25f},
    {0.30f, 0.90f, 0.35f},
    {0.30f, 0.45f, 0.95f},
    {0.95f, 0.85f, 0.30f},
    {0.85f, 0.35f, 0.90f},
}};

bool inside(Family family, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double d = std::hypot(dx, dy);
  switch (family) {
    case Family::Circle: return d < r;
    case Family::Square: return ax < 0.85 * r && ay < 0.85 * r;
    case Family::Triangle: return dy > -r && dy < r && ax < 0.5 * (dy + r);
    case Family::Cross: return (ax < r / 3 && ay < r) || (ay < r / 3 && ax < r);
    case Family::Ring: return d < r && d > 0.55 * r;
    case Family::Bar: return ax < r && ay < 0.35 * r;
    case Family::Diamond: return ax + ay < r;
    case Family::Frame: return ax < r && ay < r && (ax > 0.55 * r || ay > 0.55 * r);
    case Family::Pillar: return ax < 0.35 * r && ay < r;
    case Family::Dome: return d < r && dy < 0.2 * r;
  }
  return false;
}

struct Canvas {
  std::size_t size;
  Tensor image;
  std::vector<std::uint8_t> label;
};

void draw_shape(Canvas& canvas, ClassId cls, Rng& rng) {
  const double size = static_cast<double>(canvas.size);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double r = size * (0.12 + 0.10 * unit(rng));
  const double cx = r + (size - 2 * r) * unit(rng);
  const double cy = r + (size - 2 * r) * unit(rng);
  const auto family = static_cast<Family>(cls - 1);
  const auto& hue = kHues[static_cast<std::size_t>(cls - 1) / 2 % kHues.size()];
  const double intensity = 0.7 + 0.3 * unit(rng);
  std::array<float, 3> colour{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double jitter = 0.2 * unit(rng) - 0.1;
    colour[ch] = static_cast<float>(std::clamp(hue[ch] * intensity + jitter, 0.0, 1.0));
  }
  const std::size_t n = canvas.size;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      if (!inside(family, dx, dy, r)) continue;
      canvas.label[y * n + x] = static_cast<std::uint8_t>(cls);
      for (std::size_t ch = 0; ch < 3; ++ch) canvas.image[(ch * n + y) * n + x] = colour[ch];
    }
  }
}

SegSample make_image(const ShapesConfig& cfg, const std::string& id, ClassId primary, Rng& rng) {
  const std::size_t n = cfg.image_size;
  Canvas canvas{n, Tensor({3, n, n}), std::vector<std::uint8_t>(n * n, 0)};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double level = 0.2 * unit(rng);
  for (auto& v : canvas.image.data()) v = static_cast<float>(level + 0.06 * unit(rng));

  const auto num_foreground = static_cast<ClassId>(cfg.num_classes - 1);
  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_shapes, cfg.max_shapes);
  const std::size_t count = count_dist(rng);

  // Painted back to front; the primary shape goes last so it stays visible.
  std::vector<ClassId> order;
  const ClassId companion = shape_companion(primary, cfg.num_classes);
  if (count >= 2 && companion != kBackgroundClass && unit(rng) < cfg.companion_probability) order.push_back(companion);
  std::uniform_int_distribution<ClassId> class_dist(1, num_foreground);
  while (order.size() + 1 < count) order.insert(order.begin(), class_dist(rng));
  order.push_back(primary);
  for (const auto cls : order) draw_shape(canvas, cls, rng);
  return SegSample{id, std::move(canvas.image), std::move(canvas.label)};
}

DatasetPool make_pool(const ShapesConfig& cfg, Split split, std::size_t count, Rng& rng) {
  DatasetPool pool;
  pool.split = split;
  const auto num_foreground = cfg.num_classes - 1;
  for (std::size_t i = 0; i < count; ++i) {
    std::ostringstream id;
    id << split_name(split) << '_';
    id.width(5);
    id.fill('0');
    id << i;
    const auto primary = static_cast<ClassId>(1 + i % num_foreground);
    pool.samples.push_back(make_image(cfg, id.str(), primary, rng));
  }
  return pool;
}

}  // namespace

std::size_t num_shape_families() { return kFamilyNames.size(); }

std::string_view shape_family_name(ClassId class_id) {
  if (class_id == kBackgroundClass) return "background";
  if (class_id < 1 || static_cast<std::size_t>(class_id) > kFamilyNames.size()) {
    throw ConfigError("no shape family for class " + std::to_string(class_id));
  }
  return kFamilyNames[static_cast<std::size_t>(class_id - 1)];
}

ClassId shape_companion(ClassId class_id, std::size_t num_classes) {
  if (num_classes < 3 || class_id < 1) return kBackgroundClass;
  return class_id == 1 ? 2 : class_id - 1;
}

std::pair<DatasetPool, DatasetPool> generate_shapes_dataset(const ShapesConfig& config) {
  if (config.num_classes < 2) throw ConfigError("shapes dataset needs at least 2 classes (background + 1 shape)");
  if (config.num_classes - 1 > num_shape_families()) {
    throw ConfigError("shapes dataset supports at most " + std::to_string(num_shape_families() + 1) + " classes");
  }
  if (config.image_size < 16) throw ConfigError("image size must be at least 16");
  if (config.min_shapes < 1 || config.max_shapes < config.min_shapes) {
    throw ConfigError("invalid shapes-per-image range");
  }
  if (config.companion_probability < 0.0 || config.companion_probability > 1.0) {
    throw ConfigError("companion probability must lie in [0, 1]");
  }
  Rng train_rng(derive_seed(config.seed, stream::kTrainImages));
  Rng val_rng(derive_seed(config.seed, stream::kValImages));
  return {make_pool(config, Split::Train, config.num_train, train_rng),
          make_pool(config, Split::Val, config.num_val, val_rng)};
}

IncrementalPlan default_shapes_plan(std::size_t num_classes) {
  if (num_classes < 2) throw ConfigError("need at least one foreground class");
  PlanDraft draft;
  std::vector<ClassId> initial;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto id = static_cast<ClassId>(c);
    draft.classes.push_back({id, std::string(shape_family_name(id)), id == kBackgroundClass});
    if (c + 1 < num_classes) initial.push_back(id);
  }
  draft.step_sets = {initial, {static_cast<ClassId>(num_classes - 1)}};
  return IncrementalPlan::create(std::move(draft));
}

// Storage --------------------------------------------------------------------

namespace {

constexpr std::string_view kPoolFormatVersion = "1";

}  // namespace

void save_pool(const DatasetPool& pool, const std::filesystem::path& directory) {
  validate_pool(pool);
  std::filesystem::create_directories(directory);
  nlohmann::json manifest{{"version", kPoolFormatVersion}, {"split", split_name(pool.split)}};
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : pool.samples) {
    const std::string image_file = s.id + ".f32";
    const std::string label_file = s.id + ".u8";
    const auto bytes = detail::encode_f32(s.image.data());
    if (!detail::write_file(directory / image_file, bytes)) throw FormatError("cannot write " + (directory / image_file).string());
    std::span<const char> label_bytes(reinterpret_cast<const char*>(s.label.data()), s.label.size());
    if (!detail::write_file(directory / label_file, label_bytes)) throw FormatError("cannot write " + (directory / label_file).string());
    manifest["samples"].push_back({{"id", s.id}, {"image", image_file}, {"label", label_file},
                                   {"h", s.height()}, {"w", s.width()}, {"c", s.channels()}});
  }
  std::ofstream out(directory / "manifest.json");
  if (!out) throw FormatError("cannot write manifest in " + directory.string());
  out << manifest.dump(2) << '\n';
}

DatasetPool load_pool(const std::filesystem::path& directory) {
  std::vector<char> text;
  if (!detail::read_file(directory / "manifest.json", text)) {
    throw FormatError("missing manifest.json in " + directory.string());
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in " + directory.string() + ": " + e.what());
  }
  DatasetPool pool;
  try {
    const auto version = manifest.at("version").get<std::string>();
    if (version != kPoolFormatVersion) {
      throw VersionError("unsupported dataset manifest version '" + version + "' (expected '1')");
    }
    pool.split = parse_split(manifest.at("split").get<std::string>());
    std::set<std::string> seen_ids;
    for (const auto& entry : manifest.at("samples")) {
      SegSample s;
      s.id = entry.at("id").get<std::string>();
      if (!seen_ids.insert(s.id).second) throw FormatError("duplicate sample id " + s.id);
      const auto h = entry.at("h").get<std::size_t>();
      const auto w = entry.at("w").get<std::size_t>();
      const auto c = entry.at("c").get<std::size_t>();
      std::vector<char> bytes;
      const auto image_path = directory / entry.at("image").get<std::string>();
      if (!detail::read_file(image_path, bytes)) throw FormatError("sample " + s.id + ": cannot read " + image_path.string());
      if (bytes.size() != c * h * w * 4) {
        throw FormatError("sample " + s.id + ": image file has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(c * h * w * 4));
      }
      s.image = Tensor({c, h, w});
      detail::decode_f32(bytes, s.image.data());
      const auto label_path = directory / entry.at("label").get<std::string>();
      if (!detail::read_file(label_path, bytes)) throw FormatError("sample " + s.id + ": cannot read " + label_path.string());
      if (bytes.size() != h * w) {
        throw FormatError("sample " + s.id + ": label file has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(h * w));
      }
      s.label.assign(bytes.begin(), bytes.end());
      pool.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in " + directory.string() + ": " + e.what());
  }
  return pool;
}

}  // namespace ilss
