#include "ilss/network.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"
#include "ilss/errors.hpp"
#include "ilss/random.hpp"
#include "kernels.hpp"

namespace ilss {

std::uint64_t next_model_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

void ArchConfig::validate() const {
  if (input_channels == 0) throw ConfigError("arch: input_channels must be positive");
  if (encoder_channels.empty()) throw ConfigError("arch: encoder needs at least one block");
  for (const auto c : encoder_channels) {
    if (c == 0) throw ConfigError("arch: encoder channels must be positive");
  }
  if (decoder_channels == 0) throw ConfigError("arch: decoder_channels must be positive");
  if (encoder_channels.size() > 8) throw ConfigError("arch: at most 8 encoder blocks");
}

namespace {

template <typename T>
void he_init(BasicTensor<T>& weight, Rng& rng) {
  const std::size_t fan_in = weight.dim(1) * weight.dim(2) * weight.dim(3);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : weight.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
BasicParameter<T> make_param(std::string name, Shape shape, bool in_encoder) {
  BasicTensor<T> value(shape);
  BasicTensor<T> grad(std::move(shape));
  return {std::move(name), std::move(value), std::move(grad), false, in_encoder};
}

}  // namespace

template <typename T>
BasicSegmentationModel<T> BasicSegmentationModel<T>::build(std::vector<ClassId> channel_classes, const ArchConfig& arch,
                                                         std::uint64_t seed) {
  arch.validate();
  if (channel_classes.size() < 2) throw ConfigError("model needs at least 2 output classes");
  if (std::set<ClassId>(channel_classes.begin(), channel_classes.end()).size() != channel_classes.size()) {
    throw ConfigError("duplicate class id in model output channels");
  }
  BasicSegmentationModel model;
  model.arch_ = arch;
  model.channel_classes_ = std::move(channel_classes);
  model.id_ = next_model_id();

  Rng rng(derive_seed(seed, stream::kInit));
  std::size_t in = arch.input_channels;
  for (std::size_t i = 0; i < arch.encoder_channels.size(); ++i) {
    const std::size_t out = arch.encoder_channels[i];
    const std::string prefix = "encoder." + std::to_string(i) + ".";
    model.params_.push_back(make_param<T>(prefix + "weight", {out, in, 3, 3}, true));
    model.params_.push_back(make_param<T>(prefix + "bias", {out}, true));
    in = out;
  }
  model.params_.push_back(make_param<T>("decoder.conv.weight", {arch.decoder_channels, in, 3, 3}, false));
  model.params_.push_back(make_param<T>("decoder.conv.bias", {arch.decoder_channels}, false));
  model.params_.push_back(make_param<T>("decoder.classifier.weight",
                                        {model.channel_classes_.size(), arch.decoder_channels, 1, 1}, false));
  model.params_.push_back(make_param<T>("decoder.classifier.bias", {model.channel_classes_.size()}, false));
  for (auto& p : model.params_) {
    if (p.value.rank() == 4) he_init(p.value, rng);
  }
  return model;
}

template <typename T>
BasicSegmentationModel<T> BasicSegmentationModel<T>::build(std::size_t num_classes, const ArchConfig& arch,
                                                         std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("model needs at least 2 output classes, got " + std::to_string(num_classes));
  std::vector<ClassId> ids(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) ids[i] = static_cast<ClassId>(i);
  return build(std::move(ids), arch, seed);
}

template <typename T>
BasicSegmentationModel<T>::BasicSegmentationModel(const BasicSegmentationModel& other)
    : arch_(other.arch_),
      params_(other.params_),
      channel_classes_(other.channel_classes_),
      step_(other.step_),
      id_(next_model_id()) {}

template <typename T>
BasicSegmentationModel<T>& BasicSegmentationModel<T>::operator=(const BasicSegmentationModel& other) {
  if (this != &other) {
    arch_ = other.arch_;
    params_ = other.params_;
    channel_classes_ = other.channel_classes_;
    step_ = other.step_;
    id_ = next_model_id();
    backward_epoch_ = 0;
  }
  return *this;
}

template <typename T>
BasicSegmentationModel<T>::BasicSegmentationModel(BasicSegmentationModel&& other) noexcept = default;

template <typename T>
BasicSegmentationModel<T>& BasicSegmentationModel<T>::operator=(BasicSegmentationModel&& other) noexcept = default;

template <typename T>
auto BasicSegmentationModel<T>::forward(const Tensor& batch) const -> ForwardResult {
  const std::size_t factor = arch_.downsample_factor();
  if (batch.rank() != 4 || batch.dim(1) != arch_.input_channels) {
    throw ShapeError("forward: expected N x " + std::to_string(arch_.input_channels) + " x H x W input, got " +
                     shape_to_string(batch.shape()));
  }
  if (batch.dim(0) == 0 || batch.dim(2) == 0 || batch.dim(2) % factor != 0 || batch.dim(3) == 0 || batch.dim(3) % factor != 0) {
    throw ShapeError("forward: spatial size " + shape_to_string(batch.shape()) + " must be a positive multiple of " +
                     std::to_string(factor));
  }
  ForwardResult r;
  r.model_id = id_;
  r.backward_epoch = backward_epoch_;

  const std::size_t blocks = arch_.encoder_channels.size();
  Tensor x = batch;
  for (std::size_t i = 0; i < blocks; ++i) {
    Tensor a;
    kernels::conv2d_forward(x, params_[2 * i].value, params_[2 * i + 1].value, a);
    kernels::relu_inplace(a);
    r.block_inputs.push_back(std::move(x));
    x = kernels::avgpool2_forward(a);
    r.block_activations.push_back(std::move(a));
  }
  r.features = std::move(x);

  Tensor d;
  kernels::conv2d_forward(r.features, params_[2 * blocks].value, params_[2 * blocks + 1].value, d);
  kernels::relu_inplace(d);
  Tensor z;
  kernels::conv2d_forward(d, params_[2 * blocks + 2].value, params_[2 * blocks + 3].value, z);
  r.decoder_activation = std::move(d);
  r.logits = kernels::upsample_bilinear_forward(z, factor);
  return r;
}

template <typename T>
void BasicSegmentationModel<T>::backward(const ForwardResult& result, const Tensor& logits_grad, const Tensor* features_grad) {
  if (result.model_id != id_) throw StateError("backward: forward result belongs to a different model instance");
  if (result.backward_epoch != backward_epoch_) throw StateError("backward: forward result is stale (a backward pass ran since)");
  if (result.block_inputs.size() != arch_.encoder_channels.size()) throw StateError("backward: forward cache missing");
  if (logits_grad.shape() != result.logits.shape()) {
    throw ShapeError("backward: logits gradient " + shape_to_string(logits_grad.shape()) + " does not match logits " +
                     shape_to_string(result.logits.shape()));
  }
  if (features_grad && features_grad->shape() != result.features.shape()) {
    throw ShapeError("backward: features gradient " + shape_to_string(features_grad->shape()) + " does not match features " +
                     shape_to_string(result.features.shape()));
  }
  auto grad_of = [this](std::size_t idx) -> Tensor* { return params_[idx].frozen ? nullptr : &params_[idx].gradient; };

  const std::size_t blocks = arch_.encoder_channels.size();
  // Lowest block whose parameters still train; nothing below needs gradients.
  std::size_t lowest_trainable = blocks;
  for (std::size_t i = 0; i < blocks; ++i) {
    if (!params_[2 * i].frozen || !params_[2 * i + 1].frozen) {
      lowest_trainable = i;
      break;
    }
  }

  const Tensor gz = kernels::upsample_bilinear_backward(logits_grad, arch_.downsample_factor());
  Tensor gd;
  kernels::conv2d_backward(result.decoder_activation, params_[2 * blocks + 2].value, gz, grad_of(2 * blocks + 2),
                           grad_of(2 * blocks + 3), &gd);
  kernels::relu_backward_inplace(result.decoder_activation, gd);
  Tensor gx;
  kernels::conv2d_backward(result.features, params_[2 * blocks].value, gd, grad_of(2 * blocks), grad_of(2 * blocks + 1),
                           lowest_trainable < blocks ? &gx : nullptr);
  if (lowest_trainable < blocks && features_grad) {
    auto g = gx.data();
    auto f = features_grad->data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += f[i];
  }
  for (std::size_t i = blocks; i-- > lowest_trainable;) {
    Tensor ga = kernels::avgpool2_backward(gx, result.block_activations[i].shape());
    kernels::relu_backward_inplace(result.block_activations[i], ga);
    Tensor next;
    kernels::conv2d_backward(result.block_inputs[i], params_[2 * i].value, ga, grad_of(2 * i), grad_of(2 * i + 1),
                             i > lowest_trainable ? &next : nullptr);
    gx = std::move(next);
  }
  ++backward_epoch_;
}

template <typename T>
void BasicSegmentationModel<T>::freeze_encoder() {
  for (auto& p : params_) {
    if (p.in_encoder) p.frozen = true;
  }
}

template <typename T>
void BasicSegmentationModel<T>::unfreeze_all() {
  for (auto& p : params_) p.frozen = false;
}

template <typename T>
void BasicSegmentationModel<T>::zero_grad() {
  for (auto& p : params_) p.gradient.fill(T{});
}

template <typename T>
BasicSegmentationModel<T> BasicSegmentationModel<T>::snapshot() const {
  BasicSegmentationModel copy(*this);
  for (auto& p : copy.params_) p.frozen = true;
  return copy;
}

template <typename T>
void BasicSegmentationModel<T>::grow_classifier(std::span<const ClassId> new_classes, std::uint64_t seed) {
  if (new_classes.empty()) throw ConfigError("grow_classifier: need at least one new class");
  std::set<ClassId> ids(channel_classes_.begin(), channel_classes_.end());
  for (const auto c : new_classes) {
    if (!ids.insert(c).second) throw ConfigError("grow_classifier: class " + std::to_string(c) + " already has a channel");
  }
  auto& weight = params_[classifier_weight_index()];
  auto& bias = params_[classifier_weight_index() + 1];
  const std::size_t old_count = weight.value.dim(0);
  const std::size_t fan_in = weight.value.dim(1);
  const std::size_t new_count = old_count + new_classes.size();

  Rng rng(derive_seed(seed, stream::kGrow));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  auto grow = [&](BasicParameter<T>& p, bool random_rows) {
    const std::size_t row = p.value.size() / old_count;
    Shape shape = p.value.shape();
    shape[0] = new_count;
    auto values = p.value.storage();
    auto grads = p.gradient.storage();
    for (std::size_t i = 0; i < new_classes.size() * row; ++i) {
      values.push_back(random_rows ? static_cast<T>(dist(rng)) : T{});
      grads.push_back(T{});
    }
    p.value = BasicTensor<T>(shape, std::move(values));
    p.gradient = BasicTensor<T>(shape, std::move(grads));
  };
  grow(weight, true);
  grow(bias, false);
  channel_classes_.insert(channel_classes_.end(), new_classes.begin(), new_classes.end());
}

template <typename T>
auto BasicSegmentationModel<T>::parameter(std::string_view name) -> Parameter& {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ConfigError("no parameter named " + std::string(name));
}

template <typename T>
auto BasicSegmentationModel<T>::parameter(std::string_view name) const -> const Parameter& {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ConfigError("no parameter named " + std::string(name));
}

template <typename T>
bool BasicSegmentationModel<T>::same_state(const BasicSegmentationModel& other) const {
  if (arch_ != other.arch_ || channel_classes_ != other.channel_classes_ || step_ != other.step_ ||
      params_.size() != other.params_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.frozen != b.frozen || a.in_encoder != b.in_encoder || !(a.value == b.value)) return false;
  }
  return true;
}

template <typename T>
BasicTensor<T> pixelwise_softmax(const BasicTensor<T>& logits) {
  if (logits.rank() != 4) throw ShapeError("softmax expects N x C x H x W logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  BasicTensor<T> out(logits.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const T* in = &logits[b * c * hw];
    T* o = &out[b * c * hw];
    for (std::size_t p = 0; p < hw; ++p) {
      T max_v = in[p];
      for (std::size_t ch = 1; ch < c; ++ch) max_v = std::max(max_v, in[ch * hw + p]);
      T sum{};
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T e = std::exp(in[ch * hw + p] - max_v);
        o[ch * hw + p] = e;
        sum += e;
      }
      for (std::size_t ch = 0; ch < c; ++ch) o[ch * hw + p] /= sum;
    }
  }
  return out;
}

template class BasicSegmentationModel<float>;
template class BasicSegmentationModel<double>;
template BasicTensor<float> pixelwise_softmax(const BasicTensor<float>&);
template BasicTensor<double> pixelwise_softmax(const BasicTensor<double>&);

// Checkpoints ----------------------------------------------------------------

namespace {

constexpr int kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const SegmentationModel& model, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  nlohmann::json j;
  j["format"] = "ilss-checkpoint";
  j["version"] = kCheckpointVersion;
  j["arch"] = {{"input_channels", model.arch().input_channels},
               {"encoder_channels", model.arch().encoder_channels},
               {"decoder_channels", model.arch().decoder_channels}};
  j["num_output_classes"] = model.num_output_classes();
  j["step"] = model.step();
  j["seen_classes"] = model.channel_classes();
  j["parameters"] = nlohmann::json::array();
  std::vector<float> blob;
  for (const auto& p : model.parameters()) {
    j["parameters"].push_back({{"name", p.name},
                               {"shape", p.value.shape()},
                               {"offset", blob.size()},
                               {"count", p.value.size()},
                               {"frozen", p.frozen}});
    blob.insert(blob.end(), p.value.data().begin(), p.value.data().end());
  }
  const auto bytes = detail::encode_f32(blob);
  if (!detail::write_file(directory / "weights.bin", bytes)) throw FormatError("cannot write " + (directory / "weights.bin").string());
  std::ofstream out(directory / "model.json");
  if (!out) throw FormatError("cannot write " + (directory / "model.json").string());
  out << j.dump(2) << '\n';
}

SegmentationModel load_checkpoint(const std::filesystem::path& directory) {
  std::vector<char> text;
  if (!detail::read_file(directory / "model.json", text)) throw FormatError("missing model.json in " + directory.string());
  std::vector<char> bytes;
  if (!detail::read_file(directory / "weights.bin", bytes)) throw FormatError("missing weights.bin in " + directory.string());
  try {
    const auto j = nlohmann::json::parse(text.begin(), text.end());
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw VersionError("unsupported checkpoint version " + j.at("version").dump());
    }
    ArchConfig arch;
    arch.input_channels = j.at("arch").at("input_channels").get<std::size_t>();
    arch.encoder_channels = j.at("arch").at("encoder_channels").get<std::vector<std::size_t>>();
    arch.decoder_channels = j.at("arch").at("decoder_channels").get<std::size_t>();
    auto classes = j.at("seen_classes").get<std::vector<ClassId>>();
    if (classes.size() != j.at("num_output_classes").get<std::size_t>()) {
      throw FormatError("checkpoint: seen_classes does not match num_output_classes");
    }
    auto model = SegmentationModel::build(std::move(classes), arch, 0);
    model.set_step(j.at("step").get<std::size_t>());
    const auto& entries = j.at("parameters");
    if (entries.size() != model.parameters().size()) throw FormatError("checkpoint: parameter count mismatch");
    if (bytes.size() % 4 != 0) throw FormatError("checkpoint: weights.bin size is not a multiple of 4");
    std::vector<float> blob(bytes.size() / 4);
    detail::decode_f32(bytes, blob);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& p = model.parameters()[i];
      const auto& e = entries[i];
      if (e.at("name").get<std::string>() != p.name || e.at("shape").get<Shape>() != p.value.shape()) {
        throw FormatError("checkpoint: parameter " + std::to_string(i) + " (" + e.at("name").get<std::string>() +
                          ") does not match the architecture");
      }
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (count != p.value.size() || offset + count > blob.size()) {
        throw FormatError("checkpoint: parameter " + p.name + " lies outside weights.bin");
      }
      std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(offset), count, p.value.data().begin());
      p.frozen = e.value("frozen", false);
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed model.json in " + directory.string() + ": " + e.what());
  }
}

}  // namespace ilss
