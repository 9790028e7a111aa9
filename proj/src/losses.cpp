#include "ilss/losses.hpp"

#include <array>
#include <cmath>
#include <vector>

#include "ilss/errors.hpp"

namespace ilss {

void LossConfig::validate() const {
  if (!(lambda_d >= 0.0) || !std::isfinite(lambda_d)) throw ConfigError("lambda_D must be a finite non-negative number");
  if (encoder_frozen && use_feature_distill) {
    throw ConfigError(
        "feature distillation cannot be combined with a frozen encoder: the frozen student encoder "
        "is identical to the teacher encoder, so the feature term is constantly zero and has no effect");
  }
}

namespace {

void require_nchw(const auto& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string(what) + " must be N x C x H x W, got " + shape_to_string(t.shape()));
}

}  // namespace

template <typename T>
BasicLossValue<T> cross_entropy(const BasicTensor<T>& logits, const LabelBatch& labels,
                                std::span<const ClassId> channel_classes, std::uint8_t ignore_index) {
  require_nchw(logits, "cross_entropy logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3), hw = h * w;
  if (labels.batch != n || labels.height != h || labels.width != w || labels.values.size() != n * hw) {
    throw ShapeError("cross_entropy: labels " + shape_to_string({labels.batch, labels.height, labels.width}) +
                     " do not match logits " + shape_to_string(logits.shape()));
  }
  if (channel_classes.size() != c) {
    throw ShapeError("cross_entropy: " + std::to_string(c) + " logit channels for " + std::to_string(channel_classes.size()) +
                     " active classes");
  }
  std::array<int, 256> channel_of{};
  channel_of.fill(-1);
  for (std::size_t i = 0; i < c; ++i) channel_of[static_cast<std::size_t>(channel_classes[i])] = static_cast<int>(i);

  std::size_t valid = 0;
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    const auto v = labels.values[i];
    if (v == ignore_index) continue;
    if (channel_of[v] < 0) {
      const std::size_t b = i / hw, y = (i % hw) / w, x = i % w;
      throw LabelError("cross_entropy: pixel (" + std::to_string(b) + ", " + std::to_string(y) + ", " + std::to_string(x) +
                       ") has label " + std::to_string(v) + " outside the active classes");
    }
    ++valid;
  }

  BasicLossValue<T> out;
  BasicTensor<T> grad(logits.shape());
  if (valid == 0) {
    out.gradients.emplace(kLogitsGrad, std::move(grad));
    return out;
  }
  const double inv = 1.0 / static_cast<double>(valid);
  std::vector<double> prob(c);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const T* z = &logits[b * c * hw];
    T* g = &grad[b * c * hw];
    for (std::size_t p = 0; p < hw; ++p) {
      const auto v = labels.values[b * hw + p];
      if (v == ignore_index) continue;
      double max_v = z[p];
      for (std::size_t ch = 1; ch < c; ++ch) max_v = std::max(max_v, static_cast<double>(z[ch * hw + p]));
      double sum = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        prob[ch] = std::exp(static_cast<double>(z[ch * hw + p]) - max_v);
        sum += prob[ch];
      }
      const auto target = static_cast<std::size_t>(channel_of[v]);
      total += std::log(sum) - (static_cast<double>(z[target * hw + p]) - max_v);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double pc = prob[ch] / sum;
        g[ch * hw + p] = static_cast<T>((pc - (ch == target ? 1.0 : 0.0)) * inv);
      }
    }
  }
  out.value = total * inv;
  out.gradients.emplace(kLogitsGrad, std::move(grad));
  return out;
}

template <typename T>
BasicLossValue<T> output_distillation(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                                      std::span<const ClassId> old_classes) {
  require_nchw(student_logits, "output_distillation student logits");
  require_nchw(teacher_logits, "output_distillation teacher logits");
  const std::size_t n = student_logits.dim(0), cs = student_logits.dim(1), hw = student_logits.dim(2) * student_logits.dim(3);
  const std::size_t ct = teacher_logits.dim(1);
  if (teacher_logits.dim(0) != n || teacher_logits.dim(2) != student_logits.dim(2) || teacher_logits.dim(3) != student_logits.dim(3)) {
    throw ShapeError("output_distillation: teacher " + shape_to_string(teacher_logits.shape()) + " and student " +
                     shape_to_string(student_logits.shape()) + " differ in batch or spatial size");
  }
  if (ct != old_classes.size()) {
    throw ShapeError("output_distillation: teacher has " + std::to_string(ct) + " channels for " +
                     std::to_string(old_classes.size()) + " old classes");
  }
  if (cs < ct) {
    throw ShapeError("output_distillation: student has " + std::to_string(cs) + " channels, fewer than the teacher's " +
                     std::to_string(ct));
  }
  const double inv = 1.0 / static_cast<double>(n * hw);
  BasicTensor<T> grad(student_logits.shape());
  std::vector<double> teacher_prob(ct), student_prob(cs);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const T* zs = &student_logits[b * cs * hw];
    const T* zt = &teacher_logits[b * ct * hw];
    T* g = &grad[b * cs * hw];
    for (std::size_t p = 0; p < hw; ++p) {
      double tmax = zt[p];
      for (std::size_t ch = 1; ch < ct; ++ch) tmax = std::max(tmax, static_cast<double>(zt[ch * hw + p]));
      double tsum = 0.0;
      for (std::size_t ch = 0; ch < ct; ++ch) {
        teacher_prob[ch] = std::exp(static_cast<double>(zt[ch * hw + p]) - tmax);
        tsum += teacher_prob[ch];
      }
      double smax = zs[p];
      for (std::size_t ch = 1; ch < cs; ++ch) smax = std::max(smax, static_cast<double>(zs[ch * hw + p]));
      double ssum = 0.0;
      for (std::size_t ch = 0; ch < cs; ++ch) {
        student_prob[ch] = std::exp(static_cast<double>(zs[ch * hw + p]) - smax);
        ssum += student_prob[ch];
      }
      const double log_ssum = std::log(ssum);
      double mass = 0.0;
      for (std::size_t ch = 0; ch < ct; ++ch) {
        const double pt = teacher_prob[ch] / tsum;
        const double log_ps = static_cast<double>(zs[ch * hw + p]) - smax - log_ssum;
        total -= pt * log_ps;
        mass += pt;
        teacher_prob[ch] = pt;
      }
      // d/dz_j = mass * p_S[j] - p_T[j] (p_T[j] = 0 for new channels).
      for (std::size_t ch = 0; ch < cs; ++ch) {
        const double ps = student_prob[ch] / ssum;
        const double pt = ch < ct ? teacher_prob[ch] : 0.0;
        g[ch * hw + p] = static_cast<T>((mass * ps - pt) * inv);
      }
    }
  }
  BasicLossValue<T> out;
  out.value = total * inv;
  out.gradients.emplace(kLogitsGrad, std::move(grad));
  return out;
}

template <typename T>
BasicLossValue<T> feature_distillation(const BasicTensor<T>& student_features, const BasicTensor<T>& teacher_features) {
  if (student_features.shape() != teacher_features.shape() || student_features.rank() == 0) {
    throw ShapeError("feature_distillation: student " + shape_to_string(student_features.shape()) + " vs teacher " +
                     shape_to_string(teacher_features.shape()));
  }
  const std::size_t batch = student_features.dim(0);
  if (batch == 0) throw ShapeError("feature_distillation: empty batch");
  const double inv = 1.0 / static_cast<double>(batch);
  BasicTensor<T> grad(student_features.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < student_features.size(); ++i) {
    const double d = static_cast<double>(student_features[i]) - static_cast<double>(teacher_features[i]);
    total += d * d;
    grad[i] = static_cast<T>(2.0 * d * inv);
  }
  BasicLossValue<T> out;
  out.value = total * inv;
  out.gradients.emplace(kFeaturesGrad, std::move(grad));
  return out;
}

namespace {

template <typename T>
void add_scaled(std::map<std::string, BasicTensor<T>>& into, const std::map<std::string, BasicTensor<T>>& from, T scale) {
  for (const auto& [name, g] : from) {
    auto it = into.find(name);
    if (it == into.end()) {
      BasicTensor<T> scaled = g;
      for (auto& v : scaled.data()) v *= scale;
      into.emplace(name, std::move(scaled));
      continue;
    }
    if (it->second.shape() != g.shape()) throw ShapeError("total_loss: gradient shapes disagree for " + name);
    auto dst = it->second.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  }
}

}  // namespace

template <typename T>
BasicLossValue<T> total_loss(const LossConfig& config, const BasicLossComponents<T>& components) {
  config.validate();
  if (config.use_output_distill != components.output_distill.has_value()) {
    throw ConfigError("total_loss: output distillation term present/absent contrary to the loss config");
  }
  if (config.use_feature_distill != components.feature_distill.has_value()) {
    throw ConfigError("total_loss: feature distillation term present/absent contrary to the loss config");
  }
  BasicLossValue<T> out;
  out.gradients = components.cross_entropy.gradients;
  double distill = 0.0;
  const T lambda = static_cast<T>(config.lambda_d);
  if (components.output_distill) {
    distill += components.output_distill->value;
    add_scaled(out.gradients, components.output_distill->gradients, lambda);
  }
  if (components.feature_distill) {
    distill += components.feature_distill->value;
    add_scaled(out.gradients, components.feature_distill->gradients, lambda);
  }
  out.value = components.cross_entropy.value + config.lambda_d * distill;
  return out;
}

#define ILSS_INSTANTIATE_LOSSES(T)                                                                                    \
  template BasicLossValue<T> cross_entropy(const BasicTensor<T>&, const LabelBatch&, std::span<const ClassId>,        \
                                           std::uint8_t);                                                              \
  template BasicLossValue<T> output_distillation(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const ClassId>); \
  template BasicLossValue<T> feature_distillation(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicLossValue<T> total_loss(const LossConfig&, const BasicLossComponents<T>&);

ILSS_INSTANTIATE_LOSSES(float)
ILSS_INSTANTIATE_LOSSES(double)

#undef ILSS_INSTANTIATE_LOSSES

}  // namespace ilss
