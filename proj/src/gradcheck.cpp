#include "ilss/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "ilss/errors.hpp"
#include "ilss/losses.hpp"
#include "ilss/network.hpp"
#include "ilss/random.hpp"

namespace ilss {

double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-10) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

namespace {

constexpr std::size_t kSide = 8;
constexpr std::size_t kBatch = 2;

ArchConfig tiny_arch() {
  ArchConfig arch;
  arch.input_channels = 3;
  arch.encoder_channels = {4, 4, 6};
  arch.decoder_channels = 5;
  return arch;
}

template <typename T>
struct Fixture {
  BasicSegmentationModel<T> teacher;  // 2 classes
  BasicSegmentationModel<T> student;  // teacher + 1 class, perturbed
  BasicTensor<T> input;
  LabelBatch labels2;  // labels over {0, 1}
  LabelBatch labels3;  // labels over {0, 1, 2}
};

template <typename T>
Fixture<T> make_fixture(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.2);

  auto base = SegmentationModel::build(2, tiny_arch(), seed);
  // Non-zero biases so every code path carries gradient.
  for (auto& p : base.parameters()) {
    if (p.value.rank() == 1) {
      for (auto& v : p.value.data()) v = static_cast<float>(noise(rng));
    }
  }
  auto teacher = base.template cast<T>();
  auto student = base.template cast<T>();
  const std::vector<ClassId> added{2};
  student.grow_classifier(added, seed + 1);
  for (auto& p : student.parameters()) {
    for (auto& v : p.value.data()) v += static_cast<T>(noise(rng));
  }

  BasicTensor<T> input({kBatch, 3, kSide, kSide});
  for (auto& v : input.data()) v = static_cast<T>(unit(rng));

  auto make_labels = [&](int classes) {
    LabelBatch l{kBatch, kSide, kSide, std::vector<std::uint8_t>(kBatch * kSide * kSide)};
    std::uniform_int_distribution<int> cls(0, classes - 1);
    for (auto& v : l.values) v = unit(rng) < 0.1 ? kIgnoreLabel : static_cast<std::uint8_t>(cls(rng));
    return l;
  };
  auto labels2 = make_labels(2);
  auto labels3 = make_labels(3);
  return {std::move(teacher), std::move(student), std::move(input), std::move(labels2), std::move(labels3)};
}

template <typename T>
void track(GradCheckResult& r, double analytic, double numeric, const std::string& where) {
  const double e = relative_error(analytic, numeric);
  ++r.checked;
  if (r.worst.empty() || e > r.max_rel_error) {
    r.max_rel_error = e;
    r.worst = where;
  }
}

/// Checks d loss / d input for a loss of one tensor.
template <typename T>
void check_tensor_gradient(GradCheckResult& r, BasicTensor<T> x, const BasicTensor<T>& analytic,
                           const std::function<double(const BasicTensor<T>&)>& loss, double eps, const std::string& name) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = static_cast<T>(saved + eps);
    const double plus = loss(x);
    x[i] = static_cast<T>(saved - eps);
    const double minus = loss(x);
    x[i] = saved;
    track<T>(r, static_cast<double>(analytic[i]), (plus - minus) / (2.0 * eps), name + "[" + std::to_string(i) + "]");
  }
}

template <typename T>
std::vector<bool> relu_pattern(const BasicForwardResult<T>& f) {
  std::vector<bool> out;
  for (const auto& a : f.block_activations) {
    for (const T v : a.data()) out.push_back(v > T{});
  }
  for (const T v : f.decoder_activation.data()) out.push_back(v > T{});
  return out;
}

template <typename T>
using LossOfForward = std::function<BasicLossValue<T>(const BasicForwardResult<T>&)>;

/// Checks every trainable parameter of `model`. Perturbations that flip a
/// ReLU on or off straddle a kink, where the central difference does not
/// estimate the derivative; those elements are counted as skipped.
template <typename T>
void check_parameters(GradCheckResult& r, BasicSegmentationModel<T>& model, const BasicTensor<T>& input,
                      const LossOfForward<T>& loss, double eps) {
  const auto base = model.forward(input);
  const auto pattern = relu_pattern(base);
  const auto value = loss(base);
  const auto logits_grad = value.gradients.find(kLogitsGrad);
  const auto features_grad = value.gradients.find(kFeaturesGrad);
  const BasicTensor<T> zero_logits(base.logits.shape());
  model.zero_grad();
  model.backward(base, logits_grad == value.gradients.end() ? zero_logits : logits_grad->second,
                 features_grad == value.gradients.end() ? nullptr : &features_grad->second);

  for (auto& p : model.parameters()) {
    if (p.frozen) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T saved = p.value[i];
      p.value[i] = static_cast<T>(saved + eps);
      const auto fp = model.forward(input);
      p.value[i] = static_cast<T>(saved - eps);
      const auto fm = model.forward(input);
      p.value[i] = saved;
      if (relu_pattern(fp) != pattern || relu_pattern(fm) != pattern) {
        ++r.skipped;
        continue;
      }
      const double numeric = (loss(fp).value - loss(fm).value) / (2.0 * eps);
      track<T>(r, static_cast<double>(p.gradient[i]), numeric, p.name + "[" + std::to_string(i) + "]");
    }
  }
}

template <typename T>
std::vector<GradCheckResult> run_typed(const GradCheckOptions& options) {
  auto fx = make_fixture<T>(options.seed);
  const double eps = options.eps;
  const std::vector<ClassId> two{0, 1};
  const std::vector<ClassId> three{0, 1, 2};
  const auto teacher_out = fx.teacher.forward(fx.input);
  std::vector<GradCheckResult> results;

  auto start = [&](const char* name) {
    GradCheckResult r;
    r.loss = name;
    return r;
  };

  if (options.losses.contains("ce")) {
    auto r = start("ce");
    const LossOfForward<T> loss = [&](const BasicForwardResult<T>& f) { return cross_entropy(f.logits, fx.labels2, two); };
    const auto base = fx.teacher.forward(fx.input);
    check_tensor_gradient<T>(r, base.logits, loss(base).gradients.at(kLogitsGrad),
                             [&](const BasicTensor<T>& z) { return cross_entropy(z, fx.labels2, two).value; }, eps, "logits");
    check_parameters<T>(r, fx.teacher, fx.input, loss, eps);
    results.push_back(r);
  }

  if (options.losses.contains("out")) {
    auto r = start("out");
    const LossOfForward<T> loss = [&](const BasicForwardResult<T>& f) {
      return output_distillation(f.logits, teacher_out.logits, two);
    };
    const auto base = fx.student.forward(fx.input);
    check_tensor_gradient<T>(r, base.logits, loss(base).gradients.at(kLogitsGrad),
                             [&](const BasicTensor<T>& z) { return output_distillation(z, teacher_out.logits, two).value; },
                             eps, "student_logits");
    check_parameters<T>(r, fx.student, fx.input, loss, eps);
    results.push_back(r);
  }

  if (options.losses.contains("feat")) {
    auto r = start("feat");
    const LossOfForward<T> loss = [&](const BasicForwardResult<T>& f) {
      return feature_distillation(f.features, teacher_out.features);
    };
    const auto base = fx.student.forward(fx.input);
    check_tensor_gradient<T>(r, base.features, loss(base).gradients.at(kFeaturesGrad),
                             [&](const BasicTensor<T>& f) { return feature_distillation(f, teacher_out.features).value; }, eps,
                             "student_features");
    check_parameters<T>(r, fx.student, fx.input, loss, eps);
    results.push_back(r);
  }

  if (options.losses.contains("total")) {
    auto r = start("total");
    const LossConfig config{0.7, true, true, false};
    const LossOfForward<T> loss = [&](const BasicForwardResult<T>& f) {
      BasicLossComponents<T> c;
      c.cross_entropy = cross_entropy(f.logits, fx.labels3, three);
      c.output_distill = output_distillation(f.logits, teacher_out.logits, two);
      c.feature_distill = feature_distillation(f.features, teacher_out.features);
      return total_loss(config, c);
    };
    check_parameters<T>(r, fx.student, fx.input, loss, eps);
    results.push_back(r);
  }

  for (auto& r : results) {
    const auto considered = r.checked + r.skipped;
    r.passed = r.checked > 0 && r.max_rel_error < options.tolerance &&
               static_cast<double>(r.skipped) <= options.max_skipped_fraction * static_cast<double>(considered);
  }
  return results;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ConfigError("gradcheck: eps must be positive");
  for (const auto& name : options.losses) {
    if (name != "ce" && name != "out" && name != "feat" && name != "total") {
      throw ConfigError("gradcheck: unknown loss '" + name + "' (expected ce, out, feat or total)");
    }
  }
  return options.double_precision ? run_typed<double>(options) : run_typed<float>(options);
}

}  // namespace ilss
