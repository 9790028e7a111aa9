#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace ilss {

/// Finite-difference verification of the loss gradients and of their
/// composition with the model's backward pass.
struct GradCheckOptions {
  double eps = 1e-3;
  double tolerance = 1e-3;
  // Parameter elements whose +-eps perturbation flips a ReLU are skipped;
  // the check fails if more than this fraction of them is skipped.
  double max_skipped_fraction = 0.05;
  bool double_precision = true;
  std::set<std::string> losses{"ce", "out", "feat", "total"};
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  std::string loss;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // kink crossings
  std::string worst;  // "<tensor>[<index>]" of the largest error
  bool passed = false;
};

/// |a - n| / max(|a|, |n|); pairs that are both below 1e-10 count as equal.
double relative_error(double analytic, double numeric);

/// Central differences on a 2-class 8x8 model (and its one-class-grown
/// copy for the distillation terms). The forward passes run in 64-bit
/// unless double_precision is false.
std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& options);

}  // namespace ilss
