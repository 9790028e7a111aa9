#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "ilss/metrics.hpp"
#include "ilss/random.hpp"

namespace ilss::testing {

/// Metrics recomputed pixel by pixel from the raw maps, without a confusion
/// matrix.
struct OracleMetrics {
  std::map<ClassId, double> iou;
  double miou = 0.0;
  double mpa = 0.0;
  double mca = 0.0;
};

inline OracleMetrics brute_force_metrics(const std::vector<ClassId>& classes,
                                         const std::vector<std::vector<std::uint8_t>>& preds,
                                         const std::vector<std::vector<std::uint8_t>>& gts) {
  OracleMetrics m;
  std::uint64_t correct = 0;
  std::uint64_t scored = 0;
  double iou_sum = 0.0;
  double recall_sum = 0.0;
  std::size_t recall_n = 0;
  for (const auto c : classes) {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t s = 0; s < preds.size(); ++s) {
      for (std::size_t i = 0; i < preds[s].size(); ++i) {
        if (gts[s][i] == kIgnoreLabel) continue;
        const bool is_gt = gts[s][i] == c;
        const bool is_pred = preds[s][i] == c;
        tp += is_gt && is_pred;
        fp += !is_gt && is_pred;
        fn += is_gt && !is_pred;
      }
    }
    if (tp + fp + fn == 0) continue;
    m.iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    iou_sum += m.iou[c];
    if (tp + fn > 0) {
      recall_sum += static_cast<double>(tp) / static_cast<double>(tp + fn);
      ++recall_n;
    }
  }
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (std::size_t i = 0; i < preds[s].size(); ++i) {
      if (gts[s][i] == kIgnoreLabel) continue;
      ++scored;
      correct += preds[s][i] == gts[s][i];
    }
  }
  m.miou = m.iou.empty() ? 0.0 : iou_sum / static_cast<double>(m.iou.size());
  m.mpa = scored == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(scored);
  m.mca = recall_n == 0 ? 0.0 : recall_sum / static_cast<double>(recall_n);
  return m;
}

/// Random label map over `classes` with about 10% ignore pixels.
inline std::vector<std::uint8_t> random_label_map(Rng& rng, const std::vector<ClassId>& classes, std::size_t pixels,
                                                  bool with_ignore) {
  std::uniform_int_distribution<std::size_t> pick(0, classes.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::uint8_t> out(pixels);
  for (auto& v : out) {
    v = with_ignore && unit(rng) < 0.1 ? kIgnoreLabel : static_cast<std::uint8_t>(classes[pick(rng)]);
  }
  return out;
}

}  // namespace ilss::testing
