#include "evq/thresholds.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "evq/error.hpp"

namespace evq {

std::vector<double> default_fpr_targets() { return {1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6}; }

double threshold_from_sorted(std::span<const double> sorted_desc, double fpr_target) {
  if (sorted_desc.empty()) throw Error(ErrorKind::kDegenerateBatch, "no negative scores to threshold");
  if (!(fpr_target > 0.0 && fpr_target < 1.0)) {
    throw Error(ErrorKind::kContract, "FPR target must lie in (0, 1)");
  }
  const auto m = sorted_desc.size();
  const auto j = static_cast<std::size_t>(std::floor(static_cast<double>(m) * fpr_target));
  return j + 1 <= m ? sorted_desc[j] : sorted_desc[m - 1];
}

ThresholdSet compute_thresholds(std::span<const double> neg_scores, std::span<const double> fpr_targets) {
  if (neg_scores.empty()) throw Error(ErrorKind::kDegenerateBatch, "no negative scores to threshold");
  for (std::size_t k = 1; k < fpr_targets.size(); ++k) {
    if (!(fpr_targets[k] < fpr_targets[k - 1])) {
      throw Error(ErrorKind::kContract, "FPR targets must be strictly descending");
    }
  }
  std::vector<double> sorted(neg_scores.begin(), neg_scores.end());
  std::stable_sort(sorted.begin(), sorted.end(), std::greater<>());
  ThresholdSet out;
  out.fpr_targets.assign(fpr_targets.begin(), fpr_targets.end());
  out.thresholds.reserve(fpr_targets.size());
  for (double f : fpr_targets) out.thresholds.push_back(threshold_from_sorted(sorted, f));
  return out;
}

double rate_above(std::span<const double> scores, double threshold) {
  if (scores.empty()) return 0.0;
  const auto n = std::count_if(scores.begin(), scores.end(), [threshold](double s) { return s > threshold; });
  return static_cast<double>(n) / static_cast<double>(scores.size());
}

}  // namespace evq
