#pragma once

// Order-statistic threshold selection shared by the training losses and the
// offline verification metrics. Scores count as accepted when strictly above
// the threshold.

#include <span>
#include <vector>

namespace evq {

struct ThresholdSet {
  std::vector<double> fpr_targets;  // strictly descending, each in (0, 1)
  std::vector<double> thresholds;   // non-decreasing
};

/// FPR targets 1e-1, 1e-2, ..., 1e-6.
std::vector<double> default_fpr_targets();

/// With negatives sorted descending as v(1) >= ... >= v(M), a target f selects
/// t = v(j+1) for j = floor(M f), clamped to v(M).
ThresholdSet compute_thresholds(std::span<const double> neg_scores, std::span<const double> fpr_targets);

/// Single-target form over scores already sorted in descending order.
double threshold_from_sorted(std::span<const double> sorted_desc, double fpr_target);

/// Fraction of `scores` strictly above `threshold`.
double rate_above(std::span<const double> scores, double threshold);

}  // namespace evq
