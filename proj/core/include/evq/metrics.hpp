#pragma once

// Offline verification protocols: ROC, TPR at a target FPR with
// order-statistic thresholds, and k-fold verification accuracy.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace evq {

/// a·b / (‖a‖‖b‖) clamped to [-1, 1]. Throws kDegenerateVector on a zero vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Elementwise mean of `features`, L2-normalized. A zero mean is returned as
/// is; scoring it later raises kDegenerateVector.
std::vector<double> template_embedding(std::span<const std::span<const double>> features);

struct ScoredPairs {
  std::vector<double> pos;
  std::vector<double> neg;
  std::string dataset_id;
  std::string model_id;
};

struct TprAtFpr {
  double target = 0.0;
  double threshold = 0.0;
  double tpr = 0.0;
  double achieved_fpr = 0.0;
};

TprAtFpr tpr_at_fpr(const ScoredPairs& sp, double target);

struct RocPoint {
  double fpr;
  double tpr;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

/// One point per distinct score used as a threshold, plus (0, 0) for an
/// infinite threshold and (1, 1); consecutive duplicates collapsed.
std::vector<RocPoint> roc_curve(const ScoredPairs& sp);
void write_roc_csv(std::ostream& os, std::span<const RocPoint> roc);

struct KFoldAccuracy {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over folds
};

/// Verification accuracy with the threshold picked on the other k−1 folds.
/// Positives and negatives are shuffled by `seed` and dealt round-robin into
/// folds. Candidate thresholds are −∞, +∞ and the midpoints between
/// consecutive distinct training scores; ties go to the lowest threshold.
KFoldAccuracy kfold_accuracy(const ScoredPairs& sp, int k, std::uint64_t seed);

struct VerificationReport {
  std::string model;
  double accuracy = 0.0;
  double accuracy_std = 0.0;
  std::vector<TprAtFpr> tpr_at;
  std::vector<RocPoint> roc;
  double model_size_mb = 0.0;
  std::uint64_t param_count = 0;
  std::uint64_t train_images = 0;
  int w_bits = 32;
  int a_bits = 32;

  /// TPR at the given target, or throws kContract when not evaluated.
  double tpr(double target) const;
};

void to_json(nlohmann::json& j, const VerificationReport& r);
void from_json(const nlohmann::json& j, VerificationReport& r);

}  // namespace evq
