#pragma once

// Training objectives: angular-margin classification, feature-matching
// distillation, and evaluation-oriented distillation that aligns
// threshold-relative pair similarities of a student with its teacher.

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "evq/tensor.hpp"
#include "evq/thresholds.hpp"

namespace evq {

struct PairIndex {
  std::size_t first;
  std::size_t second;
};

/// Within-batch similarities split by label equality.
struct PairBatch {
  std::vector<double> pos;  // u
  std::vector<double> neg;  // v
  std::vector<PairIndex> pos_pairs;
  std::vector<PairIndex> neg_pairs;
};

/// Scores every unordered pair (i < j) of L2-normalized rows by dot product.
/// Throws kDegenerateBatch for fewer than two rows or no negative pair.
PairBatch mine_pairs(const Tensor& embeddings, std::span<const int> labels);

struct EkdConfig {
  double lambda_pos = 1.0;
  double lambda_neg = 1.0;
  std::vector<double> fpr_targets = default_fpr_targets();
  bool include_classifier = false;

  void validate() const;
};

struct ArcFaceConfig {
  double margin = 0.4;  // radians
  double scale = 64.0;
  std::size_t class_count = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const EkdConfig& c);
void from_json(const nlohmann::json& j, EkdConfig& c);
void to_json(nlohmann::json& j, const ArcFaceConfig& c);
void from_json(const nlohmann::json& j, ArcFaceConfig& c);

/// λ1·L_pos + λ2·L_neg. Both embedding sets must be L2-normalized; the
/// teacher side is treated as a constant. For every threshold k,
///   L_pos averages [(u_T − t_k(T)) − (u_S − t_k(S))]₊²  over positive pairs,
///   L_neg averages [(v_S − t_k(S)) − (v_T − t_k(T))]₊²  over negative pairs,
/// so only a student that is worse than the teacher at a threshold is
/// penalized. Thresholds come from each network's own negatives and carry
/// no gradient.
Tensor ekd_loss(const Tensor& teacher_emb, const Tensor& student_emb, std::span<const int> labels,
                const EkdConfig& cfg);

/// ekd_loss plus the margin classification loss on `cosines` [n x classes]
/// (student embeddings against normalized class weights).
Tensor ekd_loss_with_ce(const Tensor& teacher_emb, const Tensor& student_emb, std::span<const int> labels,
                        const Tensor& cosines, const EkdConfig& cfg, const ArcFaceConfig& arc);

/// Mean squared error over all elements; the teacher is a constant.
Tensor feature_kd_loss(const Tensor& teacher_emb, const Tensor& student_emb);

/// Replaces every target cosine c = cos θ_y by cos(θ_y + m), or by
/// c − m·sin(m) once θ_y + m ≥ π, then multiplies all logits by the scale.
Tensor arcface_logits(const Tensor& cosines, std::span<const int> labels, const ArcFaceConfig& cfg);

/// Softmax cross-entropy over arcface_logits(embeddings · class_weightsᵀ).
/// Both inputs must have L2-normalized rows.
Tensor arcface_loss(const Tensor& embeddings, const Tensor& class_weights, std::span<const int> labels,
                    const ArcFaceConfig& cfg);

}  // namespace evq
