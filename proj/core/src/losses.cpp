#include "evq/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "evq/error.hpp"

namespace evq {

PairBatch mine_pairs(const Tensor& embeddings, std::span<const int> labels) {
  const std::size_t n = embeddings.rows();
  const std::size_t d = embeddings.cols();
  if (labels.size() != n) {
    throw Error(ErrorKind::kDimension,
                std::to_string(labels.size()) + " labels for " + std::to_string(n) + " embeddings");
  }
  if (n < 2) throw Error(ErrorKind::kDegenerateBatch, "pair mining needs at least two embeddings");
  const auto E = embeddings.data();
  PairBatch out;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += E[i * d + c] * E[j * d + c];
      if (labels[i] == labels[j]) {
        out.pos.push_back(dot);
        out.pos_pairs.push_back({i, j});
      } else {
        out.neg.push_back(dot);
        out.neg_pairs.push_back({i, j});
      }
    }
  }
  if (out.neg.empty()) throw Error(ErrorKind::kDegenerateBatch, "batch has no negative pairs");
  return out;
}

void EkdConfig::validate() const {
  if (lambda_pos < 0.0 || lambda_neg < 0.0) throw Error(ErrorKind::kConfig, "EKD weights must be non-negative");
  if (fpr_targets.empty()) throw Error(ErrorKind::kConfig, "EKD needs at least one FPR target");
  for (std::size_t k = 0; k < fpr_targets.size(); ++k) {
    if (!(fpr_targets[k] > 0.0 && fpr_targets[k] < 1.0) || (k > 0 && !(fpr_targets[k] < fpr_targets[k - 1]))) {
      throw Error(ErrorKind::kConfig, "EKD FPR targets must be strictly descending in (0, 1)");
    }
  }
}

void ArcFaceConfig::validate() const {
  if (!(margin >= 0.0 && margin < std::numbers::pi / 2)) {
    throw Error(ErrorKind::kConfig, "ArcFace margin must lie in [0, pi/2)");
  }
  if (!(scale > 0.0)) throw Error(ErrorKind::kConfig, "ArcFace scale must be positive");
}

void to_json(nlohmann::json& j, const EkdConfig& c) {
  j = nlohmann::json{{"lambda1", c.lambda_pos},
                     {"lambda2", c.lambda_neg},
                     {"fpr_targets", c.fpr_targets},
                     {"include_classifier", c.include_classifier}};
}

void from_json(const nlohmann::json& j, EkdConfig& c) {
  c.lambda_pos = j.value("lambda1", c.lambda_pos);
  c.lambda_neg = j.value("lambda2", c.lambda_neg);
  c.fpr_targets = j.value("fpr_targets", c.fpr_targets);
  c.include_classifier = j.value("include_classifier", c.include_classifier);
}

void to_json(nlohmann::json& j, const ArcFaceConfig& c) {
  j = nlohmann::json{{"margin", c.margin}, {"scale", c.scale}, {"class_count", c.class_count}};
}

void from_json(const nlohmann::json& j, ArcFaceConfig& c) {
  c.margin = j.value("margin", c.margin);
  c.scale = j.value("scale", c.scale);
  c.class_count = j.value("class_count", c.class_count);
}

namespace {

void require_same_embeddings(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::kDimension, std::string(op) + ": teacher " + shape_string(a.shape()) +
                                           " and student " + shape_string(b.shape()) + " differ");
  }
}

// Squared-hinge mean over (threshold, pair) of the threshold-relative gap
// between teacher and student. `positive` selects
//   (u_T − t_T) − (u_S − t_S)   for positive pairs, or
//   (v_S − t_S) − (v_T − t_T)   for negative pairs.
// Each parenthesis is evaluated the same way for both networks so the gap is
// exactly zero when student and teacher coincide.
Tensor hinge_term(const Tensor& sim_matrix, std::size_t n, std::span<const PairIndex> pairs,
                  std::span<const double> teacher_sims, const ThresholdSet& t_thr, const ThresholdSet& s_thr,
                  bool positive) {
  const std::size_t K = t_thr.thresholds.size();
  const std::size_t P = pairs.size();
  std::vector<std::size_t> idx;
  idx.reserve(K * P);
  for (std::size_t k = 0; k < K; ++k)
    for (const auto& p : pairs) idx.push_back(p.first * n + p.second);
  const Tensor student_sims = gather(sim_matrix, std::move(idx));
  const auto S = student_sims.data();

  std::vector<double> gap(K * P);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t p = 0; p < P; ++p) {
      const double teacher_rel = teacher_sims[p] - t_thr.thresholds[k];
      const double student_rel = S[k * P + p] - s_thr.thresholds[k];
      gap[k * P + p] = positive ? teacher_rel - student_rel : student_rel - teacher_rel;
    }
  }
  const double slope = positive ? -1.0 : 1.0;
  Tensor diff = Tensor::make_result({K * P}, std::move(gap), {student_sims},
                                    [slope](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                                      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += slope * g[i];
                                    });
  Tensor h = relu(diff);
  return mean(mul(h, h));
}

}  // namespace

Tensor ekd_loss(const Tensor& teacher_emb, const Tensor& student_emb, std::span<const int> labels,
                const EkdConfig& cfg) {
  cfg.validate();
  require_same_embeddings(teacher_emb, student_emb, "ekd_loss");
  const std::size_t n = student_emb.rows();

  const Tensor teacher = teacher_emb.detach();
  const PairBatch t_pairs = mine_pairs(teacher, labels);
  const PairBatch s_pairs = mine_pairs(student_emb, labels);
  const ThresholdSet t_thr = compute_thresholds(t_pairs.neg, cfg.fpr_targets);
  const ThresholdSet s_thr = compute_thresholds(s_pairs.neg, cfg.fpr_targets);

  const Tensor sim = matmul(student_emb, transpose(student_emb));
  Tensor loss = Tensor::scalar(0.0);

  if (!t_pairs.pos.empty() && cfg.lambda_pos > 0.0) {
    Tensor pos = hinge_term(sim, n, s_pairs.pos_pairs, t_pairs.pos, t_thr, s_thr, /*positive=*/true);
    loss = add(loss, scale(pos, cfg.lambda_pos));
  }
  if (cfg.lambda_neg > 0.0) {
    Tensor neg = hinge_term(sim, n, s_pairs.neg_pairs, t_pairs.neg, t_thr, s_thr, /*positive=*/false);
    loss = add(loss, scale(neg, cfg.lambda_neg));
  }
  if (!loss.requires_grad() && student_emb.requires_grad()) {
    // Keep the loss attached to the student so backward() is well defined.
    loss = add(loss, scale(sum(student_emb), 0.0));
  }
  return loss;
}

Tensor ekd_loss_with_ce(const Tensor& teacher_emb, const Tensor& student_emb, std::span<const int> labels,
                        const Tensor& cosines, const EkdConfig& cfg, const ArcFaceConfig& arc) {
  Tensor ce = softmax_cross_entropy(arcface_logits(cosines, labels, arc), labels);
  return add(ekd_loss(teacher_emb, student_emb, labels, cfg), ce);
}

Tensor feature_kd_loss(const Tensor& teacher_emb, const Tensor& student_emb) {
  require_same_embeddings(teacher_emb, student_emb, "feature_kd_loss");
  Tensor diff = sub(student_emb, teacher_emb.detach());
  return mean(mul(diff, diff));
}

Tensor arcface_logits(const Tensor& cosines, std::span<const int> labels, const ArcFaceConfig& cfg) {
  cfg.validate();
  const std::size_t n = cosines.rows(), c = cosines.cols();
  if (labels.size() != n) {
    throw Error(ErrorKind::kDimension, std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error(ErrorKind::kLabel, "label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  const double cos_m = std::cos(cfg.margin);
  const double sin_m = std::sin(cfg.margin);
  const double s = cfg.scale;
  const auto C = cosines.data();
  std::vector<double> out(C.begin(), C.end());
  std::vector<double> target_slope(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = i * c + static_cast<std::size_t>(labels[i]);
    const double x = std::clamp(C[at], -1.0, 1.0);
    if (x <= -cos_m) {  // θ + m ≥ π
      out[at] = x - cfg.margin * sin_m;
      target_slope[i] = 1.0;
    } else {
      const double sine = std::sqrt(std::max(1.0 - x * x, 0.0));
      out[at] = x * cos_m - sine * sin_m;
      target_slope[i] = cos_m + x * sin_m / std::max(sine, 1e-12);
    }
  }
  for (auto& v : out) v *= s;
  std::vector<int> ys(labels.begin(), labels.end());
  return Tensor::make_result(
      {n, c}, std::move(out), {cosines},
      [ys = std::move(ys), slope = std::move(target_slope), n, c, s](std::span<const double> g,
                                                                     std::span<std::vector<double>* const> gin) {
        auto& gc = *gin[0];
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double d = static_cast<std::size_t>(ys[i]) == j ? slope[i] : 1.0;
            gc[i * c + j] += g[i * c + j] * s * d;
          }
        }
      });
}

Tensor arcface_loss(const Tensor& embeddings, const Tensor& class_weights, std::span<const int> labels,
                    const ArcFaceConfig& cfg) {
  if (embeddings.cols() != class_weights.cols()) {
    throw Error(ErrorKind::kDimension, "arcface_loss: embeddings " + shape_string(embeddings.shape()) +
                                           " vs class weights " + shape_string(class_weights.shape()));
  }
  Tensor cosines = matmul(embeddings, transpose(class_weights));
  return softmax_cross_entropy(arcface_logits(cosines, labels, cfg), labels);
}

}  // namespace evq
