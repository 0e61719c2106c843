#pragma once

// Teacher training, compression (post-training quantization or channel
// pruning), distillation fine-tuning and evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evq/checkpoint.hpp"
#include "evq/dataset.hpp"
#include "evq/losses.hpp"
#include "evq/metrics.hpp"
#include "evq/model.hpp"
#include "evq/quantization.hpp"

namespace evq {

enum class LossKind { kArcface, kFeatureKd, kEkd, kEkdCe };
enum class OptimizerKind { kSgd, kMomentum };

std::string to_string(LossKind kind);
LossKind parse_loss(const std::string& name);
std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 0.001;
  std::size_t epochs = 1;
  std::size_t embedding_dim = 64;
  std::vector<std::size_t> hidden_dims = {128, 128};
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double momentum = 0.9;  // used by kMomentum only
  double weight_decay = 0.0;
  std::size_t identity_group = 0;  // see make_grouped_batches; 0 = plain shuffle
  LossKind loss = LossKind::kEkd;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  std::vector<double> fpr_targets = default_fpr_targets();
  double margin = 0.4;
  double scale = 64.0;
  std::uint64_t seed = 1;

  void validate() const;
  EkdConfig ekd() const;
  ArcFaceConfig arcface(std::size_t classes) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// SGD with optional heavy-ball momentum and L2 decay:
/// g ← g + wd·p, v ← μv + g, p ← p − lr·v.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, double momentum, double weight_decay = 0.0);
  /// Applies one update from the accumulated grads, then zeroes them.
  void step(std::vector<Tensor>& params);

 private:
  OptimizerKind kind_;
  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct StepInfo {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
};
using StepCallback = std::function<void(const StepInfo&)>;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;  // mean batch loss per epoch
  std::size_t steps = 0;
};

/// Embedding MLP plus margin classifier trained from scratch on `data`.
/// Requires cfg.loss == kArcface; throws kTraining on a non-finite loss.
TrainResult train_teacher(const Dataset& data, const TrainConfig& cfg, const StepCallback& on_step = {});

/// The network being fine-tuned: quantized or pruned copy of the teacher,
/// the teacher's classifier head (used only by kEkdCe) and the pruning mask
/// when channels were removed.
struct Student {
  QuantizedModel model;
  std::optional<ArcFaceHead> head;
  std::optional<PruneMask> prune_mask;
};

/// Copies the teacher, calibrates weight quantizers on its weights and
/// activation quantizers on `calib` (post-training quantization).
Student make_quantized_student(const Checkpoint& teacher, int w_bits, int a_bits, const Dataset& calib,
                               std::size_t calib_batch_size = 64);

struct PruneSpec {
  double sparsity = 0.2;
  std::vector<std::size_t> layers;  // hidden layers in scope; empty = all

  void validate() const;
};

struct PruneResult {
  EmbeddingNet net;
  PruneMask kept;  // per hidden layer, ascending original indices
};

/// Keeps the ceil((1 − sp)·C) channels of each in-scope hidden layer with the
/// largest outgoing-weight L2 norm (ties to the lower index) and removes the
/// matching weight columns, bias entries and downstream rows.
PruneResult prune_channels(const EmbeddingNet& net, const PruneSpec& spec);

Student make_pruned_student(const Checkpoint& teacher, const PruneSpec& spec);

Checkpoint student_checkpoint(const Student& student, Provenance provenance);
Student student_from_checkpoint(const Checkpoint& c);

struct FinetuneResult {
  Student student;
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;
  std::size_t steps = 0;
};

/// Distills the frozen teacher into `student` on `data`. Weight quantizers
/// are re-derived from the live weights before every step and activation
/// quantizers stay frozen; gradients reach the weights through the
/// straight-through estimator. Batches with fewer than two samples, or with
/// no cross-identity pair for the pair-based losses, are skipped.
FinetuneResult finetune_student(const Checkpoint& teacher, Student student, const Dataset& data,
                                const TrainConfig& cfg, const StepCallback& on_step = {});

struct EvalConfig {
  std::size_t n_pos = 2000;
  std::size_t n_neg = 20000;
  std::vector<double> fpr_targets = {1e-2, 1e-3, 1e-4};
  int folds = 10;
  std::size_t templates_per_id = 1;
  std::uint64_t seed = 11;
  bool include_roc = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

/// L2-normalized embeddings of every row of `data`, [n x embedding_dim].
std::vector<double> embed(const QuantizedModel& model, const Dataset& data);

ScoredPairs score_pairs(const QuantizedModel& model, const Dataset& data, const std::vector<EvalPair>& pairs);

/// Scores `pairs`, computes k-fold accuracy, TPR at each target FPR and the
/// size accounting for the checkpoint's weight bit-width.
VerificationReport evaluate(const Checkpoint& model, const Dataset& eval_data, const std::vector<EvalPair>& pairs,
                            const EvalConfig& cfg, const std::string& label);

}  // namespace evq
