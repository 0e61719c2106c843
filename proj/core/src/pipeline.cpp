#include "evq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evq/error.hpp"
#include "evq/rng.hpp"

namespace evq {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kArcface: return "arcface";
    case LossKind::kFeatureKd: return "feature_kd";
    case LossKind::kEkd: return "ekd";
    case LossKind::kEkdCe: return "ekd_ce";
  }
  return "?";
}

LossKind parse_loss(const std::string& name) {
  if (name == "arcface") return LossKind::kArcface;
  if (name == "feature_kd") return LossKind::kFeatureKd;
  if (name == "ekd") return LossKind::kEkd;
  if (name == "ekd_ce") return LossKind::kEkdCe;
  throw Error(ErrorKind::kConfig, "unknown loss '" + name + "' (arcface, feature_kd, ekd, ekd_ce)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "momentum"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "momentum") return OptimizerKind::kMomentum;
  throw Error(ErrorKind::kConfig, "unknown optimizer '" + name + "' (sgd, momentum)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kConfig, msg); };
  if (batch_size < 4) fail("batch_size must be at least 4");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (epochs < 1) fail("epochs must be at least 1");
  if (embedding_dim < 1) fail("embedding_dim must be positive");
  for (auto h : hidden_dims)
    if (h < 2) fail("hidden widths must be at least 2");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  ekd().validate();
  arcface(1).validate();
}

EkdConfig TrainConfig::ekd() const {
  EkdConfig c;
  c.lambda_pos = lambda1;
  c.lambda_neg = lambda2;
  c.fpr_targets = fpr_targets;
  c.include_classifier = loss == LossKind::kEkdCe;
  return c;
}

ArcFaceConfig TrainConfig::arcface(std::size_t classes) const { return {margin, scale, classes}; }

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"epochs", c.epochs},
                     {"embedding_dim", c.embedding_dim},
                     {"hidden_dims", c.hidden_dims},
                     {"optimizer", to_string(c.optimizer)},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"identity_group", c.identity_group},
                     {"loss", to_string(c.loss)},
                     {"lambda1", c.lambda1},
                     {"lambda2", c.lambda2},
                     {"fpr_targets", c.fpr_targets},
                     {"margin", c.margin},
                     {"scale", c.scale},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.hidden_dims = j.value("hidden_dims", c.hidden_dims);
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.identity_group = j.value("identity_group", c.identity_group);
  if (j.contains("loss")) c.loss = parse_loss(j.at("loss").get<std::string>());
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.fpr_targets = j.value("fpr_targets", c.fpr_targets);
  c.margin = j.value("margin", c.margin);
  c.scale = j.value("scale", c.scale);
  c.seed = j.value("seed", c.seed);
}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, double momentum, double weight_decay)
    : kind_(kind), lr_(learning_rate), momentum_(momentum), weight_decay_(weight_decay) {}

void Optimizer::step(std::vector<Tensor>& params) {
  if (velocity_.size() != params.size()) {
    velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].numel(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto g = p.grad();
    auto values = p.mutable_data();
    auto& v = velocity_[i];
    const double mu = kind_ == OptimizerKind::kMomentum ? momentum_ : 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) {
      v[k] = mu * v[k] + g[k] + weight_decay_ * values[k];
      values[k] -= lr_ * v[k];
    }
    p.zero_grad();
  }
}

namespace {

void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw Error(ErrorKind::kTraining, "non-finite loss at step " + std::to_string(step));
  }
}

std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data.labels[i]);
  return out;
}

bool has_negative_pair(std::span<const int> labels) {
  return std::any_of(labels.begin(), labels.end(), [&](int y) { return y != labels.front(); });
}

std::size_t class_count(const Dataset& data) {
  const int max_label = *std::max_element(data.labels.begin(), data.labels.end());
  if (max_label < 0) throw Error(ErrorKind::kLabel, "negative identity label");
  return static_cast<std::size_t>(max_label) + 1;
}

}  // namespace

TrainResult train_teacher(const Dataset& data, const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (cfg.loss != LossKind::kArcface) {
    throw Error(ErrorKind::kContract, "teacher training uses the arcface loss, got " + to_string(cfg.loss));
  }
  if (data.size() == 0) throw Error(ErrorKind::kContract, "teacher training needs data");

  std::vector<std::size_t> widths{data.input_dim};
  widths.insert(widths.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
  widths.push_back(cfg.embedding_dim);
  EmbeddingNet net(widths, cfg.seed);
  const std::size_t classes = class_count(data);
  ArcFaceHead head = ArcFaceHead::random(classes, cfg.embedding_dim, cfg.seed);
  const ArcFaceConfig arc = cfg.arcface(classes);

  std::vector<Tensor> params = net.parameters();
  params.push_back(head.weight);
  Optimizer opt(cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.weight_decay);

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    std::size_t batches_run = 0;
    for (const auto& idx : make_grouped_batches(data.labels, cfg.batch_size, cfg.identity_group, derive_seed(cfg.seed, 0x7e, epoch))) {
      const auto labels = gather_labels(data, idx);
      Tensor emb = l2_normalize(net.forward(data.batch(idx)));
      Tensor loss = arcface_loss(emb, l2_normalize(head.weight), labels, arc);
      const double value = loss.item();
      check_finite(value, result.steps);
      loss.backward();
      opt.step(params);
      if (on_step) on_step({result.steps, epoch, value});
      ++result.steps;
      total += value;
      ++batches_run;
    }
    result.epoch_losses.push_back(total / static_cast<double>(std::max<std::size_t>(batches_run, 1)));
  }

  Provenance prov;
  prov.stage = "train_teacher";
  prov.config = cfg;
  prov.dataset_digest = data.digest();
  prov.steps = result.steps;
  prov.train_images = data.size();
  result.checkpoint = make_checkpoint(net, &head, std::move(prov));
  return result;
}

Student make_quantized_student(const Checkpoint& teacher, int w_bits, int a_bits, const Dataset& calib,
                               std::size_t calib_batch_size) {
  if (teacher.quant) throw Error(ErrorKind::kContract, "teacher checkpoint is already quantized");
  if (calib.size() == 0) throw Error(ErrorKind::kEmptyCalibration, "empty calibration set");
  std::vector<Tensor> batches;
  for (std::size_t start = 0; start < calib.size(); start += calib_batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(calib.size(), start + calib_batch_size); ++i) idx.push_back(i);
    batches.push_back(calib.batch(idx));
  }
  Student s;
  s.model = quantize_model(to_net(teacher, false), w_bits, a_bits, batches);
  s.head = to_head(teacher, true);
  s.prune_mask = teacher.prune_mask;
  return s;
}

void PruneSpec::validate() const {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw Error(ErrorKind::kSpec, "sparsity must lie in [0, 1)");
}

PruneResult prune_channels(const EmbeddingNet& net, const PruneSpec& spec) {
  spec.validate();
  const std::size_t hidden_layers = net.layer_count() - 1;
  for (auto l : spec.layers) {
    if (l >= hidden_layers) throw Error(ErrorKind::kSpec, "layer " + std::to_string(l) + " is not a hidden layer");
  }
  auto in_scope = [&spec](std::size_t l) {
    return spec.layers.empty() || std::find(spec.layers.begin(), spec.layers.end(), l) != spec.layers.end();
  };

  const auto& layers = net.layers();
  PruneResult out;
  for (std::size_t l = 0; l < hidden_layers; ++l) {
    const std::size_t channels = layers[l].weight.cols();
    std::vector<std::size_t> order(channels);
    std::iota(order.begin(), order.end(), 0);
    if (!in_scope(l) || spec.sparsity == 0.0) {
      out.kept.push_back(order);
      continue;
    }
    if (channels < 2) throw Error(ErrorKind::kSpec, "hidden layer " + std::to_string(l) + " has fewer than 2 channels");
    // Guard against (1 − sp)·C landing a hair above an integer.
    const auto keep = static_cast<std::size_t>(std::ceil((1.0 - spec.sparsity) * static_cast<double>(channels) - 1e-9));
    if (keep < 1) throw Error(ErrorKind::kSpec, "sparsity leaves no channel in layer " + std::to_string(l));
    const auto& next = layers[l + 1].weight;  // [channels x out]
    std::vector<double> norms(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t j = 0; j < next.cols(); ++j) norms[c] += next.at(c, j) * next.at(c, j);
      norms[c] = std::sqrt(norms[c]);
    }
    std::stable_sort(order.begin(), order.end(), [&norms](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
    order.resize(keep);
    std::sort(order.begin(), order.end());
    out.kept.push_back(std::move(order));
  }

  std::vector<Linear> pruned;
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    const auto& w = layers[l].weight;
    const auto& b = layers[l].bias;
    std::vector<std::size_t> rows(w.rows()), cols(w.cols());
    std::iota(rows.begin(), rows.end(), 0);
    std::iota(cols.begin(), cols.end(), 0);
    if (l > 0) rows = out.kept[l - 1];
    if (l < hidden_layers) cols = out.kept[l];
    std::vector<double> wv, bv;
    wv.reserve(rows.size() * cols.size());
    for (auto r : rows)
      for (auto c : cols) wv.push_back(w.at(r, c));
    for (auto c : cols) bv.push_back(b.data()[c]);
    pruned.push_back({Tensor::from({rows.size(), cols.size()}, std::move(wv), w.requires_grad()),
                      Tensor::from({cols.size()}, std::move(bv), b.requires_grad())});
  }
  out.net = EmbeddingNet(std::move(pruned));
  return out;
}

Student make_pruned_student(const Checkpoint& teacher, const PruneSpec& spec) {
  if (teacher.quant) throw Error(ErrorKind::kContract, "pruning expects an unquantized checkpoint");
  PruneResult pr = prune_channels(to_net(teacher, true), spec);
  Student s;
  s.model = QuantizedModel(std::move(pr.net), 32, 32);
  s.head = to_head(teacher, true);
  s.prune_mask = std::move(pr.kept);
  return s;
}

Checkpoint student_checkpoint(const Student& student, Provenance provenance) {
  const ArcFaceHead* head = student.head ? &*student.head : nullptr;
  Checkpoint c = make_checkpoint(student.model.net(), head, std::move(provenance));
  const auto& m = student.model;
  if (quantization_enabled(m.weight_bits()) || quantization_enabled(m.activation_bits())) {
    // Quantizers are re-derived from the stored (float32) weights so that the
    // checkpoint is self-consistent.
    QuantizedModel rounded(to_net(c, false), m.weight_bits(), m.activation_bits());
    c.quant = QuantState{m.weight_bits(), m.activation_bits(), rounded.weight_params(), m.activation_params()};
  }
  c.prune_mask = student.prune_mask;
  c.validate();
  return c;
}

Student student_from_checkpoint(const Checkpoint& c) {
  Student s;
  s.model = to_quantized_model(c, true);
  s.head = to_head(c, true);
  s.prune_mask = c.prune_mask;
  return s;
}

FinetuneResult finetune_student(const Checkpoint& teacher, Student student, const Dataset& data,
                                const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (cfg.loss == LossKind::kArcface) {
    throw Error(ErrorKind::kContract, "fine-tuning needs a distillation loss (feature_kd, ekd or ekd_ce)");
  }
  if (cfg.loss == LossKind::kEkdCe && !student.head) {
    throw Error(ErrorKind::kContract, "ekd_ce needs the teacher's classifier head");
  }
  const EmbeddingNet teacher_net = to_net(teacher, false);
  if (teacher_net.embedding_dim() != student.model.net().embedding_dim() ||
      teacher_net.input_dim() != student.model.net().input_dim()) {
    throw Error(ErrorKind::kCheckpoint, "student and teacher disagree on input or embedding dimension");
  }

  // Handles share storage; train on private copies so the caller's student is untouched.
  student.model = student.model.clone(true);
  if (student.head) student.head = student.head->clone(true);

  std::vector<Tensor> params = student.model.net().parameters();
  const bool train_head = cfg.loss == LossKind::kEkdCe;
  if (train_head) params.push_back(student.head->weight);
  const EkdConfig ekd = cfg.ekd();
  const ArcFaceConfig arc = cfg.arcface(student.head ? student.head->weight.rows() : 0);
  Optimizer opt(cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.weight_decay);

  FinetuneResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs && data.size() > 0; ++epoch) {
    double total = 0.0;
    std::size_t batches_run = 0;
    for (const auto& idx : make_grouped_batches(data.labels, cfg.batch_size, cfg.identity_group, derive_seed(cfg.seed, 0xf7, epoch))) {
      if (idx.size() < 2) continue;
      const auto labels = gather_labels(data, idx);
      if (cfg.loss != LossKind::kFeatureKd && !has_negative_pair(labels)) continue;

      student.model.recalibrate_weights();
      const Tensor x = data.batch(idx);
      const Tensor t_raw = teacher_net.forward(x);
      const Tensor s_raw = student.model.forward(x);
      Tensor loss;
      switch (cfg.loss) {
        case LossKind::kFeatureKd:
          loss = feature_kd_loss(t_raw, s_raw);
          break;
        case LossKind::kEkd:
          loss = ekd_loss(l2_normalize(t_raw), l2_normalize(s_raw), labels, ekd);
          break;
        case LossKind::kEkdCe: {
          const Tensor s_emb = l2_normalize(s_raw);
          const Tensor cosines = matmul(s_emb, transpose(l2_normalize(student.head->weight)));
          loss = ekd_loss_with_ce(l2_normalize(t_raw), s_emb, labels, cosines, ekd, arc);
          break;
        }
        case LossKind::kArcface:
          break;
      }
      const double value = loss.item();
      check_finite(value, result.steps);
      loss.backward();
      opt.step(params);
      if (on_step) on_step({result.steps, epoch, value});
      ++result.steps;
      total += value;
      ++batches_run;
    }
    if (batches_run > 0) result.epoch_losses.push_back(total / static_cast<double>(batches_run));
  }
  student.model.recalibrate_weights();

  Provenance prov;
  prov.stage = "finetune";
  prov.config = cfg;
  prov.dataset_digest = data.digest();
  prov.parent_digest = teacher.payload_digest();
  prov.steps = result.steps;
  prov.train_images = data.size();
  result.checkpoint = student_checkpoint(student, std::move(prov));
  result.student = std::move(student);
  return result;
}

void EvalConfig::validate() const {
  if (fpr_targets.empty()) throw Error(ErrorKind::kConfig, "eval needs at least one FPR target");
  for (double f : fpr_targets)
    if (!(f > 0.0 && f < 1.0)) throw Error(ErrorKind::kConfig, "eval FPR targets must lie in (0, 1)");
  if (folds < 2) throw Error(ErrorKind::kConfig, "eval folds must be at least 2");
  if (templates_per_id < 1) throw Error(ErrorKind::kConfig, "templates_per_id must be positive");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"n_pos", c.n_pos},
                     {"n_neg", c.n_neg},
                     {"fpr_targets", c.fpr_targets},
                     {"folds", c.folds},
                     {"templates_per_id", c.templates_per_id},
                     {"seed", c.seed},
                     {"include_roc", c.include_roc}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.n_pos = j.value("n_pos", c.n_pos);
  c.n_neg = j.value("n_neg", c.n_neg);
  c.fpr_targets = j.value("fpr_targets", c.fpr_targets);
  c.folds = j.value("folds", c.folds);
  c.templates_per_id = j.value("templates_per_id", c.templates_per_id);
  c.seed = j.value("seed", c.seed);
  c.include_roc = j.value("include_roc", c.include_roc);
}

std::vector<double> embed(const QuantizedModel& model, const Dataset& data) {
  if (data.size() == 0) return {};
  const Tensor emb = l2_normalize(model.forward(data.all()));
  return {emb.data().begin(), emb.data().end()};
}

ScoredPairs score_pairs(const QuantizedModel& model, const Dataset& data, const std::vector<EvalPair>& pairs) {
  const std::vector<double> emb = embed(model, data);
  const std::size_t d = model.net().embedding_dim();
  auto side = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::span<const double>> feats;
    feats.reserve(idx.size());
    for (auto i : idx) feats.emplace_back(emb.data() + i * d, d);
    return template_embedding(feats);
  };
  ScoredPairs sp;
  for (const auto& p : pairs) {
    const double s = cosine_similarity(side(p.left), side(p.right));
    (p.positive ? sp.pos : sp.neg).push_back(s);
  }
  return sp;
}

VerificationReport evaluate(const Checkpoint& model, const Dataset& eval_data, const std::vector<EvalPair>& pairs,
                            const EvalConfig& cfg, const std::string& label) {
  cfg.validate();
  const QuantizedModel qm = to_quantized_model(model, false);
  if (qm.net().input_dim() != eval_data.input_dim) {
    throw Error(ErrorKind::kCheckpoint, "model expects " + std::to_string(qm.net().input_dim()) +
                                            " inputs, evaluation data has " + std::to_string(eval_data.input_dim));
  }
  ScoredPairs sp = score_pairs(qm, eval_data, pairs);
  sp.model_id = label;

  VerificationReport r;
  r.model = label;
  const auto acc = kfold_accuracy(sp, cfg.folds, cfg.seed);
  r.accuracy = acc.mean;
  r.accuracy_std = acc.stddev;
  for (double f : cfg.fpr_targets) r.tpr_at.push_back(tpr_at_fpr(sp, f));
  if (cfg.include_roc) r.roc = roc_curve(sp);
  r.param_count = model.embedding_param_count();
  r.w_bits = model.quant ? model.quant->w_bits : 32;
  r.a_bits = model.quant ? model.quant->a_bits : 32;
  r.model_size_mb = estimate_model_size(r.param_count, quantization_enabled(r.w_bits) ? r.w_bits : 32);
  r.train_images = model.provenance.train_images;
  return r;
}

}  // namespace evq
