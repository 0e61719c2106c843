#include "evqcli/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "evq/digest.hpp"
#include "evq/error.hpp"

namespace evq::cli {

TrainConfig RunConfig::default_teacher_config() {
  TrainConfig t;
  t.loss = LossKind::kArcface;
  t.optimizer = OptimizerKind::kMomentum;
  t.learning_rate = 0.01;
  t.weight_decay = 1e-3;
  t.epochs = 20;
  t.batch_size = 64;
  t.hidden_dims = {16};
  t.embedding_dim = 64;
  return t;
}

TrainConfig RunConfig::default_finetune_config() {
  TrainConfig t;
  t.loss = LossKind::kEkd;
  t.optimizer = OptimizerKind::kMomentum;
  t.learning_rate = 0.001;
  t.lambda1 = 100.0;
  t.lambda2 = 100.0;
  t.batch_size = 16;
  t.identity_group = 2;
  t.epochs = 1;
  t.hidden_dims = {16};  // informational; the student inherits the teacher's shape
  return t;
}

void RunConfig::validate() const {
  dataset.validate();
  teacher.validate();
  if (teacher.loss != LossKind::kArcface) throw Error(ErrorKind::kConfig, "teacher.loss must be arcface");
  train.validate();
  for (int b : {quant.w_bits, quant.a_bits}) {
    if (b < kMinQuantBits || b > 32) {
      throw Error(ErrorKind::kConfig, "quant bits must lie in [2, 32], got " + std::to_string(b));
    }
  }
  prune.validate();
  eval.validate();
  if (!(data_fraction > 0.0 && data_fraction <= 1.0)) {
    throw Error(ErrorKind::kConfig, "data_fraction must lie in (0, 1]");
  }
  if (output_dir.empty()) throw Error(ErrorKind::kConfig, "output.dir must not be empty");
}

nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{{"dataset", c.dataset},
                        {"teacher", c.teacher},
                        {"train", c.train},
                        {"quant", {{"w_bits", c.quant.w_bits}, {"a_bits", c.quant.a_bits}}},
                        {"prune", {{"sparsity", c.prune.sparsity}, {"layers", c.prune.layers}}},
                        {"eval", c.eval},
                        {"data_fraction", c.data_fraction},
                        {"fraction_seed", c.fraction_seed},
                        {"output", {{"dir", c.output_dir}}}};
}

namespace {

// Every key of `given` must appear in `reference` (the defaults serialized the
// same way); recurses into nested objects.
void reject_unknown(const nlohmann::json& given, const nlohmann::json& reference, const std::string& where) {
  if (!given.is_object()) {
    throw Error(ErrorKind::kConfig, "'" + where + "' must be a JSON object");
  }
  for (const auto& [key, value] : given.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) throw Error(ErrorKind::kConfig, "unknown key '" + path + "'");
    if (reference.at(key).is_object()) reject_unknown(value, reference.at(key), path);
  }
}

template <typename T>
void read_section(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("bad value in '") + key + "': " + e.what());
  }
}

}  // namespace

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  reject_unknown(j, to_json(c), "");
  if (!j.contains("dataset")) throw Error(ErrorKind::kConfig, "missing required key 'dataset'");

  read_section(j, "dataset", c.dataset);
  // Sections start from the desk defaults rather than the library defaults.
  if (j.contains("teacher")) {
    nlohmann::json merged = c.teacher;
    merged.update(j.at("teacher"));
    read_section(nlohmann::json{{"teacher", merged}}, "teacher", c.teacher);
  }
  if (j.contains("train")) {
    nlohmann::json merged = c.train;
    merged.update(j.at("train"));
    read_section(nlohmann::json{{"train", merged}}, "train", c.train);
  }
  read_section(j, "eval", c.eval);
  try {
    if (j.contains("quant")) {
      const auto& q = j.at("quant");
      c.quant.w_bits = q.value("w_bits", c.quant.w_bits);
      c.quant.a_bits = q.value("a_bits", c.quant.a_bits);
    }
    if (j.contains("prune")) {
      const auto& p = j.at("prune");
      c.prune.sparsity = p.value("sparsity", c.prune.sparsity);
      c.prune.layers = p.value("layers", c.prune.layers);
    }
    c.data_fraction = j.value("data_fraction", c.data_fraction);
    c.fraction_seed = j.value("fraction_seed", c.fraction_seed);
    if (j.contains("output")) c.output_dir = j.at("output").value("dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("bad value: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kConfig, path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

std::string config_digest(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

void apply_overrides(RunConfig& c, const Overrides& o) {
  if (o.out) {
    c.output_dir = *o.out;
  } else if (const char* env = std::getenv("EVQ_OUT_DIR"); env != nullptr && *env != '\0') {
    c.output_dir = env;
  }
  if (o.seed) {
    c.dataset.seed = *o.seed;
    c.teacher.seed = *o.seed;
    c.train.seed = *o.seed;
    c.eval.seed = *o.seed;
    c.fraction_seed = *o.seed;
  }
  if (o.data_fraction) c.data_fraction = *o.data_fraction;
  if (o.w_bits) c.quant.w_bits = *o.w_bits;
  if (o.a_bits) c.quant.a_bits = *o.a_bits;
  if (o.sparsity) c.prune.sparsity = *o.sparsity;
  if (o.loss) c.train.loss = parse_loss(*o.loss);
  c.validate();
}

}  // namespace evq::cli
