#include "evqcli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "evq/pipeline.hpp"

namespace evq::cli {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kSpec:
    case ErrorKind::kProtocol:
    case ErrorKind::kContract:
    case ErrorKind::kEmptyCalibration:
    case ErrorKind::kLabel:
      return kExitConfig;
    case ErrorKind::kIo:
      return kExitIo;
    case ErrorKind::kDigest:
    case ErrorKind::kCheckpoint:
    case ErrorKind::kDimension:
      return kExitArtifact;
    case ErrorKind::kTraining:
    case ErrorKind::kCalibration:
    case ErrorKind::kDegenerateBatch:
    case ErrorKind::kDegenerateVector:
      return kExitNumeric;
  }
  return kExitUnexpected;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

nlohmann::json record(const RunConfig& c, const std::string& stage, Clock::time_point t0) {
  return {{"stage", stage}, {"wall_ms", ms_since(t0)}, {"config_digest", config_digest(c)}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << text;
  if (!out.flush()) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
}

Checkpoint load_required(const fs::path& path, const char* what) {
  if (!fs::exists(path)) {
    throw Error(ErrorKind::kIo, std::string(what) + " checkpoint not found: " + path.string());
  }
  return load_checkpoint(path);
}

void require_teacher_matches(const Checkpoint& teacher, const DataPair& data) {
  if (teacher.provenance.dataset_digest != data.train.digest()) {
    throw Error(ErrorKind::kDigest, "teacher was trained on dataset " + teacher.provenance.dataset_digest +
                                        " but the workspace holds " + data.train.digest());
  }
}

Dataset finetune_data(const RunConfig& c, const Dataset& train) {
  if (c.data_fraction >= 1.0) return train;
  return fraction_split(train, c.data_fraction, c.fraction_seed);
}

std::string percent(double fraction) { return std::to_string(static_cast<int>(std::lround(fraction * 100.0))); }

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

}  // namespace

void prepare_output(const RunConfig& c, const Workspace& ws) {
  std::error_code ec;
  fs::create_directories(ws.out, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + ws.out.string() + ": " + ec.message());
  write_text(ws.out / "config.resolved.json", to_json(c).dump(2) + "\n");
}

void append_metrics(const fs::path& path, const nlohmann::json& rec) {
  const std::string line = rec.dump() + "\n";
  std::FILE* f = std::fopen(path.c_str(), "ab");
  if (f == nullptr) throw Error(ErrorKind::kIo, "cannot append to " + path.string());
  const bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size();
  if (std::fclose(f) != 0 || !ok) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

void cmd_gen_data(const RunConfig& c, const Workspace& ws, std::ostream& log) {
  const auto t0 = Clock::now();
  const GeneratedData g = generate(c.dataset);
  std::error_code ec;
  fs::create_directories(ws.data, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + ws.data.string() + ": " + ec.message());
  save_dataset(ws.data / "train.eqds", g.train, c.dataset.seed);
  save_dataset(ws.data / "eval.eqds", g.eval, c.dataset.seed);
  const nlohmann::json manifest{
      {"dataset", c.dataset},
      {"train", {{"file", "train.eqds"}, {"samples", g.train.size()}, {"digest", g.train.digest()}}},
      {"eval", {{"file", "eval.eqds"}, {"samples", g.eval.size()}, {"digest", g.eval.digest()}}}};
  write_text(ws.data / "manifest.json", manifest.dump(2) + "\n");
  append_metrics(ws.metrics(), record(c, "gen_data", t0));
  log << "train: " << g.train.size() << " samples, " << g.train.identity_count() << " identities, digest "
      << g.train.digest() << "\n";
  log << "eval:  " << g.eval.size() << " samples, " << g.eval.identity_count() << " identities, digest "
      << g.eval.digest() << "\n";
}

DataPair load_workspace_data(const RunConfig& c, const Workspace& ws) {
  const fs::path manifest_path = ws.data / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw Error(ErrorKind::kIo, "no dataset manifest at " + manifest_path.string() + " (run gen-data first)");
  }
  const nlohmann::json manifest = read_json(manifest_path);
  if (manifest.value("dataset", nlohmann::json{}) != nlohmann::json(c.dataset)) {
    throw Error(ErrorKind::kDigest, "dataset in " + ws.data.string() + " was generated from a different spec");
  }
  DataPair out;
  for (auto [key, slot] : {std::pair{"train", &out.train}, std::pair{"eval", &out.eval}}) {
    const auto& entry = manifest.at(key);
    *slot = load_dataset(ws.data / entry.at("file").get<std::string>());
    if (slot->digest() != entry.at("digest").get<std::string>()) {
      throw Error(ErrorKind::kDigest, std::string(key) + " data digest does not match the manifest");
    }
  }
  return out;
}

fs::path cmd_train_teacher(const RunConfig& c, const Workspace& ws, std::ostream& log) {
  const auto t0 = Clock::now();
  const DataPair data = load_workspace_data(c, ws);
  TrainResult r = train_teacher(data.train, c.teacher);
  const fs::path path = ws.out / "teacher.eqck";
  save_checkpoint(r.checkpoint, path);
  auto rec = record(c, "train_teacher", t0);
  rec["step"] = r.steps;
  rec["loss"] = r.epoch_losses.back();
  append_metrics(ws.metrics(), rec);
  log << "teacher: " << r.steps << " steps, final epoch loss " << fmt("%.4f", r.epoch_losses.back()) << ", "
      << r.checkpoint.embedding_param_count() << " params -> " << path.string() << "\n";
  return path;
}

fs::path cmd_quantize(const RunConfig& c, const Workspace& ws, const fs::path& teacher_path, std::ostream& log) {
  const auto t0 = Clock::now();
  const DataPair data = load_workspace_data(c, ws);
  const Checkpoint teacher = load_required(teacher_path, "teacher");
  require_teacher_matches(teacher, data);
  const Student s = make_quantized_student(teacher, c.quant.w_bits, c.quant.a_bits, data.train);
  Provenance p;
  p.stage = "quantize";
  p.config = {{"w_bits", c.quant.w_bits}, {"a_bits", c.quant.a_bits}};
  p.dataset_digest = teacher.provenance.dataset_digest;
  p.parent_digest = teacher.payload_digest();
  p.train_images = teacher.provenance.train_images;
  const Checkpoint ck = student_checkpoint(s, p);
  const std::string name =
      "ptq_w" + std::to_string(c.quant.w_bits) + "a" + std::to_string(c.quant.a_bits);
  const fs::path path = ws.out / (name + ".eqck");
  save_checkpoint(ck, path);
  append_metrics(ws.metrics(), record(c, "quantize", t0));
  log << "quantized w" << c.quant.w_bits << "a" << c.quant.a_bits << ", calibrated on " << data.train.size()
      << " images -> " << path.string() << "\n";
  return path;
}

fs::path cmd_prune(const RunConfig& c, const Workspace& ws, const fs::path& teacher_path, std::ostream& log) {
  const auto t0 = Clock::now();
  const DataPair data = load_workspace_data(c, ws);
  const Checkpoint teacher = load_required(teacher_path, "teacher");
  require_teacher_matches(teacher, data);
  const Student s = make_pruned_student(teacher, c.prune);
  Provenance p;
  p.stage = "prune";
  p.config = {{"sparsity", c.prune.sparsity}, {"layers", c.prune.layers}};
  p.dataset_digest = teacher.provenance.dataset_digest;
  p.parent_digest = teacher.payload_digest();
  p.train_images = teacher.provenance.train_images;
  const Checkpoint ck = student_checkpoint(s, p);
  const fs::path path = ws.out / ("pruned_sp" + percent(c.prune.sparsity) + ".eqck");
  save_checkpoint(ck, path);
  append_metrics(ws.metrics(), record(c, "prune", t0));
  log << "pruned sparsity " << c.prune.sparsity << ": params " << teacher.embedding_param_count() << " -> "
      << ck.embedding_param_count() << " -> " << path.string() << "\n";
  return path;
}

fs::path cmd_finetune(const RunConfig& c, const Workspace& ws, const fs::path& teacher_path,
                      const fs::path& student_path, std::ostream& log, const std::optional<std::string>& name) {
  const auto t0 = Clock::now();
  const DataPair data = load_workspace_data(c, ws);
  const Checkpoint teacher = load_required(teacher_path, "teacher");
  require_teacher_matches(teacher, data);
  const Checkpoint student_ck = load_required(student_path, "student");
  if (student_ck.provenance.parent_digest != teacher.payload_digest()) {
    throw Error(ErrorKind::kDigest, student_path.string() + " was not derived from " + teacher_path.string());
  }
  const Dataset subset = finetune_data(c, data.train);
  log << "training-set size: " << subset.size() << " of " << data.train.size() << " images ("
      << percent(c.data_fraction) << "%)\n";

  FinetuneResult r = finetune_student(teacher, student_from_checkpoint(student_ck), subset, c.train);

  std::string stem = name.value_or("");
  if (stem.empty()) {
    std::string base = student_path.stem().string();
    if (base.rfind("ptq_", 0) == 0) base = base.substr(4);
    stem = to_string(c.train.loss) + "_" + base;
    if (c.data_fraction < 1.0) stem += "_f" + percent(c.data_fraction);
  }
  const fs::path path = ws.out / (stem + ".eqck");
  save_checkpoint(r.checkpoint, path);
  auto rec = record(c, "finetune", t0);
  rec["step"] = r.steps;
  if (!r.epoch_losses.empty()) rec["loss"] = r.epoch_losses.back();
  append_metrics(ws.metrics(), rec);
  log << "finetune " << to_string(c.train.loss) << ": " << r.steps << " steps -> " << path.string() << "\n";
  return path;
}

VerificationReport cmd_evaluate(const RunConfig& c, const Workspace& ws, const fs::path& model_path,
                                std::ostream& log, const std::optional<std::string>& label) {
  const auto t0 = Clock::now();
  const DataPair data = load_workspace_data(c, ws);
  const Checkpoint model = load_required(model_path, "model");
  const auto pairs = make_eval_pairs(data.eval, c.eval.n_pos, c.eval.n_neg, c.eval.seed, c.eval.templates_per_id);
  const std::string name = label.value_or(model_path.stem().string());
  VerificationReport r = evaluate(model, data.eval, pairs, c.eval, name);
  if (c.eval.include_roc) {
    std::ofstream roc(ws.out / (name + ".roc.csv"));
    if (!roc) throw Error(ErrorKind::kIo, "cannot write ROC for " + name);
    write_roc_csv(roc, r.roc);
  }
  auto rec = record(c, "evaluate", t0);
  rec["report"] = r;
  append_metrics(ws.metrics(), rec);
  log << name << ": acc " << fmt("%.4f", r.accuracy);
  for (const auto& t : r.tpr_at) log << "  tpr@" << fmt("%g", t.target) << " " << fmt("%.4f", t.tpr);
  log << "\n";
  return r;
}

std::vector<VerificationReport> collect_reports(const std::vector<fs::path>& files) {
  if (files.empty()) throw Error(ErrorKind::kConfig, "report needs at least one metrics file");
  std::vector<VerificationReport> rows;
  for (const auto& path : files) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        if (!j.is_object() || !j.contains("stage")) throw std::runtime_error("not a metrics record");
        if (j.contains("report")) rows.push_back(j.at("report").get<VerificationReport>());
      } catch (const std::exception& e) {
        throw Error(ErrorKind::kConfig,
                    path.string() + ": malformed metrics line " + std::to_string(n) + ": " + e.what());
      }
    }
  }
  return rows;
}

namespace {

std::vector<double> report_targets(const std::vector<VerificationReport>& rows) {
  std::vector<double> targets;
  for (const auto& r : rows) {
    for (const auto& t : r.tpr_at) {
      if (std::find(targets.begin(), targets.end(), t.target) == targets.end()) targets.push_back(t.target);
    }
  }
  return targets;
}

std::string tpr_cell(const VerificationReport& r, double target, const char* pattern) {
  for (const auto& t : r.tpr_at) {
    if (t.target == target) return fmt(pattern, t.tpr);
  }
  return "";
}

}  // namespace

void write_report_table(std::ostream& os, const std::vector<VerificationReport>& rows) {
  const auto targets = report_targets(rows);
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.model.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %9s %9s %8s %8s %8s", static_cast<int>(width), "model", "params", "size_mb",
                "images", "acc", "acc_std");
  os << buf;
  for (double t : targets) {
    std::snprintf(buf, sizeof buf, " %10s", ("tpr@" + fmt("%g", t)).c_str());
    os << buf;
  }
  os << "\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %9llu %9.5f %8llu %8.4f %8.4f", static_cast<int>(width), r.model.c_str(),
                  static_cast<unsigned long long>(r.param_count), r.model_size_mb,
                  static_cast<unsigned long long>(r.train_images), r.accuracy, r.accuracy_std);
    os << buf;
    for (double t : targets) {
      std::snprintf(buf, sizeof buf, " %10s", tpr_cell(r, t, "%.4f").c_str());
      os << buf;
    }
    os << "\n";
  }
}

void write_report_csv(std::ostream& os, const std::vector<VerificationReport>& rows) {
  const auto targets = report_targets(rows);
  os << "model,params,size_mb,train_images,acc_mean,acc_std";
  for (double t : targets) os << ",tpr@" << fmt("%g", t);
  os << "\n";
  for (const auto& r : rows) {
    os << r.model << "," << r.param_count << "," << fmt("%.6f", r.model_size_mb) << "," << r.train_images << ","
       << fmt("%.6f", r.accuracy) << "," << fmt("%.6f", r.accuracy_std);
    for (double t : targets) os << "," << tpr_cell(r, t, "%.6f");
    os << "\n";
  }
}

void cmd_report(const std::vector<fs::path>& files, const std::optional<fs::path>& csv, std::ostream& log) {
  const auto rows = collect_reports(files);
  write_report_table(log, rows);
  if (csv) {
    std::ostringstream os;
    write_report_csv(os, rows);
    write_text(*csv, os.str());
  }
}

}  // namespace evq::cli
