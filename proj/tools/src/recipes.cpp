#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include "evq/pipeline.hpp"
#include "evqcli/commands.hpp"

namespace evq::cli {

namespace {

struct Point {
  Workspace ws;
  RunConfig cfg;
};

class RecipeRun {
 public:
  RecipeRun(const RunConfig& c, std::ostream& log) : base_(c), root_(Workspace::from(c)), log_(log) {
    start(base_, root_);
  }

  const RunConfig& base() const { return base_; }
  const Workspace& root() const { return root_; }

  /// A sweep point in its own subdirectory that shares the root dataset.
  Point point(const std::string& sub, RunConfig cfg) {
    Workspace ws{root_.out / sub, root_.data};
    cfg.output_dir = ws.out.string();
    start(cfg, ws);
    return {ws, cfg};
  }

  std::vector<VerificationReport> finish(const std::string& trailer) {
    auto rows = collect_reports(files_);
    std::ostringstream table;
    write_report_table(table, rows);
    table << trailer;
    std::ostringstream csv;
    write_report_csv(csv, rows);
    for (auto [name, text] : {std::pair{"report.txt", table.str()}, std::pair{"report.csv", csv.str()}}) {
      std::ofstream out(root_.out / name, std::ios::binary | std::ios::trunc);
      if (!(out << text)) throw Error(ErrorKind::kIo, "cannot write " + (root_.out / name).string());
    }
    log_ << "\n" << table.str();
    return rows;
  }

 private:
  // Stale metrics from an earlier run would otherwise be appended to.
  void start(const RunConfig& cfg, const Workspace& ws) {
    std::error_code ec;
    fs::remove(ws.metrics(), ec);
    prepare_output(cfg, ws);
    files_.push_back(ws.metrics());
  }

  RunConfig base_;
  Workspace root_;
  std::ostream& log_;
  std::vector<fs::path> files_;
};

std::string bits_tag(int w, int a) { return "w" + std::to_string(w) + "a" + std::to_string(a); }

std::string percent(double f) { return std::to_string(static_cast<int>(std::lround(f * 100.0))); }

// TPR values are counts over n_pos, so the gap is computed on counts.
std::string ce_gap_line(const VerificationReport& ekd, const VerificationReport& ekd_ce, const EvalConfig& ec) {
  const double target = ec.fpr_targets.front();
  const auto n = static_cast<double>(ec.n_pos);
  const long a = std::lround(ekd.tpr(target) * n);
  const long b = std::lround(ekd_ce.tpr(target) * n);
  char buf[160];
  std::snprintf(buf, sizeof buf, "gap |ekd - ekd_ce| at tpr@%g: %.4f (%ld of %zu positive pairs)\n", target,
                static_cast<double>(std::labs(a - b)) / n, std::labs(a - b), ec.n_pos);
  return buf;
}

}  // namespace

std::vector<std::string> recipe_names() { return {"bitsweep", "fractions", "ce_ablation", "prune_vs_quant", "tableA"}; }

std::vector<VerificationReport> cmd_recipe(const std::string& name, const RunConfig& c, std::ostream& log) {
  const auto names = recipe_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    throw Error(ErrorKind::kConfig, "unknown recipe '" + name + "'");
  }
  RecipeRun run(c, log);
  const Workspace& root = run.root();
  cmd_gen_data(c, root, log);
  const fs::path teacher = cmd_train_teacher(c, root, log);
  cmd_evaluate(c, root, teacher, log, "teacher");

  if (name == "bitsweep") {
    for (int bits : {32, 8, 6, 4}) {
      RunConfig pc = c;
      pc.quant = {bits, bits};
      auto p = run.point(bits_tag(bits, bits), pc);
      const fs::path q = cmd_quantize(p.cfg, p.ws, teacher, log);
      cmd_evaluate(p.cfg, p.ws, q, log);
      const fs::path ft = cmd_finetune(p.cfg, p.ws, teacher, q, log);
      cmd_evaluate(p.cfg, p.ws, ft, log);
    }
    return run.finish("");
  }

  const std::string tag = bits_tag(c.quant.w_bits, c.quant.a_bits);
  const fs::path q = cmd_quantize(c, root, teacher, log);
  cmd_evaluate(c, root, q, log);

  if (name == "fractions") {
    for (double f : {1.0, 0.75, 0.5, 0.25}) {
      RunConfig pc = c;
      pc.data_fraction = f;
      auto p = run.point("f" + percent(f), pc);
      const std::string label = to_string(pc.train.loss) + "_" + tag + "_f" + percent(f);
      const fs::path ft = cmd_finetune(p.cfg, p.ws, teacher, q, log, label);
      cmd_evaluate(p.cfg, p.ws, ft, log);
    }
    return run.finish("");
  }

  if (name == "ce_ablation") {
    std::vector<VerificationReport> reports;
    for (LossKind loss : {LossKind::kEkd, LossKind::kEkdCe}) {
      RunConfig pc = c;
      pc.train.loss = loss;
      auto p = run.point(to_string(loss), pc);
      const fs::path ft = cmd_finetune(p.cfg, p.ws, teacher, q, log);
      reports.push_back(cmd_evaluate(p.cfg, p.ws, ft, log));
    }
    return run.finish(ce_gap_line(reports[0], reports[1], c.eval));
  }

  // prune_vs_quant / tableA
  const fs::path pruned = cmd_prune(c, root, teacher, log);
  cmd_evaluate(c, root, pruned, log);
  auto pq = run.point("quant", c);
  cmd_evaluate(pq.cfg, pq.ws, cmd_finetune(pq.cfg, pq.ws, teacher, q, log), log);
  auto pp = run.point("prune", c);
  cmd_evaluate(pp.cfg, pp.ws, cmd_finetune(pp.cfg, pp.ws, teacher, pruned, log), log);
  return run.finish("");
}

}  // namespace evq::cli
