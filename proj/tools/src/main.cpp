#include <iostream>

#include <CLI11.hpp>

#include "evqcli/commands.hpp"

namespace {

using namespace evq::cli;

struct Args {
  std::string config;
  Overrides over;
  std::string teacher;
  std::string student;
  std::string model;
  std::string label;
  std::string name;
  std::string recipe;
  std::vector<std::string> metrics;
  std::string csv;
};

void add_common(CLI::App* sub, Args& a) {
  sub->add_option("--config", a.config, "run config JSON")->required();
  sub->add_option("--out", a.over.out, "output directory (overrides EVQ_OUT_DIR and the config)");
  sub->add_option("--seed", a.over.seed, "replace every seed in the config");
  sub->add_option("--data-fraction", a.over.data_fraction, "fine-tuning data fraction in (0, 1]");
  sub->add_option("--w-bits", a.over.w_bits, "weight bits (> 16 disables)");
  sub->add_option("--a-bits", a.over.a_bits, "activation bits (> 16 disables)");
  sub->add_option("--sparsity", a.over.sparsity, "channel pruning sparsity");
  sub->add_option("--loss", a.over.loss, "fine-tuning loss")
      ->check(CLI::IsMember({"arcface", "feature_kd", "ekd", "ekd_ce"}));
}

fs::path or_default(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

std::string ptq_name(const RunConfig& c) {
  return "ptq_w" + std::to_string(c.quant.w_bits) + "a" + std::to_string(c.quant.a_bits) + ".eqck";
}

int run(int argc, char** argv) {
  CLI::App app{"evq: quantization-aware distillation for embedding networks"};
  app.require_subcommand(1);
  Args a;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic identity dataset");
  auto* teach = app.add_subcommand("train-teacher", "train the full-precision ArcFace teacher");
  auto* quant = app.add_subcommand("quantize", "post-training quantization of the teacher");
  auto* prune = app.add_subcommand("prune", "channel-prune the teacher");
  auto* fine = app.add_subcommand("finetune", "distillation fine-tuning of a student");
  auto* eval = app.add_subcommand("evaluate", "verification metrics for a checkpoint");
  auto* report = app.add_subcommand("report", "comparison table from metrics files");
  auto* recipe = app.add_subcommand("recipe", "run a whole ablation sweep");

  for (auto* sub : {gen, teach, quant, prune, fine, eval, recipe}) add_common(sub, a);
  for (auto* sub : {quant, prune, fine}) sub->add_option("--teacher", a.teacher, "teacher checkpoint");
  fine->add_option("--student", a.student, "student checkpoint (default: the PTQ student for --w-bits/--a-bits)");
  fine->add_option("--name", a.name, "output checkpoint stem");
  eval->add_option("--model", a.model, "checkpoint to evaluate (default: the teacher)");
  eval->add_option("--label", a.label, "row label (default: checkpoint stem)");
  report->add_option("metrics", a.metrics, "metrics.jsonl files in run order")->required()->check(CLI::ExistingFile);
  report->add_option("--csv", a.csv, "also write the table as CSV");
  recipe->add_option("name", a.recipe, "recipe")->required()->check(CLI::IsMember(recipe_names()));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  std::ostream& log = std::cout;
  if (report->parsed()) {
    std::vector<fs::path> files(a.metrics.begin(), a.metrics.end());
    cmd_report(files, a.csv.empty() ? std::nullopt : std::optional<fs::path>(a.csv), log);
    return kExitOk;
  }

  RunConfig cfg = load_run_config(a.config);
  apply_overrides(cfg, a.over);
  const Workspace ws = Workspace::from(cfg);
  prepare_output(cfg, ws);
  log << "config digest " << config_digest(cfg) << ", output " << ws.out.string() << "\n";
  const fs::path teacher = or_default(a.teacher, ws.out / "teacher.eqck");

  if (gen->parsed()) {
    cmd_gen_data(cfg, ws, log);
  } else if (teach->parsed()) {
    cmd_train_teacher(cfg, ws, log);
  } else if (quant->parsed()) {
    cmd_quantize(cfg, ws, teacher, log);
  } else if (prune->parsed()) {
    cmd_prune(cfg, ws, teacher, log);
  } else if (fine->parsed()) {
    const fs::path student = or_default(a.student, ws.out / ptq_name(cfg));
    cmd_finetune(cfg, ws, teacher, student, log, a.name.empty() ? std::nullopt : std::optional(a.name));
  } else if (eval->parsed()) {
    cmd_evaluate(cfg, ws, or_default(a.model, teacher), log,
                 a.label.empty() ? std::nullopt : std::optional(a.label));
  } else if (recipe->parsed()) {
    cmd_recipe(a.recipe, cfg, log);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const evq::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: unexpected: " << e.what() << "\n";
    return kExitUnexpected;
  }
}
