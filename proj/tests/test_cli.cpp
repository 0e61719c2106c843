#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "evqcli/commands.hpp"

namespace fs = std::filesystem;
using namespace evq::cli;

namespace {

nlohmann::json small_config_json(const fs::path& out) {
  return {{"dataset",
           {{"n_identities", 24}, {"samples_per_identity", 10}, {"holdout_identities", 10}, {"input_dim", 12},
            {"latent_dim", 6}}},
          {"teacher", {{"epochs", 3}, {"batch_size", 32}, {"hidden_dims", {8}}, {"embedding_dim", 8}}},
          {"train", {{"batch_size", 8}}},
          {"eval", {{"n_pos", 200}, {"n_neg", 1000}}},
          {"data_fraction", 0.5},
          {"output", {{"dir", out.string()}}}};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("evq_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Run {
  int code;
  std::string output;
};

Run run_cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string(EVQ_BINARY) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string expect_error(const nlohmann::json& j, evq::ErrorKind kind) {
  try {
    parse_run_config(j);
  } catch (const evq::Error& e) {
    CHECK(e.kind() == kind);
    return e.what();
  }
  FAIL("expected an error");
  return {};
}

}  // namespace

TEST_CASE("run config parsing") {
  const auto base = small_config_json("out");
  const RunConfig c = parse_run_config(base);
  CHECK(c.dataset.n_identities == 24);
  CHECK(c.teacher.epochs == 3);
  CHECK(c.teacher.learning_rate == RunConfig::default_teacher_config().learning_rate);
  CHECK(c.train.lambda1 == 100.0);  // desk default kept under a partial section
  CHECK(c.train.batch_size == 8);

  auto j = base;
  j["mystery"] = 1;
  CHECK(expect_error(j, evq::ErrorKind::kConfig).find("'mystery'") != std::string::npos);
  j = base;
  j["train"]["lamda1"] = 1;
  CHECK(expect_error(j, evq::ErrorKind::kConfig).find("'train.lamda1'") != std::string::npos);
  j = base;
  j.erase("dataset");
  CHECK(expect_error(j, evq::ErrorKind::kConfig).find("'dataset'") != std::string::npos);
  j = base;
  j["quant"] = {{"w_bits", 1}};
  expect_error(j, evq::ErrorKind::kConfig);
  j = base;
  j["teacher"]["loss"] = "ekd";
  expect_error(j, evq::ErrorKind::kConfig);
  j = base;
  j["dataset"]["n_identities"] = "many";
  expect_error(j, evq::ErrorKind::kConfig);

  // The resolved config parses back to itself.
  CHECK(to_json(parse_run_config(to_json(c))) == to_json(c));
  CHECK(config_digest(c) == config_digest(parse_run_config(base)));
}

TEST_CASE("overrides and output precedence") {
  RunConfig c = parse_run_config(small_config_json("from_config"));
  ::unsetenv("EVQ_OUT_DIR");
  RunConfig a = c;
  apply_overrides(a, {});
  CHECK(a.output_dir == "from_config");
  ::setenv("EVQ_OUT_DIR", "from_env", 1);
  RunConfig b = c;
  apply_overrides(b, {});
  CHECK(b.output_dir == "from_env");
  Overrides o;
  o.out = "from_flag";
  o.seed = 99;
  o.loss = "ekd_ce";
  o.w_bits = 8;
  RunConfig d = c;
  apply_overrides(d, o);
  ::unsetenv("EVQ_OUT_DIR");
  CHECK(d.output_dir == "from_flag");
  CHECK(d.dataset.seed == 99);
  CHECK(d.teacher.seed == 99);
  CHECK(d.eval.seed == 99);
  CHECK(d.train.loss == evq::LossKind::kEkdCe);
  CHECK(d.quant.w_bits == 8);
  Overrides bad;
  bad.data_fraction = 1.5;
  CHECK_THROWS_AS(apply_overrides(d, bad), evq::Error);
}

TEST_CASE("exit codes") {
  CHECK(exit_code(evq::ErrorKind::kConfig) == 2);
  CHECK(exit_code(evq::ErrorKind::kSpec) == 2);
  CHECK(exit_code(evq::ErrorKind::kIo) == 3);
  CHECK(exit_code(evq::ErrorKind::kDigest) == 4);
  CHECK(exit_code(evq::ErrorKind::kCheckpoint) == 4);
  CHECK(exit_code(evq::ErrorKind::kTraining) == 5);
}

TEST_CASE("stage commands") {
  const fs::path dir = scratch("stages");
  RunConfig c = parse_run_config(small_config_json(dir));
  const Workspace ws = Workspace::from(c);
  std::ostringstream log;
  prepare_output(c, ws);
  CHECK(fs::exists(dir / "config.resolved.json"));
  CHECK(nlohmann::json::parse(slurp(dir / "config.resolved.json")) == to_json(c));

  cmd_gen_data(c, ws, log);
  const std::string digest1 = slurp(ws.data / "manifest.json");
  cmd_gen_data(c, ws, log);
  CHECK(slurp(ws.data / "manifest.json") == digest1);
  const auto manifest = nlohmann::json::parse(digest1);
  CHECK(manifest["train"]["samples"] == 240);

  const fs::path teacher = cmd_train_teacher(c, ws, log);
  const fs::path ptq = cmd_quantize(c, ws, teacher, log);
  CHECK(ptq.filename() == "ptq_w4a4.eqck");

  log.str("");
  const fs::path pruned = cmd_prune(c, ws, teacher, log);
  const std::size_t kept = 7;  // ceil(0.8 * 8)
  const std::size_t want = 12 * kept + kept + kept * 8 + 8;
  CHECK(evq::load_checkpoint(pruned).embedding_param_count() == want);
  CHECK(log.str().find("-> " + std::to_string(want)) != std::string::npos);

  log.str("");
  RunConfig quarter = c;
  quarter.data_fraction = 0.2;
  const fs::path ft = cmd_finetune(quarter, ws, teacher, ptq, log);
  CHECK(log.str().find("training-set size: 48 of 240 images (20%)") != std::string::npos);
  CHECK(ft.filename() == "ekd_w4a4_f20.eqck");

  // Evaluate teacher and a w32a32 copy: identical numbers.
  RunConfig fp = c;
  fp.quant = {32, 32};
  const fs::path copy = cmd_quantize(fp, ws, teacher, log);
  const auto rt = cmd_evaluate(c, ws, teacher, log, "same");
  const auto rq = cmd_evaluate(c, ws, copy, log, "same");
  CHECK(nlohmann::json(rt) == nlohmann::json(rq));

  // Every line of the metrics file is a record with the config digest.
  std::ifstream in(ws.metrics());
  std::string line;
  std::size_t records = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("stage"));
    CHECK(j.contains("wall_ms"));
    CHECK(j.contains("config_digest"));
    ++records;
  }
  CHECK(records == 9);

  // Student from another teacher, and data from another spec.
  RunConfig other = c;
  other.teacher.seed = 5;
  const Workspace ows{dir / "other", ws.data};
  prepare_output(other, ows);
  const fs::path teacher2 = cmd_train_teacher(other, ows, log);
  try {
    cmd_finetune(c, ws, teacher2, ptq, log);
    FAIL("expected a digest error");
  } catch (const evq::Error& e) {
    CHECK(exit_code(e.kind()) == 4);
  }
  RunConfig moved = c;
  moved.dataset.seed = 8;
  try {
    cmd_evaluate(moved, ws, teacher, log);
    FAIL("expected a digest error");
  } catch (const evq::Error& e) {
    CHECK(exit_code(e.kind()) == 4);
  }
  fs::remove_all(dir);
}

TEST_CASE("report rendering") {
  const fs::path dir = scratch("report");
  auto row = [](const std::string& name, int bits) {
    evq::VerificationReport r;
    r.model = name;
    r.param_count = 1000;
    r.w_bits = bits;
    r.model_size_mb = evq::estimate_model_size(1000, bits);
    r.tpr_at = {{0.01, 0.2, 0.9, 0.01}};
    return r;
  };
  const fs::path m = dir / "metrics.jsonl";
  for (auto [name, bits] : {std::pair{"fp", 32}, std::pair{"w8a8", 8}, std::pair{"w4a4", 4}}) {
    append_metrics(m, {{"stage", "evaluate"}, {"report", row(name, bits)}, {"wall_ms", 1.0}, {"config_digest", "x"}});
  }
  const auto rows = collect_reports({m});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].model_size_mb / rows[1].model_size_mb == doctest::Approx(4.0));
  CHECK(rows[0].model_size_mb / rows[2].model_size_mb == doctest::Approx(8.0));

  std::ostringstream csv;
  write_report_csv(csv, rows);
  CHECK(csv.str().rfind("model,params,size_mb,train_images,acc_mean,acc_std,tpr@0.01\n", 0) == 0);
  std::ostringstream one;
  write_report_table(one, {rows[0]});
  const std::string table = one.str();
  CHECK(std::count(table.begin(), table.end(), '\n') == 2);  // header and one row

  std::ofstream(m, std::ios::app) << "{\"stage\": \"evaluate\"}\n{broken\n";
  try {
    collect_reports({m});
    FAIL("expected a config error");
  } catch (const evq::Error& e) {
    CHECK(exit_code(e.kind()) == 2);
    CHECK(std::string(e.what()).find("line 5") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("evq binary exit codes") {
  const fs::path dir = scratch("binary");
  const fs::path cfg = write_config(dir, small_config_json(dir / "run"));

  auto r = run_cli("gen-data --config " + cfg.string(), dir);
  CHECK(r.code == 0);
  CHECK(r.output.find("train: 240 samples") != std::string::npos);

  auto bad = small_config_json(dir / "run");
  bad.erase("dataset");
  r = run_cli("gen-data --config " + write_config(dir, bad).string(), dir);
  CHECK(r.code == 2);
  CHECK(r.output.find("'dataset'") != std::string::npos);

  r = run_cli("gen-data --config " + (dir / "missing.json").string(), dir);
  CHECK(r.code == 3);
  r = run_cli("gen-data", dir);
  CHECK(r.code == 2);
  r = run_cli("evaluate --config " + write_config(dir, small_config_json(dir / "run")).string(), dir);
  CHECK(r.code == 3);  // no teacher yet

  r = run_cli("train-teacher --config " + cfg.string(), dir);
  CHECK(r.code == 0);
  r = run_cli("evaluate --config " + cfg.string() + " --seed 3", dir);
  CHECK(r.code == 4);  // data was generated for another seed

  const std::string metrics = (dir / "run" / "metrics.jsonl").string();
  r = run_cli("evaluate --config " + cfg.string(), dir);
  CHECK(r.code == 0);
  r = run_cli("report " + metrics + " --csv " + (dir / "r.csv").string(), dir);
  CHECK(r.code == 0);
  CHECK(r.output.find("teacher") != std::string::npos);
  CHECK(fs::exists(dir / "r.csv"));

  auto diverge = small_config_json(dir / "run");
  diverge["teacher"]["learning_rate"] = 1e200;
  r = run_cli("train-teacher --config " + write_config(dir, diverge).string(), dir);
  CHECK(r.code == 5);
  fs::remove_all(dir);
}

TEST_CASE("recipes") {
  const fs::path dir = scratch("recipes");
  const RunConfig c = parse_run_config(small_config_json(dir / "frac"));
  std::ostringstream log;
  const auto fr = cmd_recipe("fractions", c, log);
  REQUIRE(fr.size() == 6);  // teacher, PTQ, four fractions
  CHECK(fr[2].train_images == 240);
  CHECK(fr[3].train_images == 192);  // 7.5 per identity rounds to even
  CHECK(fr[4].train_images == 120);
  CHECK(fr[5].train_images == 48);
  CHECK(fs::exists(dir / "frac" / "report.csv"));
  CHECK(fs::exists(dir / "frac" / "f25" / "config.resolved.json"));

  RunConfig ce = c;
  ce.output_dir = (dir / "ce").string();
  log.str("");
  const auto rows = cmd_recipe("ce_ablation", ce, log);
  REQUIRE(rows.size() == 4);
  CHECK(rows[2].model == "ekd_w4a4_f50");
  CHECK(rows[3].model == "ekd_ce_w4a4_f50");
  CHECK(log.str().find("gap |ekd - ekd_ce|") != std::string::npos);

  RunConfig bits = c;
  bits.output_dir = (dir / "bits").string();
  const auto sweep = cmd_recipe("bitsweep", bits, log);
  REQUIRE(sweep.size() == 9);
  for (std::size_t i = 2; i < sweep.size(); ++i) CHECK(sweep[i].model_size_mb <= sweep[i - 1].model_size_mb);

  RunConfig table = c;
  table.output_dir = (dir / "table").string();
  const auto ta = cmd_recipe("tableA", table, log);
  REQUIRE(ta.size() == 5);
  CHECK(ta[0].model == "teacher");
  CHECK(ta[2].model == "pruned_sp20");
  CHECK(ta[3].model == "ekd_w4a4_f50");
  CHECK(ta[4].model == "ekd_pruned_sp20_f50");
  CHECK_THROWS_AS(cmd_recipe("unknown", table, log), evq::Error);
  fs::remove_all(dir);
}
