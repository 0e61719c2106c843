#pragma once

// evq subcommands. Every command writes under the run's output directory,
// appends MetricsRecords to <out>/metrics.jsonl and throws evq::Error on
// failure; exit_code() maps the error kind to the process exit status.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evq/checkpoint.hpp"
#include "evq/dataset.hpp"
#include "evq/error.hpp"
#include "evq/metrics.hpp"
#include "evqcli/run_config.hpp"

namespace evq::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
  kExitOk = 0,
  kExitUnexpected = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitArtifact = 4,
  kExitNumeric = 5,
};

int exit_code(ErrorKind kind);

/// Output directory and where the dataset lives (recipes share one dataset
/// between sweep points).
struct Workspace {
  fs::path out;
  fs::path data;

  static Workspace from(const RunConfig& c) { return {c.output_dir, fs::path(c.output_dir) / "data"}; }
  fs::path metrics() const { return out / "metrics.jsonl"; }
};

struct DataPair {
  Dataset train;
  Dataset eval;
};

/// Creates the output directory and writes config.resolved.json.
void prepare_output(const RunConfig& c, const Workspace& ws);

/// One JSON object per line, written with a single append.
void append_metrics(const fs::path& path, const nlohmann::json& record);

void cmd_gen_data(const RunConfig& c, const Workspace& ws, std::ostream& log);
/// Loads the dataset and checks it against the manifest and the config.
DataPair load_workspace_data(const RunConfig& c, const Workspace& ws);

fs::path cmd_train_teacher(const RunConfig& c, const Workspace& ws, std::ostream& log);
fs::path cmd_quantize(const RunConfig& c, const Workspace& ws, const fs::path& teacher, std::ostream& log);
fs::path cmd_prune(const RunConfig& c, const Workspace& ws, const fs::path& teacher, std::ostream& log);
/// `name` defaults to "<loss>_<student stem without ptq_>[_f<percent>]".
fs::path cmd_finetune(const RunConfig& c, const Workspace& ws, const fs::path& teacher, const fs::path& student,
                      std::ostream& log, const std::optional<std::string>& name = std::nullopt);
VerificationReport cmd_evaluate(const RunConfig& c, const Workspace& ws, const fs::path& model, std::ostream& log,
                                const std::optional<std::string>& label = std::nullopt);

/// Reports found in the given metrics files, in file then line order.
/// Malformed lines raise kConfig naming the file and line number.
std::vector<VerificationReport> collect_reports(const std::vector<fs::path>& metrics_files);
void write_report_table(std::ostream& os, const std::vector<VerificationReport>& rows);
void write_report_csv(std::ostream& os, const std::vector<VerificationReport>& rows);
void cmd_report(const std::vector<fs::path>& metrics_files, const std::optional<fs::path>& csv, std::ostream& log);

std::vector<std::string> recipe_names();
/// Runs a whole sweep under the config's output directory and returns the
/// combined report rows (also written to report.txt / report.csv there).
std::vector<VerificationReport> cmd_recipe(const std::string& name, const RunConfig& c, std::ostream& log);

}  // namespace evq::cli
