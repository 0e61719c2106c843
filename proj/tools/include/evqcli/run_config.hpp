#pragma once

// The JSON run configuration shared by every evq subcommand.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "evq/dataset.hpp"
#include "evq/pipeline.hpp"

namespace evq::cli {

struct QuantSection {
  int w_bits = 4;
  int a_bits = 4;
};

/// Defaults are the calibrated desk setup, so `{"dataset": {}}` is a complete
/// config. Library-level TrainConfig defaults stay at the published values.
struct RunConfig {
  DatasetSpec dataset;
  TrainConfig teacher = default_teacher_config();
  TrainConfig train = default_finetune_config();
  QuantSection quant;
  PruneSpec prune;
  EvalConfig eval;
  double data_fraction = 0.1;
  std::uint64_t fraction_seed = 3;
  std::string output_dir = "runs/desk";

  static TrainConfig default_teacher_config();
  static TrainConfig default_finetune_config();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);

/// Strict parse: unknown keys at any level and a missing "dataset" section
/// raise kConfig naming the key.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// SHA-256 of the resolved config's canonical JSON dump.
std::string config_digest(const RunConfig& c);

struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;  // replaces every seed in the config
  std::optional<double> data_fraction;
  std::optional<int> w_bits;
  std::optional<int> a_bits;
  std::optional<double> sparsity;
  std::optional<std::string> loss;
};

/// Precedence for the output directory: --out, then EVQ_OUT_DIR, then the
/// config file. Revalidates the result.
void apply_overrides(RunConfig& c, const Overrides& o);

}  // namespace evq::cli
