#pragma once

// Seeded synthetic identity data. Each identity owns a random unit prototype
// in a low-dimensional latent space; samples are noisy copies of it pushed
// through a fixed random tanh network into input space.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evq/tensor.hpp"

namespace evq {

struct DatasetSpec {
  std::uint64_t seed = 7;
  std::size_t n_identities = 200;
  std::size_t samples_per_identity = 20;
  std::size_t holdout_identities = 50;  // disjoint evaluation identities
  std::size_t input_dim = 64;
  std::size_t latent_dim = 16;
  double noise_sigma = 0.3;  // expected norm of the latent noise
  std::size_t renderer_depth = 2;

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Row-major samples with one identity label per row. Values are always
/// representable as 32-bit floats so the on-disk form round-trips exactly.
struct Dataset {
  std::size_t input_dim = 0;
  std::vector<double> inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {inputs.data() + i * input_dim, input_dim}; }
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all() const;
  /// Number of distinct identity ids.
  std::size_t identity_count() const;
  /// SHA-256 over the little-endian float32 payload followed by the labels.
  std::string digest() const;
};

struct RendererLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;  // [in x out]
  std::vector<double> bias;
};

struct GeneratedData {
  Dataset train;
  Dataset eval;
  std::vector<double> train_latents;  // [train.size() x latent_dim]
  std::vector<double> eval_latents;
  std::vector<RendererLayer> renderer;
};

GeneratedData generate(const DatasetSpec& spec);

/// Per-identity stratified subset of round(fraction × count) samples chosen
/// by `seed`; identities whose rounded count is zero drop out. Selected rows
/// keep their original relative order. fraction == 1 returns the input.
Dataset fraction_split(const Dataset& data, double fraction, std::uint64_t seed);

/// Batches of `batch_size` rows drawn without replacement in a seeded order.
std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed);

/// Like make_batches, but rows are first cut into groups of up to `group`
/// same-identity samples and the groups are shuffled as units, so each batch
/// carries positive pairs even when identities are sparsely sampled.
/// group == 0 falls back to make_batches.
std::vector<std::vector<std::size_t>> make_grouped_batches(std::span<const int> labels, std::size_t batch_size,
                                                           std::size_t group, std::uint64_t seed);

struct EvalPair {
  std::vector<std::size_t> left;  // sample indices forming the left template
  std::vector<std::size_t> right;
  bool positive = false;
};

/// Distinct positive and negative pairs. With templates_per_id > 1 each side
/// is a set of that many samples of one identity (positive sides disjoint).
/// Throws kProtocol when the counts cannot be realized.
std::vector<EvalPair> make_eval_pairs(const Dataset& data, std::size_t n_pos, std::size_t n_neg, std::uint64_t seed,
                                      std::size_t templates_per_id = 1);

/// EQDS1 sample file: "EQDS1\n", one JSON header line (shape, seed, digest,
/// labels), then the little-endian float32 rows.
void save_dataset(const std::filesystem::path& path, const Dataset& data, std::uint64_t seed);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace evq
