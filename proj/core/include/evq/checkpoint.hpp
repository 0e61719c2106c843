#pragma once

// EQCK1 checkpoint files: "EQCK1\n", one JSON metadata line, then the raw
// little-endian float32 arrays concatenated in the declared order. The
// metadata carries the topology, array shapes, quantizers, pruning mask,
// provenance and the SHA-256 of the array payload.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evq/model.hpp"
#include "evq/quantization.hpp"
#include "evq/tensor.hpp"

namespace evq {

inline constexpr int kCheckpointVersion = 1;

struct ParamArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct QuantState {
  int w_bits = 32;
  int a_bits = 32;
  std::vector<QuantParams> weight;
  std::vector<QuantParams> activation;
};

/// Original indices of the channels kept in each hidden layer.
using PruneMask = std::vector<std::vector<std::size_t>>;

struct Provenance {
  std::string stage;
  nlohmann::json config = nlohmann::json::object();
  std::string dataset_digest;
  std::string parent_digest;  // checkpoint this one was derived from
  std::uint64_t steps = 0;
  std::uint64_t train_images = 0;
};

struct Checkpoint {
  std::vector<std::size_t> widths;  // input, hidden..., embedding
  std::size_t head_classes = 0;     // 0 when no classifier head is stored
  std::vector<ParamArray> arrays;
  std::optional<QuantState> quant;
  std::optional<PruneMask> prune_mask;
  Provenance provenance;

  /// Array shapes against the topology; throws kCheckpoint naming the layer.
  void validate() const;
  std::size_t embedding_param_count() const;
  /// SHA-256 of the array payload.
  std::string payload_digest() const;
  /// SHA-256 of the complete serialized file.
  std::string file_digest() const;
  std::string serialize() const;
};

/// Parameters are rounded to float32 here, which is the precision they are
/// stored at.
Checkpoint make_checkpoint(const EmbeddingNet& net, const ArcFaceHead* head, Provenance provenance);

EmbeddingNet to_net(const Checkpoint& c, bool requires_grad);
std::optional<ArcFaceHead> to_head(const Checkpoint& c, bool requires_grad);
/// Network plus its quantizers (identity when the checkpoint carries none).
QuantizedModel to_quantized_model(const Checkpoint& c, bool requires_grad);

/// Throws kCheckpoint naming the first layer whose width differs.
void require_topology(const Checkpoint& c, const std::vector<std::size_t>& widths);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evq
