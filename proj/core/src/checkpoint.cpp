#include "evq/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "evq/digest.hpp"
#include "evq/error.hpp"

namespace evq {

namespace {

std::string layer_name(std::size_t l, const char* field) {
  return "layer" + std::to_string(l) + "." + field;
}

std::vector<float> to_float(std::span<const double> values) {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>(values[i]);
  return out;
}

std::vector<double> to_double(const std::vector<float>& values) {
  return {values.begin(), values.end()};
}

std::string payload_bytes(const std::vector<ParamArray>& arrays) {
  std::size_t total = 0;
  for (const auto& a : arrays) total += a.values.size();
  std::string bytes(total * sizeof(float), '\0');
  std::size_t at = 0;
  for (const auto& a : arrays) {
    std::memcpy(bytes.data() + at, a.values.data(), a.values.size() * sizeof(float));
    at += a.values.size() * sizeof(float);
  }
  return bytes;
}

nlohmann::json provenance_json(const Provenance& p) {
  return {{"stage", p.stage},
          {"config", p.config},
          {"dataset_digest", p.dataset_digest},
          {"parent_digest", p.parent_digest},
          {"steps", p.steps},
          {"train_images", p.train_images}};
}

}  // namespace

void Checkpoint::validate() const {
  if (widths.size() < 2) throw Error(ErrorKind::kCheckpoint, "topology needs at least one layer");
  const std::size_t layers = widths.size() - 1;
  const std::size_t expected = 2 * layers + (head_classes > 0 ? 1 : 0);
  if (arrays.size() != expected) {
    throw Error(ErrorKind::kCheckpoint, "expected " + std::to_string(expected) + " arrays, found " +
                                            std::to_string(arrays.size()));
  }
  auto check = [this](std::size_t index, const std::string& name, const Shape& shape) {
    const auto& a = arrays[index];
    if (a.name != name || a.shape != shape || a.values.size() != shape_numel(shape)) {
      throw Error(ErrorKind::kCheckpoint, "shape error in " + name + ": expected " + shape_string(shape) +
                                              ", found " + a.name + " " + shape_string(a.shape));
    }
  };
  for (std::size_t l = 0; l < layers; ++l) {
    check(2 * l, layer_name(l, "weight"), {widths[l], widths[l + 1]});
    check(2 * l + 1, layer_name(l, "bias"), {widths[l + 1]});
  }
  if (head_classes > 0) check(2 * layers, "head.weight", {head_classes, widths.back()});
  if (quant) {
    const auto sites = quantization_enabled(quant->w_bits) ? layers : 0;
    const auto act_sites = quantization_enabled(quant->a_bits) ? layers : 0;
    if (quant->weight.size() != sites || quant->activation.size() != act_sites) {
      throw Error(ErrorKind::kCheckpoint, "quantizer count does not match the topology");
    }
  }
  if (prune_mask) {
    if (prune_mask->size() != layers - 1) throw Error(ErrorKind::kCheckpoint, "prune mask layer count mismatch");
    for (std::size_t l = 0; l + 1 < layers; ++l) {
      if ((*prune_mask)[l].size() != widths[l + 1]) {
        throw Error(ErrorKind::kCheckpoint, "prune mask for layer " + std::to_string(l) + " lists " +
                                                std::to_string((*prune_mask)[l].size()) + " channels, width is " +
                                                std::to_string(widths[l + 1]));
      }
    }
  }
}

std::size_t Checkpoint::embedding_param_count() const {
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) total += widths[l] * widths[l + 1] + widths[l + 1];
  return total;
}

std::string Checkpoint::payload_digest() const { return sha256_hex(payload_bytes(arrays)); }

std::string Checkpoint::file_digest() const { return sha256_hex(serialize()); }

std::string Checkpoint::serialize() const {
  validate();
  nlohmann::json arrays_meta = nlohmann::json::array();
  for (const auto& a : arrays) arrays_meta.push_back({{"name", a.name}, {"shape", a.shape}});
  nlohmann::json quant_meta = nullptr;
  if (quant) {
    quant_meta = {{"w_bits", quant->w_bits},
                  {"a_bits", quant->a_bits},
                  {"weight", quant->weight},
                  {"activation", quant->activation}};
  }
  nlohmann::json prune_meta = nullptr;
  if (prune_mask) prune_meta = *prune_mask;
  const std::string payload = payload_bytes(arrays);
  nlohmann::json meta{{"version", kCheckpointVersion},
                      {"topology", {{"widths", widths}, {"head_classes", head_classes}}},
                      {"arrays", arrays_meta},
                      {"quant", quant_meta},
                      {"prune_mask", prune_meta},
                      {"provenance", provenance_json(provenance)},
                      {"payload_sha256", sha256_hex(payload)}};
  return "EQCK1\n" + meta.dump() + "\n" + payload;
}

Checkpoint make_checkpoint(const EmbeddingNet& net, const ArcFaceHead* head, Provenance provenance) {
  Checkpoint c;
  c.widths = net.widths();
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    const auto& layer = net.layers()[l];
    c.arrays.push_back({layer_name(l, "weight"), layer.weight.shape(), to_float(layer.weight.data())});
    c.arrays.push_back({layer_name(l, "bias"), layer.bias.shape(), to_float(layer.bias.data())});
  }
  if (head != nullptr) {
    c.head_classes = head->weight.rows();
    c.arrays.push_back({"head.weight", head->weight.shape(), to_float(head->weight.data())});
  }
  c.provenance = std::move(provenance);
  c.validate();
  return c;
}

EmbeddingNet to_net(const Checkpoint& c, bool requires_grad) {
  c.validate();
  std::vector<Linear> layers;
  for (std::size_t l = 0; l + 1 < c.widths.size(); ++l) {
    const auto& w = c.arrays[2 * l];
    const auto& b = c.arrays[2 * l + 1];
    layers.push_back({Tensor::from(w.shape, to_double(w.values), requires_grad),
                      Tensor::from(b.shape, to_double(b.values), requires_grad)});
  }
  return EmbeddingNet(std::move(layers));
}

std::optional<ArcFaceHead> to_head(const Checkpoint& c, bool requires_grad) {
  if (c.head_classes == 0) return std::nullopt;
  const auto& h = c.arrays.back();
  return ArcFaceHead{Tensor::from(h.shape, to_double(h.values), requires_grad)};
}

QuantizedModel to_quantized_model(const Checkpoint& c, bool requires_grad) {
  if (!c.quant) return QuantizedModel(to_net(c, requires_grad), 32, 32);
  QuantizedModel model(to_net(c, requires_grad), c.quant->w_bits, c.quant->a_bits);
  model.set_params(c.quant->weight, c.quant->activation);
  return model;
}

void require_topology(const Checkpoint& c, const std::vector<std::size_t>& widths) {
  if (c.widths.size() != widths.size()) {
    throw Error(ErrorKind::kCheckpoint, "checkpoint has " + std::to_string(c.widths.size() - 1) +
                                            " layers, expected " + std::to_string(widths.size() - 1));
  }
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    if (c.widths[l] != widths[l] || c.widths[l + 1] != widths[l + 1]) {
      throw Error(ErrorKind::kCheckpoint, "shape error in " + layer_name(l, "weight") + ": checkpoint has [" +
                                              std::to_string(c.widths[l]) + "x" + std::to_string(c.widths[l + 1]) +
                                              "], expected [" + std::to_string(widths[l]) + "x" +
                                              std::to_string(widths[l + 1]) + "]");
    }
  }
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = c.serialize();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
  auto fail = [&origin](const std::string& msg) { return Error(ErrorKind::kCheckpoint, origin + ": " + msg); };
  if (bytes.rfind("EQCK1\n", 0) != 0) throw fail("not an EQCK1 checkpoint");
  const auto header_end = bytes.find('\n', 6);
  if (header_end == std::string::npos) throw fail("truncated metadata line");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.substr(6, header_end - 6));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed metadata: ") + e.what());
  }
  Checkpoint c;
  try {
    const int version = meta.at("version").get<int>();
    if (version != kCheckpointVersion) throw fail("unknown checkpoint version " + std::to_string(version));
    c.widths = meta.at("topology").at("widths").get<std::vector<std::size_t>>();
    c.head_classes = meta.at("topology").at("head_classes").get<std::size_t>();
    std::size_t offset = header_end + 1;
    const std::size_t payload_start = offset;
    for (const auto& a : meta.at("arrays")) {
      ParamArray arr;
      arr.name = a.at("name").get<std::string>();
      arr.shape = a.at("shape").get<Shape>();
      const std::size_t n = shape_numel(arr.shape);
      if (offset + n * sizeof(float) > bytes.size()) throw fail("truncated payload in " + arr.name);
      arr.values.resize(n);
      std::memcpy(arr.values.data(), bytes.data() + offset, n * sizeof(float));
      offset += n * sizeof(float);
      c.arrays.push_back(std::move(arr));
    }
    if (offset != bytes.size()) throw fail("trailing bytes after payload");
    const std::string digest = sha256_hex(std::string_view(bytes).substr(payload_start));
    if (digest != meta.at("payload_sha256").get<std::string>()) {
      throw Error(ErrorKind::kDigest, origin + ": payload digest mismatch");
    }
    if (!meta.at("quant").is_null()) {
      const auto& q = meta.at("quant");
      c.quant = QuantState{q.at("w_bits").get<int>(), q.at("a_bits").get<int>(),
                           q.at("weight").get<std::vector<QuantParams>>(),
                           q.at("activation").get<std::vector<QuantParams>>()};
    }
    if (!meta.at("prune_mask").is_null()) c.prune_mask = meta.at("prune_mask").get<PruneMask>();
    const auto& p = meta.at("provenance");
    c.provenance.stage = p.at("stage").get<std::string>();
    c.provenance.config = p.at("config");
    c.provenance.dataset_digest = p.at("dataset_digest").get<std::string>();
    c.provenance.parent_digest = p.at("parent_digest").get<std::string>();
    c.provenance.steps = p.at("steps").get<std::uint64_t>();
    c.provenance.train_images = p.at("train_images").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad metadata: ") + e.what());
  }
  c.validate();
  return c;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_checkpoint(ss.str(), path.string());
}

}  // namespace evq
