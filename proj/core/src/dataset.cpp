#include "evq/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "evq/digest.hpp"
#include "evq/error.hpp"
#include "evq/rng.hpp"

namespace evq {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void DatasetSpec::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kSpec, msg); };
  if (n_identities < 2) fail("n_identities must be at least 2");
  if (samples_per_identity < 2) fail("samples_per_identity must be at least 2");
  if (input_dim == 0 || latent_dim == 0) fail("dimensions must be positive");
  if (latent_dim > input_dim) fail("latent_dim must not exceed input_dim");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be finite and non-negative");
  if (renderer_depth < 1) fail("renderer_depth must be at least 1");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"seed", s.seed},
                     {"n_identities", s.n_identities},
                     {"samples_per_identity", s.samples_per_identity},
                     {"holdout_identities", s.holdout_identities},
                     {"input_dim", s.input_dim},
                     {"latent_dim", s.latent_dim},
                     {"noise_sigma", s.noise_sigma},
                     {"renderer_depth", s.renderer_depth}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s.seed = j.value("seed", s.seed);
  s.n_identities = j.value("n_identities", s.n_identities);
  s.samples_per_identity = j.value("samples_per_identity", s.samples_per_identity);
  s.holdout_identities = j.value("holdout_identities", s.holdout_identities);
  s.input_dim = j.value("input_dim", s.input_dim);
  s.latent_dim = j.value("latent_dim", s.latent_dim);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.renderer_depth = j.value("renderer_depth", s.renderer_depth);
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  std::vector<double> values;
  values.reserve(indices.size() * input_dim);
  for (auto i : indices) {
    const auto r = row(i);
    values.insert(values.end(), r.begin(), r.end());
  }
  return Tensor::from({indices.size(), input_dim}, std::move(values));
}

Tensor Dataset::all() const { return Tensor::from({size(), input_dim}, inputs); }

std::size_t Dataset::identity_count() const {
  return std::set<int>(labels.begin(), labels.end()).size();
}

namespace {

std::string float_payload(const Dataset& data) {
  std::string bytes(data.inputs.size() * sizeof(float), '\0');
  for (std::size_t i = 0; i < data.inputs.size(); ++i) {
    const float f = static_cast<float>(data.inputs[i]);
    std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
  }
  return bytes;
}

std::string label_payload(const Dataset& data) {
  std::string bytes(data.labels.size() * sizeof(std::int32_t), '\0');
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    const std::int32_t v = data.labels[i];
    std::memcpy(bytes.data() + i * sizeof(v), &v, sizeof(v));
  }
  return bytes;
}

}  // namespace

std::string Dataset::digest() const { return sha256_hex(float_payload(*this) + label_payload(*this)); }

GeneratedData generate(const DatasetSpec& spec) {
  spec.validate();
  GeneratedData out;
  SplitMix64 render_rng(derive_seed(spec.seed, /*stream=*/1));
  for (std::size_t l = 0; l < spec.renderer_depth; ++l) {
    RendererLayer layer;
    layer.in = l == 0 ? spec.latent_dim : spec.input_dim;
    layer.out = spec.input_dim;
    const double stddev = 1.5 / std::sqrt(static_cast<double>(layer.in));
    layer.weight.resize(layer.in * layer.out);
    for (auto& w : layer.weight) w = stddev * render_rng.normal();
    layer.bias.resize(layer.out);
    for (auto& b : layer.bias) b = 0.2 * render_rng.normal();
    out.renderer.push_back(std::move(layer));
  }

  auto render = [&out](std::vector<double> h) {
    for (const auto& layer : out.renderer) {
      std::vector<double> next(layer.bias);
      for (std::size_t i = 0; i < layer.in; ++i)
        for (std::size_t j = 0; j < layer.out; ++j) next[j] += h[i] * layer.weight[i * layer.out + j];
      for (auto& v : next) v = std::tanh(v);
      h = std::move(next);
    }
    return h;
  };

  const double noise = spec.noise_sigma / std::sqrt(static_cast<double>(spec.latent_dim));
  const std::size_t total = spec.n_identities + spec.holdout_identities;
  out.train.input_dim = out.eval.input_dim = spec.input_dim;
  for (std::size_t id = 0; id < total; ++id) {
    SplitMix64 rng(derive_seed(spec.seed, /*stream=*/2, id));
    std::vector<double> proto(spec.latent_dim);
    double norm = 0.0;
    for (auto& v : proto) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : proto) v /= norm;

    const bool holdout = id >= spec.n_identities;
    Dataset& target = holdout ? out.eval : out.train;
    auto& latents = holdout ? out.eval_latents : out.train_latents;
    const int label = static_cast<int>(holdout ? id - spec.n_identities : id);
    for (std::size_t s = 0; s < spec.samples_per_identity; ++s) {
      std::vector<double> z(proto);
      for (auto& v : z) v += noise * rng.normal();
      latents.insert(latents.end(), z.begin(), z.end());
      for (double x : render(std::move(z))) target.inputs.push_back(static_cast<float>(x));
      target.labels.push_back(label);
    }
  }
  return out;
}

Dataset fraction_split(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorKind::kContract, "fraction must lie in (0, 1]");
  if (fraction == 1.0) return data;
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < data.size(); ++i) by_identity[data.labels[i]].push_back(i);
  std::vector<std::size_t> keep;
  for (auto& [id, rows] : by_identity) {
    const auto n = static_cast<std::size_t>(std::nearbyint(fraction * static_cast<double>(rows.size())));
    SplitMix64 rng(derive_seed(seed, /*stream=*/3, static_cast<std::uint64_t>(id)));
    rng.shuffle(std::span<std::size_t>(rows));
    keep.insert(keep.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n));
  }
  std::sort(keep.begin(), keep.end());
  Dataset out;
  out.input_dim = data.input_dim;
  for (auto i : keep) {
    const auto r = data.row(i);
    out.inputs.insert(out.inputs.end(), r.begin(), r.end());
    out.labels.push_back(data.labels[i]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw Error(ErrorKind::kContract, "batch size must be positive");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  SplitMix64 rng(derive_seed(seed, /*stream=*/4));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t end = std::min(count, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> make_grouped_batches(std::span<const int> labels, std::size_t batch_size,
                                                           std::size_t group, std::uint64_t seed) {
  if (group == 0) return make_batches(labels.size(), batch_size, seed);
  if (batch_size == 0) throw Error(ErrorKind::kContract, "batch size must be positive");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < labels.size(); ++i) by_id[labels[i]].push_back(i);

  std::vector<std::vector<std::size_t>> groups;
  for (auto& [id, rows] : by_id) {
    SplitMix64 rng(derive_seed(seed, /*stream=*/6, static_cast<std::uint64_t>(id)));
    rng.shuffle(std::span<std::size_t>(rows));
    for (std::size_t start = 0; start < rows.size(); start += group) {
      groups.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(start),
                          rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), start + group)));
    }
  }
  SplitMix64 rng(derive_seed(seed, /*stream=*/7));
  rng.shuffle(std::span<std::vector<std::size_t>>(groups));

  std::vector<std::size_t> order;
  order.reserve(labels.size());
  for (const auto& g : groups) order.insert(order.end(), g.begin(), g.end());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
  }
  return batches;
}

namespace {

struct PairKey {
  std::vector<std::size_t> a, b;
  bool operator==(const PairKey&) const = default;
};

struct PairKeyHash {
  std::size_t operator()(const PairKey& k) const {
    std::uint64_t h = 0x243F6A8885A308D3ULL;
    for (auto v : k.a) h = mix64(h ^ v);
    h = mix64(h ^ 0xFFFF);
    for (auto v : k.b) h = mix64(h ^ v);
    return static_cast<std::size_t>(h);
  }
};

PairKey canonical(std::vector<std::size_t> a, std::vector<std::size_t> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (b < a) std::swap(a, b);
  return {std::move(a), std::move(b)};
}

// k distinct members of `pool` in sampled order.
std::vector<std::size_t> sample_distinct(const std::vector<std::size_t>& pool, std::size_t k, SplitMix64& rng) {
  std::vector<std::size_t> copy(pool);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(copy.size() - i));
    std::swap(copy[i], copy[j]);
  }
  copy.resize(k);
  return copy;
}

}  // namespace

std::vector<EvalPair> make_eval_pairs(const Dataset& data, std::size_t n_pos, std::size_t n_neg, std::uint64_t seed,
                                      std::size_t templates_per_id) {
  if (templates_per_id == 0) throw Error(ErrorKind::kProtocol, "templates_per_id must be positive");
  const std::size_t t = templates_per_id;
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < data.size(); ++i) by_identity[data.labels[i]].push_back(i);
  std::vector<int> pos_ids, neg_ids;
  for (const auto& [id, rows] : by_identity) {
    if (rows.size() >= 2 * t) pos_ids.push_back(id);
    if (rows.size() >= t) neg_ids.push_back(id);
  }
  if (n_pos > 0 && pos_ids.empty()) throw Error(ErrorKind::kProtocol, "no identity can form a positive pair");
  if (n_neg > 0 && neg_ids.size() < 2) throw Error(ErrorKind::kProtocol, "negative pairs need two identities");

  if (t == 1) {
    std::size_t max_pos = 0;
    for (const auto& [id, rows] : by_identity) max_pos += rows.size() * (rows.size() - 1) / 2;
    const std::size_t max_neg = data.size() * (data.size() - 1) / 2 - max_pos;
    if (n_pos > max_pos || n_neg > max_neg) {
      throw Error(ErrorKind::kProtocol, "requested " + std::to_string(n_pos) + "/" + std::to_string(n_neg) +
                                            " pairs but only " + std::to_string(max_pos) + "/" +
                                            std::to_string(max_neg) + " exist");
    }
  }

  SplitMix64 rng(derive_seed(seed, /*stream=*/5));
  std::unordered_set<PairKey, PairKeyHash> seen;
  std::vector<EvalPair> out;
  out.reserve(n_pos + n_neg);
  auto draw = [&](std::size_t want, bool positive) {
    const std::size_t max_attempts = 100 * want + 10000;
    std::size_t made = 0;
    for (std::size_t attempt = 0; made < want; ++attempt) {
      if (attempt >= max_attempts) {
        throw Error(ErrorKind::kProtocol, "could not draw " + std::to_string(want) + " distinct " +
                                              (positive ? "positive" : "negative") + " pairs");
      }
      EvalPair pair;
      pair.positive = positive;
      if (positive) {
        const auto& rows = by_identity[pos_ids[rng.below(pos_ids.size())]];
        auto chosen = sample_distinct(rows, 2 * t, rng);
        pair.left.assign(chosen.begin(), chosen.begin() + static_cast<std::ptrdiff_t>(t));
        pair.right.assign(chosen.begin() + static_cast<std::ptrdiff_t>(t), chosen.end());
      } else {
        const auto a = rng.below(neg_ids.size());
        auto b = rng.below(neg_ids.size() - 1);
        if (b >= a) ++b;
        pair.left = sample_distinct(by_identity[neg_ids[a]], t, rng);
        pair.right = sample_distinct(by_identity[neg_ids[b]], t, rng);
      }
      if (!seen.insert(canonical(pair.left, pair.right)).second) continue;
      out.push_back(std::move(pair));
      ++made;
    }
  };
  draw(n_pos, true);
  draw(n_neg, false);
  return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data, std::uint64_t seed) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  nlohmann::json header{{"shape", {data.size(), data.input_dim}},
                        {"seed", seed},
                        {"digest", data.digest()},
                        {"labels", data.labels}};
  const std::string payload = float_payload(data);
  os << "EQDS1\n" << header.dump() << '\n';
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::string magic, header_line;
  if (!std::getline(is, magic) || magic != "EQDS1") {
    throw Error(ErrorKind::kCheckpoint, path.string() + ": not an EQDS1 dataset file");
  }
  if (!std::getline(is, header_line)) throw Error(ErrorKind::kCheckpoint, path.string() + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kCheckpoint, path.string() + ": malformed header: " + e.what());
  }
  Dataset data;
  const auto rows = header.at("shape").at(0).get<std::size_t>();
  data.input_dim = header.at("shape").at(1).get<std::size_t>();
  data.labels = header.at("labels").get<std::vector<int>>();
  if (data.labels.size() != rows) throw Error(ErrorKind::kCheckpoint, path.string() + ": label count mismatch");
  std::string payload(rows * data.input_dim * sizeof(float), '\0');
  is.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(is.gcount()) != payload.size() || is.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorKind::kCheckpoint, path.string() + ": payload size does not match header shape");
  }
  data.inputs.resize(rows * data.input_dim);
  for (std::size_t i = 0; i < data.inputs.size(); ++i) {
    float f;
    std::memcpy(&f, payload.data() + i * sizeof(float), sizeof(float));
    data.inputs[i] = f;
  }
  if (data.digest() != header.at("digest").get<std::string>()) {
    throw Error(ErrorKind::kDigest, path.string() + ": content digest mismatch");
  }
  return data;
}

}  // namespace evq
