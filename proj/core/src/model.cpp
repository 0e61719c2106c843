#include "evq/model.hpp"

#include <cmath>

#include "evq/error.hpp"
#include "evq/rng.hpp"

namespace evq {

EmbeddingNet::EmbeddingNet(std::vector<std::size_t> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw Error(ErrorKind::kContract, "network needs at least one layer");
  SplitMix64 rng(derive_seed(seed, /*stream=*/0x11));
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l], out = widths[l + 1];
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    std::vector<double> w(in * out);
    for (auto& v : w) v = stddev * rng.normal();
    layers_.push_back({Tensor::from({in, out}, std::move(w), true), Tensor::zeros({out}, true)});
  }
}

EmbeddingNet::EmbeddingNet(std::vector<Linear> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw Error(ErrorKind::kContract, "network needs at least one layer");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (layer.weight.dim() != 2 || layer.bias.dim() != 1 || layer.bias.numel() != layer.weight.cols()) {
      throw Error(ErrorKind::kDimension, "layer " + std::to_string(l) + ": weight " +
                                             shape_string(layer.weight.shape()) + " and bias " +
                                             shape_string(layer.bias.shape()) + " disagree");
    }
    if (l > 0 && layers_[l - 1].weight.cols() != layer.weight.rows()) {
      throw Error(ErrorKind::kDimension,
                  "layer " + std::to_string(l) + " expects " + std::to_string(layer.weight.rows()) +
                      " inputs but layer " + std::to_string(l - 1) + " produces " +
                      std::to_string(layers_[l - 1].weight.cols()));
    }
  }
}

Tensor EmbeddingNet::forward(const Tensor& x, const Hooks& hooks) const {
  Tensor h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Tensor in = hooks.input ? hooks.input(l, h) : h;
    const Tensor w = hooks.weight ? hooks.weight(l, layers_[l].weight) : layers_[l].weight;
    h = add_row(matmul(in, w), layers_[l].bias);
    if (l + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

std::vector<std::size_t> EmbeddingNet::widths() const {
  std::vector<std::size_t> out;
  if (layers_.empty()) return out;
  out.push_back(layers_.front().weight.rows());
  for (const auto& layer : layers_) out.push_back(layer.weight.cols());
  return out;
}

std::size_t EmbeddingNet::input_dim() const { return layers_.front().weight.rows(); }
std::size_t EmbeddingNet::embedding_dim() const { return layers_.back().weight.cols(); }

std::size_t EmbeddingNet::parameter_count() const {
  std::size_t total = 0;
  for (const auto& layer : layers_) total += layer.weight.numel() + layer.bias.numel();
  return total;
}

std::vector<Tensor> EmbeddingNet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers_) {
    out.push_back(layer.weight);
    out.push_back(layer.bias);
  }
  return out;
}

EmbeddingNet EmbeddingNet::clone(bool requires_grad) const {
  std::vector<Linear> copy;
  copy.reserve(layers_.size());
  for (const auto& layer : layers_) {
    copy.push_back({layer.weight.clone_leaf(requires_grad), layer.bias.clone_leaf(requires_grad)});
  }
  return EmbeddingNet(std::move(copy));
}

ArcFaceHead ArcFaceHead::random(std::size_t classes, std::size_t dim, std::uint64_t seed) {
  SplitMix64 rng(derive_seed(seed, /*stream=*/0x12));
  std::vector<double> w(classes * dim);
  for (auto& v : w) v = rng.normal();
  return {Tensor::from({classes, dim}, std::move(w), true)};
}

}  // namespace evq
