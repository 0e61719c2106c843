#pragma once

// Multilayer-perceptron embedding network: affine layers with ReLU between
// them and a linear embedding output. Weights are stored [in x out] so a
// forward pass is x * W + b.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "evq/tensor.hpp"

namespace evq {

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

class EmbeddingNet {
 public:
  EmbeddingNet() = default;
  /// He-normal weights drawn from `seed`, zero biases. `widths` lists the
  /// input dimension, every hidden width, and the embedding dimension.
  EmbeddingNet(std::vector<std::size_t> widths, std::uint64_t seed);
  explicit EmbeddingNet(std::vector<Linear> layers);

  /// Per-layer transforms applied to the layer input and to the weight right
  /// before the affine map. Used by fake quantization.
  struct Hooks {
    std::function<Tensor(std::size_t layer, const Tensor& input)> input;
    std::function<Tensor(std::size_t layer, const Tensor& weight)> weight;
  };

  /// Raw (unnormalized) embeddings for a batch [n x input_dim].
  Tensor forward(const Tensor& x, const Hooks& hooks = {}) const;

  std::vector<std::size_t> widths() const;
  std::size_t input_dim() const;
  std::size_t embedding_dim() const;
  std::size_t layer_count() const { return layers_.size(); }
  std::size_t parameter_count() const;

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }
  std::vector<Tensor> parameters() const;

  /// Deep copy whose leaves carry the requested requires_grad flag.
  EmbeddingNet clone(bool requires_grad) const;

 private:
  std::vector<Linear> layers_;
};

/// Class-weight matrix for the angular-margin classifier, [classes x dim].
struct ArcFaceHead {
  Tensor weight;

  static ArcFaceHead random(std::size_t classes, std::size_t dim, std::uint64_t seed);
  ArcFaceHead clone(bool requires_grad) const { return {weight.clone_leaf(requires_grad)}; }
};

}  // namespace evq
