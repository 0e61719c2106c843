#pragma once

// Dense 64-bit tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto an immutable graph node. Operations that
// touch at least one tensor with requires_grad() record their inputs and a
// backward rule; all other results are plain constants. Only 0-d, 1-d and 2-d
// shapes are exercised by the library, but shapes are stored generically.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace evq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor;

namespace detail {

// Backward rule: given dL/d(output), accumulate into dL/d(input_i). A null
// entry in `input_grads` means that input does not need a gradient.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> input_grads)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // leaf accumulator, sized iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor();

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Builds the result of a custom operation. `backward` is recorded only when
  /// some input requires a gradient. This is how the quantization and loss
  /// modules add ops without touching the engine.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> inputs, detail::BackwardFn backward);

  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t rows() const;  // extent 0 of a 2-d tensor
  std::size_t cols() const;  // extent 1 of a 2-d tensor

  std::span<const double> data() const;
  /// Mutable view for in-place parameter updates. Only valid on leaves.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool is_leaf() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Accumulates d(this)/d(leaf) into every reachable leaf with
  /// requires_grad. `this` must hold exactly one element.
  void backward() const;

  /// Same values, no graph history, no gradient.
  Tensor detach() const;
  /// Deep copy as a fresh leaf.
  Tensor clone_leaf(bool requires_grad) const;

  bool defined() const { return node_ != nullptr; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// ---- differentiable operations ---------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// a[m×n] + bias[n] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& x);
/// Row-wise x / max(‖x‖₂, eps).
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// 1-d tensor of x's flat elements at `indices` (repeats allowed).
Tensor gather(const Tensor& x, std::vector<std::size_t> indices);
/// Mean softmax cross-entropy of logits[n×C] against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// Max over coordinates of |analytic - central difference| /
/// max(1, |analytic|, |numeric|). `f` must return a one-element tensor.
double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                      double h = 1e-5);

}  // namespace evq
