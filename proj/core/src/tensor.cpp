#include "evq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "evq/error.hpp"

namespace evq {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> values,
                                        bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) throw Error(ErrorKind::kDimension, "zero extent in shape " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw Error(ErrorKind::kDimension, "shape " + shape_string(shape) + " does not hold " +
                                           std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), 0.0);
  return node;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.dim() != 2) {
    throw Error(ErrorKind::kDimension,
                std::string(op) + " expects a 2-d tensor, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::kDimension, std::string(op) + ": shapes " + shape_string(a.shape()) +
                                           " and " + shape_string(b.shape()) + " differ");
  }
}

}  // namespace

Tensor::Tensor() = default;

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                           detail::BackwardFn backward) {
  const bool any_grad = std::any_of(inputs.begin(), inputs.end(),
                                    [](const Tensor& t) { return t.requires_grad(); });
  auto node = make_node(std::move(shape), std::move(values), false);
  if (any_grad) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  require_2d(*this, "rows");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_2d(*this, "cols");
  return node_->shape[1];
}

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw Error(ErrorKind::kContract, "in-place update of a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw Error(ErrorKind::kContract, "item() on tensor of shape " + shape_string(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return node_->value[row * cols() + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->inputs.empty(); }

std::span<const double> Tensor::grad() const {
  if (!requires_grad() || !is_leaf()) {
    throw Error(ErrorKind::kContract, "grad() is only kept on leaves with requires_grad");
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(make_node(node_->shape, node_->value, false));
}

Tensor Tensor::clone_leaf(bool requires_grad) const {
  return Tensor(make_node(node_->shape, node_->value, requires_grad));
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw Error(ErrorKind::kContract,
                "backward() needs a scalar loss, got shape " + shape_string(shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<detail::Node*, std::vector<double>> grads;
  grads.reserve(order.size());
  grads[node_.get()] = {1.0};
  std::vector<std::vector<double>*> input_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;  // not on a path from the loss
    // References into an unordered_map survive rehashing; iterators do not.
    const std::vector<double>& grad_out = found->second;
    if (node->inputs.empty()) {
      auto& acc = node->grad;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grad_out[i];
      continue;
    }
    input_grads.clear();
    for (auto& in : node->inputs) {
      if (!in->requires_grad) {
        input_grads.push_back(nullptr);
        continue;
      }
      auto& g = grads[in.get()];
      if (g.empty()) g.assign(in->value.size(), 0.0);
      input_grads.push_back(&g);
    }
    node->backward(grad_out, input_grads);
    grads.erase(node);
  }
}

// ---- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw Error(ErrorKind::kDimension, "matmul: inner dimensions of " + shape_string(a.shape()) +
                                           " and " + shape_string(b.shape()) + " disagree");
  }
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor::make_result(
      {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto& A = an->value;
        const auto& B = bn->value;
        if (auto* ga = gin[0]) {  // g · Bᵀ
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
              (*ga)[i * k + p] += acc;
            }
          }
        }
        if (auto* gb = gin[1]) {  // Aᵀ · g
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              double* row = gb->data() + p * n;
              for (std::size_t j = 0; j < n; ++j) row[j] += aip * g[i * n + j];
            }
          }
        }
      });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  const auto A = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return Tensor::make_result({n, m}, std::move(out), {a},
                             [m, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                               auto& ga = *gin[0];
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                             });
}

namespace {

template <typename Fwd, typename DA, typename DB>
Tensor elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  require_same_shape(a, b, name);
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i], B[i]);
  auto an = a.node();
  auto bn = b.node();
  return Tensor::make_result(
      a.shape(), std::move(out), {a, b},
      [an, bn, da, db](std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto& A = an->value;
        const auto& B = bn->value;
        if (auto* ga = gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * da(A[i], B[i]);
        if (auto* gb = gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * db(A[i], B[i]);
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n || bias.dim() != 1) {
    throw Error(ErrorKind::kDimension, "add_row: bias " + shape_string(bias.shape()) +
                                           " does not match " + shape_string(a.shape()));
  }
  const auto A = a.data();
  const auto B = bias.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = A[i * n + j] + B[j];
  return Tensor::make_result(
      {m, n}, std::move(out), {a, bias},
      [m, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
        if (auto* ga = gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = gin[1])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
      });
}

Tensor scale(const Tensor& a, double factor) {
  const auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * factor;
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [factor](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * factor;
                             });
}

Tensor relu(const Tensor& x) {
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] > 0.0 ? X[i] : 0.0;
  auto xn = x.node();
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [xn](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                               const auto& X = xn->value;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (X[i] > 0.0) (*gin[0])[i] += g[i];
                             });
}

Tensor l2_normalize(const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorKind::kContract, "l2_normalize: eps must be positive");
  require_2d(x, "l2_normalize");
  const std::size_t m = x.rows(), n = x.cols();
  const auto X = x.data();
  std::vector<double> out(m * n);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += X[i * n + j] * X[i * n + j];
    norms[i] = std::sqrt(ss);
    const double d = std::max(norms[i], eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] / d;
  }
  auto xn = x.node();
  return Tensor::make_result(
      {m, n}, out, {x},
      [xn, out, norms, eps, m, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < m; ++i) {
          if (norms[i] < eps) {  // clamped: y = x / eps
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] / eps;
            continue;
          }
          // dy/dx = (I - y yᵀ) / ‖x‖
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * out[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            gx[i * n + j] += (g[i * n + j] - dot * out[i * n + j]) / norms[i];
        }
      });
}

Tensor sum(const Tensor& x) {
  const auto X = x.data();
  const double total = std::accumulate(X.begin(), X.end(), 0.0);
  return Tensor::make_result({}, {total}, {x},
                             [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                               for (auto& v : *gin[0]) v += g[0];
                             });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor gather(const Tensor& x, std::vector<std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorKind::kDimension, "gather: empty index list");
  const auto X = x.data();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= X.size()) {
      throw Error(ErrorKind::kDimension, "gather: index " + std::to_string(indices[i]) +
                                             " out of range for " + shape_string(x.shape()));
    }
    out[i] = X[indices[i]];
  }
  const std::size_t count = indices.size();
  return Tensor::make_result(
      {count}, std::move(out), {x},
      [idx = std::move(indices)](std::span<const double> g, std::span<std::vector<double>* const> gin) {
        for (std::size_t i = 0; i < idx.size(); ++i) (*gin[0])[idx[i]] += g[i];
      });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_2d(logits, "softmax_cross_entropy");
  const std::size_t m = logits.rows(), c = logits.cols();
  if (labels.size() != m) {
    throw Error(ErrorKind::kDimension, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                           " labels for " + std::to_string(m) + " rows");
  }
  const auto L = logits.data();
  std::vector<double> probs(m * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error(ErrorKind::kLabel, "label " + std::to_string(y) + " outside [0, " +
                                         std::to_string(c) + ")");
    }
    const double* row = L.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - mx) / z;
    loss += std::log(z) + mx - row[y];
  }
  loss /= static_cast<double>(m);
  std::vector<int> ys(labels.begin(), labels.end());
  return Tensor::make_result(
      {}, {loss}, {logits},
      [probs = std::move(probs), ys = std::move(ys), m, c](std::span<const double> g,
                                                          std::span<std::vector<double>* const> gin) {
        auto& gl = *gin[0];
        const double w = g[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double target = static_cast<std::size_t>(ys[i]) == j ? 1.0 : 0.0;
            gl[i * c + j] += w * (probs[i * c + j] - target);
          }
        }
      });
}

double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw Error(ErrorKind::kContract, "gradient_check: h must be positive");
  Tensor leaf = x.clone_leaf(true);
  f(leaf).backward();
  const auto analytic = leaf.grad();

  std::vector<double> probe(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = f(Tensor::from(x.shape(), probe)).item();
    probe[i] = saved - h;
    const double down = f(Tensor::from(x.shape(), probe)).item();
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace evq
