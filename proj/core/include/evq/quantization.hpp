#pragma once

// Uniform affine fake quantization with min/max calibration and a
// straight-through estimator. Low-bit values are simulated inside 64-bit
// storage; no integer kernels are involved.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "evq/model.hpp"
#include "evq/tensor.hpp"

namespace evq {

inline constexpr int kMinQuantBits = 2;
inline constexpr int kMaxQuantBits = 16;
inline constexpr double kMinQuantScale = 1e-12;

/// Bit-widths above kMaxQuantBits mean "not quantized".
constexpr bool quantization_enabled(int bits) { return bits <= kMaxQuantBits; }

struct QuantParams {
  int bits = 8;
  bool symmetric = true;
  double scale = 1.0;  // Δ
  int zero_point = 0;
  int q_min = -127;
  int q_max = 127;

  /// Integer range for (bits, symmetric): [-2^(b-1)+1, 2^(b-1)-1] or [0, 2^b-1].
  static QuantParams make(int bits, bool symmetric, double scale, int zero_point = 0);

  /// Real interval that maps inside the integer range without clamping.
  double lower() const { return scale * (q_min - zero_point); }
  double upper() const { return scale * (q_max - zero_point); }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

void to_json(nlohmann::json& j, const QuantParams& p);
void from_json(const nlohmann::json& j, QuantParams& p);

class CalibrationObserver {
 public:
  void observe(std::span<const double> values);
  void observe(const Tensor& x) { observe(x.data()); }

  double min() const { return min_; }
  double max() const { return max_; }
  std::size_t count() const { return count_; }

 private:
  double min_ = std::numeric_limits<double>::infinity();
  double max_ = -std::numeric_limits<double>::infinity();
  std::size_t count_ = 0;
};

QuantParams finalize(const CalibrationObserver& obs, int bits, bool symmetric);

/// Δ·(clamp(round_half_even(x/Δ) + z, q_min, q_max) − z).
double fake_quant_value(double x, const QuantParams& p);
/// Elementwise fake quantization; the backward pass lets the gradient through
/// where x ∈ [lower, upper] and blocks it elsewhere.
Tensor fake_quant(const Tensor& x, const QuantParams& p);

/// Decimal megabytes for `param_count` parameters stored at `w_bits` each.
double estimate_model_size(std::uint64_t param_count, int w_bits);

/// A network plus one quantizer per weight site (symmetric) and one per
/// activation site (asymmetric). Activation sites are the inputs of every
/// affine layer.
class QuantizedModel {
 public:
  QuantizedModel() = default;
  QuantizedModel(EmbeddingNet net, int w_bits, int a_bits);

  EmbeddingNet& net() { return net_; }
  const EmbeddingNet& net() const { return net_; }
  int weight_bits() const { return w_bits_; }
  int activation_bits() const { return a_bits_; }
  bool calibrated() const { return calibrated_; }
  const std::vector<QuantParams>& weight_params() const { return weight_params_; }
  const std::vector<QuantParams>& activation_params() const { return activation_params_; }

  /// Re-derives weight quantizers from the live weight values.
  void recalibrate_weights();
  /// Runs `batches` through the weight-quantized network and freezes the
  /// activation ranges. Throws kEmptyCalibration when there is no data.
  void calibrate_activations(std::span<const Tensor> batches);
  /// Installs previously calibrated quantizers (e.g. from a checkpoint).
  void set_params(std::vector<QuantParams> weight, std::vector<QuantParams> activation);

  /// Deep copy with fresh parameter leaves and the same quantizers.
  QuantizedModel clone(bool requires_grad) const;

  /// Raw embeddings through fake-quantized weights and activations.
  Tensor forward(const Tensor& x) const;

 private:
  EmbeddingNet net_;
  int w_bits_ = 32;
  int a_bits_ = 32;
  std::vector<QuantParams> weight_params_;
  std::vector<QuantParams> activation_params_;
  bool calibrated_ = true;
};

/// Post-training quantization of a copy of `net`.
QuantizedModel quantize_model(const EmbeddingNet& net, int w_bits, int a_bits,
                              std::span<const Tensor> calib_batches);

}  // namespace evq
