#include "evq/quantization.hpp"

#include <algorithm>
#include <cmath>

#include "evq/error.hpp"

namespace evq {

namespace {

void validate_bits(int bits) {
  if (bits < kMinQuantBits || bits > kMaxQuantBits) {
    throw Error(ErrorKind::kContract, "quantizer bit-width " + std::to_string(bits) +
                                          " outside [" + std::to_string(kMinQuantBits) + ", " +
                                          std::to_string(kMaxQuantBits) + "]");
  }
}

// std::nearbyint honours the current rounding mode, which defaults to
// round-to-nearest-even.
double round_half_even(double v) { return std::nearbyint(v); }

}  // namespace

QuantParams QuantParams::make(int bits, bool symmetric, double scale, int zero_point) {
  validate_bits(bits);
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw Error(ErrorKind::kContract, "quantizer scale must be positive and finite");
  }
  QuantParams p;
  p.bits = bits;
  p.symmetric = symmetric;
  p.scale = scale;
  if (symmetric) {
    p.q_max = (1 << (bits - 1)) - 1;
    p.q_min = -p.q_max;
    if (zero_point != 0) throw Error(ErrorKind::kContract, "symmetric quantizer with nonzero zero-point");
  } else {
    p.q_min = 0;
    p.q_max = (1 << bits) - 1;
    if (zero_point < p.q_min || zero_point > p.q_max) {
      throw Error(ErrorKind::kContract, "zero-point " + std::to_string(zero_point) + " outside [" +
                                            std::to_string(p.q_min) + ", " + std::to_string(p.q_max) + "]");
    }
  }
  p.zero_point = zero_point;
  return p;
}

void to_json(nlohmann::json& j, const QuantParams& p) {
  j = nlohmann::json{{"b", p.bits}, {"symmetric", p.symmetric}, {"scale", p.scale}, {"z", p.zero_point}};
}

void from_json(const nlohmann::json& j, QuantParams& p) {
  p = QuantParams::make(j.at("b").get<int>(), j.at("symmetric").get<bool>(), j.at("scale").get<double>(),
                        j.at("z").get<int>());
}

void CalibrationObserver::observe(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kCalibration, "non-finite value during calibration");
  }
  for (double v : values) {
    min_ = std::min(min_, v);
    max_ = std::max(max_, v);
  }
  count_ += values.size();
}

QuantParams finalize(const CalibrationObserver& obs, int bits, bool symmetric) {
  if (obs.count() == 0) throw Error(ErrorKind::kEmptyCalibration, "observer has seen no values");
  validate_bits(bits);
  if (symmetric) {
    const int q_max = (1 << (bits - 1)) - 1;
    const double range = std::max(std::abs(obs.min()), std::abs(obs.max()));
    return QuantParams::make(bits, true, std::max(range / q_max, kMinQuantScale), 0);
  }
  const int q_min = 0;
  const int q_max = (1 << bits) - 1;
  const double scale = std::max((obs.max() - obs.min()) / (q_max - q_min), kMinQuantScale);
  const double z = std::clamp(round_half_even(q_min - obs.min() / scale), double(q_min), double(q_max));
  return QuantParams::make(bits, false, scale, static_cast<int>(z));
}

double fake_quant_value(double x, const QuantParams& p) {
  const double q = std::clamp(round_half_even(x / p.scale) + p.zero_point, double(p.q_min), double(p.q_max));
  return p.scale * (q - p.zero_point);
}

Tensor fake_quant(const Tensor& x, const QuantParams& p) {
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fake_quant_value(X[i], p);
  auto xn = x.node();
  const double lo = p.lower();
  const double hi = p.upper();
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [xn, lo, hi](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                               const auto& X = xn->value;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (X[i] >= lo && X[i] <= hi) (*gin[0])[i] += g[i];
                             });
}

double estimate_model_size(std::uint64_t param_count, int w_bits) {
  if (param_count == 0) throw Error(ErrorKind::kContract, "model size of an empty model");
  if (w_bits < kMinQuantBits || w_bits > 32) {
    throw Error(ErrorKind::kContract, "weight bit-width " + std::to_string(w_bits) + " outside [2, 32]");
  }
  return static_cast<double>(param_count) * w_bits / 8.0 / 1e6;
}

QuantizedModel::QuantizedModel(EmbeddingNet net, int w_bits, int a_bits)
    : net_(std::move(net)), w_bits_(w_bits), a_bits_(a_bits) {
  if (w_bits < kMinQuantBits || a_bits < kMinQuantBits) {
    throw Error(ErrorKind::kContract, "bit-widths must be at least " + std::to_string(kMinQuantBits));
  }
  calibrated_ = !quantization_enabled(a_bits_);
  recalibrate_weights();
}

void QuantizedModel::recalibrate_weights() {
  weight_params_.clear();
  if (!quantization_enabled(w_bits_)) return;
  for (const auto& layer : net_.layers()) {
    CalibrationObserver obs;
    obs.observe(layer.weight);
    weight_params_.push_back(finalize(obs, w_bits_, /*symmetric=*/true));
  }
}

void QuantizedModel::calibrate_activations(std::span<const Tensor> batches) {
  if (batches.empty()) throw Error(ErrorKind::kEmptyCalibration, "no calibration batches");
  if (!quantization_enabled(a_bits_)) {
    calibrated_ = true;
    return;
  }
  std::vector<CalibrationObserver> observers(net_.layer_count());
  EmbeddingNet::Hooks hooks;
  hooks.input = [&observers](std::size_t layer, const Tensor& in) {
    observers[layer].observe(in);
    return in;
  };
  if (quantization_enabled(w_bits_)) {
    hooks.weight = [this](std::size_t layer, const Tensor& w) { return fake_quant(w, weight_params_[layer]); };
  }
  for (const auto& batch : batches) net_.forward(batch.detach(), hooks);
  activation_params_.clear();
  for (const auto& obs : observers) activation_params_.push_back(finalize(obs, a_bits_, /*symmetric=*/false));
  calibrated_ = true;
}

void QuantizedModel::set_params(std::vector<QuantParams> weight, std::vector<QuantParams> activation) {
  const std::size_t expect_w = quantization_enabled(w_bits_) ? net_.layer_count() : 0;
  const std::size_t expect_a = quantization_enabled(a_bits_) ? net_.layer_count() : 0;
  if (weight.size() != expect_w || activation.size() != expect_a) {
    throw Error(ErrorKind::kCheckpoint, "quantizer count does not match the network's quantizable sites");
  }
  for (const auto& p : weight)
    if (p.bits != w_bits_ || !p.symmetric) throw Error(ErrorKind::kCheckpoint, "weight quantizer mismatch");
  for (const auto& p : activation)
    if (p.bits != a_bits_ || p.symmetric) throw Error(ErrorKind::kCheckpoint, "activation quantizer mismatch");
  weight_params_ = std::move(weight);
  activation_params_ = std::move(activation);
  calibrated_ = true;
}

Tensor QuantizedModel::forward(const Tensor& x) const {
  if (!calibrated_) throw Error(ErrorKind::kContract, "quantized forward before activation calibration");
  EmbeddingNet::Hooks hooks;
  if (quantization_enabled(a_bits_)) {
    hooks.input = [this](std::size_t layer, const Tensor& in) { return fake_quant(in, activation_params_[layer]); };
  }
  if (quantization_enabled(w_bits_)) {
    hooks.weight = [this](std::size_t layer, const Tensor& w) { return fake_quant(w, weight_params_[layer]); };
  }
  return net_.forward(x, hooks);
}

QuantizedModel QuantizedModel::clone(bool requires_grad) const {
  QuantizedModel out = *this;
  out.net_ = net_.clone(requires_grad);
  return out;
}

QuantizedModel quantize_model(const EmbeddingNet& net, int w_bits, int a_bits,
                              std::span<const Tensor> calib_batches) {
  if (calib_batches.empty()) throw Error(ErrorKind::kEmptyCalibration, "empty calibration set");
  QuantizedModel model(net.clone(true), w_bits, a_bits);
  model.calibrate_activations(calib_batches);
  return model;
}

}  // namespace evq
