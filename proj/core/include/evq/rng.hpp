#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace evq {

/// SplitMix64 (Steele, Lea & Flood). The state advances by the golden-gamma
/// constant 0x9E3779B97F4A7C15 and each output is the state passed through
/// the mixer with multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB.
/// Every generated artifact is a pure function of these constants and the
/// seed, so datasets reproduce across platforms and implementations.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; one cached spare per pair.
  double normal();
  /// Uniform integer in [0, bound) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t bound);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// The SplitMix64 output function applied to one word.
std::uint64_t mix64(std::uint64_t z);

/// Independent child seed for (stream, index), e.g. one stream per identity.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace evq
