#include <benchmark/benchmark.h>

#include <vector>

#include "evq/losses.hpp"
#include "evq/metrics.hpp"
#include "evq/quantization.hpp"
#include "evq/rng.hpp"
#include "evq/tensor.hpp"

namespace {

evq::Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, bool grad = false) {
  evq::SplitMix64 rng(seed);
  std::vector<double> v(r * c);
  for (auto& x : v) x = 2.0 * rng.uniform() - 1.0;
  return evq::Tensor::from({r, c}, v, grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor(n, n, 1), b = random_tensor(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(evq::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    const auto a = random_tensor(n, n, 1, true), b = random_tensor(n, n, 2, true);
    evq::sum(evq::relu(evq::matmul(a, b))).backward();
    benchmark::DoNotOptimize(a.grad());
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(64);

void BM_EkdLoss(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto t = evq::l2_normalize(random_tensor(n, 16, 3));
  const auto s = evq::l2_normalize(random_tensor(n, 16, 4));
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i / 2);
  const evq::EkdConfig cfg{100.0, 100.0};
  for (auto _ : state) benchmark::DoNotOptimize(evq::ekd_loss(t, s, labels, cfg));
}
BENCHMARK(BM_EkdLoss)->Arg(16)->Arg(64);

void BM_FakeQuant(benchmark::State& state) {
  const auto x = random_tensor(256, 256, 5);
  const auto p = evq::QuantParams::make(static_cast<int>(state.range(0)), true, 1.0 / 7.0);
  for (auto _ : state) benchmark::DoNotOptimize(evq::fake_quant(x, p));
  state.SetItemsProcessed(state.iterations() * 256 * 256);
}
BENCHMARK(BM_FakeQuant)->Arg(4)->Arg(8);

void BM_TprAtFpr(benchmark::State& state) {
  evq::SplitMix64 rng(6);
  evq::ScoredPairs sp;
  for (int i = 0; i < 2000; ++i) sp.pos.push_back(rng.uniform());
  for (int i = 0; i < 10000; ++i) sp.neg.push_back(rng.uniform() - 0.3);
  for (auto _ : state) benchmark::DoNotOptimize(evq::tpr_at_fpr(sp, 1e-2));
}
BENCHMARK(BM_TprAtFpr);

}  // namespace

BENCHMARK_MAIN();
