#include <benchmark/benchmark.h>

#include "kgalign/alignment.hpp"
#include "kgalign/rng.hpp"

namespace kgalign {
namespace {

ScoreMatrix scores(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  ScoreMatrix m(n, n);
  for (auto& v : m.values) v = rng.uniform01();
  return m;
}

void BM_Hungarian(benchmark::State& state) {
  const auto m = scores(static_cast<std::size_t>(state.range(0)), 10);
  for (auto _ : state) benchmark::DoNotOptimize(hungarian_assign(m));
}
BENCHMARK(BM_Hungarian)->RangeMultiplier(4)->Range(16, 1024)->Unit(benchmark::kMillisecond);

void BM_Sinkhorn(benchmark::State& state) {
  const auto m = scores(static_cast<std::size_t>(state.range(0)), 11);
  SinkhornOptions o;
  o.epsilon = static_cast<double>(state.range(1)) / 1000.0;
  std::size_t iterations = 0;
  for (auto _ : state) {
    const auto p = sinkhorn(m, o);
    iterations = p.diagnostics.iterations;
    benchmark::DoNotOptimize(p.plan.values.data());
  }
  state.counters["sweeps"] = static_cast<double>(iterations);
}
BENCHMARK(BM_Sinkhorn)->Args({64, 100})->Args({64, 10})->Args({200, 10})->Args({1000, 50})->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace kgalign
