#include <benchmark/benchmark.h>

#include "bench_common.hpp"
#include "kgalign/retrieval.hpp"

namespace kgalign {
namespace {

void BM_ExactTopkBatched(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 64, queries = 256;
  Rng rng(1);
  const auto index = VectorIndex::build(bench::ids_for(n, "t"), bench::unit_rows(rng, n, d));
  const auto q = bench::unit_rows(rng, queries, d);
  const auto sources = bench::ids_for(queries, "s");
  const auto threads = static_cast<std::size_t>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(topk_all(index, sources, q, 10, threads));
  state.SetItemsProcessed(state.iterations() * queries);
}
BENCHMARK(BM_ExactTopkBatched)->Args({1000, 1})->Args({10000, 1})->Args({10000, 4})->UseRealTime()->Unit(benchmark::kMillisecond);

void BM_ExactTopkSingle(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const auto index = VectorIndex::build(bench::ids_for(n, "t"), bench::unit_rows(rng, n, 64));
  const auto q = bench::unit_rows(rng, 1, 64);
  for (auto _ : state) benchmark::DoNotOptimize(topk(index, "s", q.row(0), 10));
}
BENCHMARK(BM_ExactTopkSingle)->Arg(1000)->Arg(10000)->Unit(benchmark::kMicrosecond);

void BM_HnswBuild(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const auto ids = bench::ids_for(n, "t");
  const auto vectors = bench::unit_rows(rng, n, 64);
  for (auto _ : state) {
    benchmark::DoNotOptimize(VectorIndex::build(ids, vectors, IndexKind::kApproximate));
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_HnswBuild)->Arg(2000)->Arg(10000)->Unit(benchmark::kMillisecond)->Iterations(1);

void BM_HnswSearch(benchmark::State& state) {
  const std::size_t n = 10000;
  Rng rng(4);
  HnswParams p;
  p.ef_search = static_cast<std::uint32_t>(state.range(0));
  const auto index = VectorIndex::build(bench::ids_for(n, "t"), bench::unit_rows(rng, n, 64),
                                        IndexKind::kApproximate, p);
  const auto q = bench::unit_rows(rng, 64, 64);
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(index.search(q.row(i++ % q.rows), 10));
}
BENCHMARK(BM_HnswSearch)->Arg(32)->Arg(128)->Unit(benchmark::kMicrosecond);

}  // namespace
}  // namespace kgalign
