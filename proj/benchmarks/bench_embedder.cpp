#include <benchmark/benchmark.h>

#include "bench_common.hpp"

namespace kgalign {
namespace {

std::string verbalized(Rng& rng, std::size_t words) {
  static const char* vocab[] = {"located", "in",      "river",  "city",  "founded", "by",   "population",
                                "is",      "capital", "of",     "north", "region",  "name", "alpine"};
  std::string s;
  for (std::size_t i = 0; i < words; ++i) {
    if (i) s += ' ';
    s += vocab[rng.uniform_below(std::size(vocab))];
  }
  return s;
}

void BM_Featurize(benchmark::State& state) {
  Rng rng(5);
  const auto text = verbalized(rng, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(featurize(text, 3, 1u << 14));
  state.SetBytesProcessed(state.iterations() * text.size());
}
BENCHMARK(BM_Featurize)->Arg(8)->Arg(64)->Arg(256);

void BM_ProjectionEmbed(benchmark::State& state) {
  Rng rng(6);
  const ProjectionModel m(static_cast<std::size_t>(state.range(0)), FeaturizerOptions{}, true, 0.05, 7);
  const auto f = featurize(verbalized(rng, 64), FeaturizerOptions{});
  for (auto _ : state) benchmark::DoNotOptimize(m.encode(f));
}
BENCHMARK(BM_ProjectionEmbed)->Arg(64)->Arg(256);

void BM_ContrastiveLoss(benchmark::State& state) {
  Rng rng(8);
  const ProjectionModel m(64, FeaturizerOptions{}, true, 0.05, 9);
  const auto u = featurize(verbalized(rng, 40), FeaturizerOptions{});
  const auto v = featurize(verbalized(rng, 40), FeaturizerOptions{});
  std::vector<FeatureVector> negs;
  for (std::int64_t i = 0; i < state.range(0); ++i) negs.push_back(featurize(verbalized(rng, 40), FeaturizerOptions{}));
  for (auto _ : state) benchmark::DoNotOptimize(contrastive_loss(m, u, v, negs));
}
BENCHMARK(BM_ContrastiveLoss)->Arg(8)->Arg(64)->Unit(benchmark::kMicrosecond);

}  // namespace
}  // namespace kgalign
