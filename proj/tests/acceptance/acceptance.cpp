// Acceptance suite: one PASS/FAIL line per criterion. Exit status is 0 when
// every attainable criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "kgalign/alignment.hpp"
#include "kgalign/binary_io.hpp"
#include "kgalign/embedder.hpp"
#include "kgalign/eval.hpp"
#include "kgalign/kg_store.hpp"
#include "kgalign/log.hpp"
#include "kgalign/pipeline.hpp"
#include "kgalign/reranker.hpp"
#include "kgalign/retrieval.hpp"
#include "kgalign/rng.hpp"
#include "kgalign/synth.hpp"
#include "test_support.hpp"

namespace kgalign {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Pinned tolerances.
constexpr double kGradientTol = 1e-4;
constexpr double kLossTol = 1e-9;
constexpr double kOracleLossTol = 1e-5;
constexpr double kMetricTol = 1e-9;
constexpr double kMarginalTol = 1e-6;
constexpr double kRecallFloor = 0.95;
constexpr double kMrrGain = 0.03;

// ---------------------------------------------------------------------------

Outcome desk_scale() {
  return {false, "needs fine-tuned 7B generators and large encoders on multi-GPU nodes; replaced by the suite below"};
}

double fd_projection(Rng& rng) {
  const std::size_t d = 1 + rng.uniform_below(32);
  const std::uint32_t df = 16 + static_cast<std::uint32_t>(rng.uniform_below(48));
  const ProjectionModel m(d, FeaturizerOptions{3, df}, rng.uniform01() < 0.5, rng.uniform(0.05, 1.0),
                          rng.next());
  const auto u = testing::random_features(rng, df, 4);
  const auto v = testing::random_features(rng, df, 4);
  std::vector<FeatureVector> negs;
  const auto k = 1 + rng.uniform_below(8);
  for (std::size_t i = 0; i < k; ++i) negs.push_back(testing::random_features(rng, df, 4));
  const auto l = contrastive_loss(m, u, v, negs);
  std::vector<double> a, n;
  const double h = 1e-6;
  for (const auto col : l.gradient.columns) {
    for (std::size_t r = 0; r < d; ++r) {
      const ParameterPerturbation p{r, col, h}, q{r, col, -h};
      n.push_back((contrastive_loss(m, u, v, negs, &p).loss - contrastive_loss(m, u, v, negs, &q).loss) / (2 * h));
      a.push_back(l.gradient.at(r, col));
    }
  }
  return testing::gradient_relative_error(a, n);
}

std::string random_text(Rng& rng) {
  std::string s;
  const auto len = 4 + rng.uniform_below(20);
  for (std::size_t i = 0; i < len; ++i) s += static_cast<char>('a' + rng.uniform_below(12));
  return s;
}

double fd_reranker(Rng& rng) {
  MlpScorerConfig cfg;
  cfg.features = {3, 16 + static_cast<std::uint32_t>(rng.uniform_below(17))};
  cfg.hidden = 2 + rng.uniform_below(8);
  cfg.symmetrize = rng.uniform01() < 0.5;
  cfg.seed = rng.next();
  std::shared_ptr<ProjectionModel> encoder;
  if (rng.uniform01() < 0.5) {
    encoder = std::make_shared<ProjectionModel>(1 + rng.uniform_below(32), FeaturizerOptions{3, 64}, true, 0.05,
                                                rng.next());
  }
  const MlpScorer s(cfg, encoder);
  const auto u = s.features_of(random_text(rng));
  const auto v = s.features_of(random_text(rng));
  std::vector<TextFeatures> negs;
  const auto k = 1 + rng.uniform_below(8);
  for (std::size_t i = 0; i < k; ++i) negs.push_back(s.features_of(random_text(rng)));
  const auto l = rerank_loss(s, u, v, negs);
  std::vector<double> a, n;
  const double h = 1e-6;
  for (std::size_t i = 0; i < s.parameter_count(); ++i) {
    const MlpPerturbation p{i, h}, q{i, -h};
    n.push_back((rerank_loss(s, u, v, negs, &p).loss - rerank_loss(s, u, v, negs, &q).loss) / (2 * h));
    a.push_back(l.gradient.at(i));
  }
  return testing::gradient_relative_error(a, n);
}

Outcome gradients() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst_e = 0.0, worst_r = 0.0;
  const int instances = 25;
  for (int i = 0; i < instances; ++i) worst_e = std::max(worst_e, fd_projection(rng));
  for (int i = 0; i < instances; ++i) worst_r = std::max(worst_r, fd_reranker(rng));
  const double secs = seconds_since(t0);
  return {worst_e < kGradientTol && worst_r < kGradientTol && secs < 10.0,
          fmt::format("{} instances each; max rel err embedder {:.2e}, reranker {:.2e}; {:.2f}s", instances, worst_e,
                      worst_r, secs)};
}

Outcome loss_oracles() {
  Rng rng(102);
  bool ok = true;
  std::string why;
  // Embedder loss.
  const ProjectionModel m(8, FeaturizerOptions{3, 64}, true, 0.05, 1);
  const auto u = testing::random_features(rng, 64, 5);
  const auto v = testing::random_features(rng, 64, 5);
  ok &= contrastive_loss(m, u, v, {}).loss == 0.0;
  double worst = 0.0;
  for (const std::size_t k : {1u, 7u, 64u, 110u}) {
    const std::vector<FeatureVector> same(k, v);
    worst = std::max(worst, std::abs(contrastive_loss(m, u, v, same).loss - std::log(k + 1.0)));
  }
  // phi(u) = phi(pos) = e1, phi(neg) = e2 with tau = 1.
  ProjectionModel hand(2, FeaturizerOptions{3, 3}, false, 1.0, 0);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) hand.set_weight(r, c, 0.0f);
  }
  hand.set_weight(0, 0, 1.0f);
  hand.set_weight(0, 1, 1.0f);
  hand.set_weight(1, 2, 1.0f);
  const auto one_hot = [](std::uint32_t c) { return FeatureVector{3, {c}, {1.0f}}; };
  const std::vector<FeatureVector> negs{one_hot(2)};
  const double two = contrastive_loss(hand, one_hot(0), one_hot(1), negs).loss;

  // Reranker loss.
  MlpScorerConfig cfg;
  cfg.features = {3, 64};
  cfg.hidden = 8;
  const MlpScorer s(cfg);
  const auto fu = s.features_of("source");
  const auto fv = s.features_of("target");
  ok &= rerank_loss(s, fu, fv, {}).loss == 0.0;
  const std::vector<TextFeatures> same(110, fv);
  worst = std::max(worst, std::abs(rerank_loss(s, fu, fv, same).loss - std::log(111.0)));
  const double two_direct = softmax_contrastive(std::vector<double>{1.0, 0.0}).loss;

  ok &= worst <= kLossTol && std::abs(two - 0.31326) <= kOracleLossTol && std::abs(two_direct - 0.31326) <= kOracleLossTol;
  why = fmt::format("empty=0 both losses; max |loss - log(k+1)| {:.1e}; two-candidate {:.6f}", worst, two);
  return {ok, why};
}

Outcome retrieval_oracle() {
  Rng rng(103);
  bool ok = true;
  for (int trial = 0; trial < 100 && ok; ++trial) {
    const std::size_t n = 1 + rng.uniform_below(1000);
    const std::size_t d = 1 + rng.uniform_below(64);
    const std::size_t k = 1 + rng.uniform_below(60);
    const auto mat = testing::random_matrix(rng, n, d);
    std::vector<EntityId> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(fmt::format("e{:04}", (i * 7919) % 10000));
    std::set<EntityId> uniq(ids.begin(), ids.end());
    if (uniq.size() != ids.size()) continue;
    const auto index = VectorIndex::build(ids, mat);
    const auto q = testing::random_matrix(rng, 1, d);
    std::vector<std::pair<double, EntityId>> all;
    for (std::size_t i = 0; i < n; ++i) {
      double sc = 0.0;
      for (std::size_t j = 0; j < d; ++j) sc += static_cast<double>(mat.row(i)[j]) * q.row(0)[j];
      all.push_back({sc, ids[i]});
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const auto got = topk(index, "q", q.row(0), k).candidates;
    ok &= got.size() == std::min(k, n);
    for (std::size_t i = 0; ok && i < got.size(); ++i) ok &= got[i].target == all[i].second;
  }

  const std::size_t n = 10000, d = 64, nq = 200;
  const auto data = testing::random_matrix(rng, n, d);
  std::vector<EntityId> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(fmt::format("v{:05}", i));
  HnswParams p;
  p.seed = 7;
  const auto t0 = Clock::now();
  const auto approx = VectorIndex::build(ids, data, IndexKind::kApproximate, p);
  const double build = seconds_since(t0);
  const auto exact = VectorIndex::build(ids, data);
  const auto queries = testing::random_matrix(rng, nq, d);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < nq; ++i) {
    std::set<EntityId> truth;
    for (const auto& c : exact.search(queries.row(i), 10)) truth.insert(c.target);
    for (const auto& c : approx.search(queries.row(i), 10)) hit += truth.count(c.target);
  }
  const double recall = static_cast<double>(hit) / (10.0 * nq);
  return {ok && recall >= kRecallFloor,
          fmt::format("exact top-k {} on 100 instances; HNSW recall@10 {:.4f} on 10k x 64 (build {:.1f}s)",
                      ok ? "matches" : "DIFFERS", recall, build)};
}

Outcome assignment() {
  Rng rng(104);
  int hungarian_ok = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t r = 1 + rng.uniform_below(6), c = 1 + rng.uniform_below(6);
    ScoreMatrix m(r, c);
    for (auto& v : m.values) v = rng.uniform(0.0, 1.0);
    const auto a = hungarian_assign(m);
    double got = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      if (a[i] >= 0) got += m.at(i, static_cast<std::size_t>(a[i]));
    }
    double best = -1e300;
    const bool wide = c >= r;
    std::vector<std::size_t> perm(wide ? c : r);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < std::min(r, c); ++i) s += wide ? m.at(i, perm[i]) : m.at(perm[i], i);
      best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    // Same total: the sums come from the same cells in a possibly different order.
    hungarian_ok += std::abs(got - best) <= 1e-12;
  }

  double worst_violation = 0.0;
  int agree = 0;
  bool converged = true;
  for (int t = 0; t < 100; ++t) {
    ScoreMatrix m(6, 6);
    for (auto& v : m.values) v = rng.uniform(0.0, 1.0);
    SinkhornOptions so;
    so.epsilon = 0.01;
    const auto p = sinkhorn(m, so);
    converged &= p.diagnostics.converged;
    worst_violation = std::max(worst_violation, p.diagnostics.max_marginal_violation);
    agree += harden_plan(p.plan) == hungarian_assign(m);
  }
  return {hungarian_ok == 100 && converged && worst_violation <= kMarginalTol && agree >= 95,
          fmt::format("Hungarian = exhaustive on {}/100; Sinkhorn max marginal violation {:.1e}; hardened = Hungarian "
                      "on {}/100 at eps=0.01",
                      hungarian_ok, worst_violation, agree)};
}

Outcome metric_oracles() {
  const auto ranks = [](std::initializer_list<std::optional<std::size_t>> rs) {
    std::vector<GoldRank> out;
    for (const auto& r : rs) out.push_back({fmt::format("s{}", out.size()), "t", r});
    return out;
  };
  bool ok = true;
  ok &= std::abs(mrr(ranks({1, 2, 4})) - 7.0 / 12.0) <= kMetricTol;
  ok &= std::abs(hits_at_k(ranks({1, 3, 12}), 10) - 2.0 / 3.0) <= kMetricTol;
  const std::vector<AlignedPair> pred{{"a", "1"}, {"b", "2"}, {"c", "9"}};
  const std::vector<EntityPair> gold{{"a", "1"}, {"b", "2"}, {"c", "3"}, {"d", "4"}};
  const auto p = prf1(pred, gold);
  ok &= std::abs(p.precision - 2.0 / 3.0) <= kMetricTol && std::abs(p.recall - 0.5) <= kMetricTol &&
        std::abs(p.f1 - 4.0 / 7.0) <= kMetricTol;
  MetricsReport regular, hard;
  regular.hits_at[1] = 0.994;
  hard.hits_at[1] = 0.993;
  for (const auto& d : compare_settings(regular, hard)) {
    if (d.metric == "hits@1") ok &= std::abs(d.delta + 0.001) <= kMetricTol;
  }
  const bool fixtures = ok;

  Rng rng(105);
  int ordered = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<GoldRank> r;
    const auto n = 1 + rng.uniform_below(50);
    for (std::size_t i = 0; i < n; ++i) {
      std::optional<std::size_t> rank;
      if (rng.uniform01() < 0.85) rank = 1 + rng.uniform_below(100);
      r.push_back({fmt::format("s{}", i), "t", rank});
    }
    const double h1 = hits_at_k(r, 1), m = mrr(r), hinf = hits_at_k(r, kUnboundedK);
    ordered += h1 <= m + 1e-15 && m <= hinf + 1e-15;
  }
  return {fixtures && ordered == 1000,
          fmt::format("fixtures {}; hits@1 <= MRR <= hits@inf on {}/1000 random rankings",
                      fixtures ? "exact" : "WRONG", ordered)};
}

// Shared synthetic workspaces for the end-to-end criteria.
struct Workspace {
  testing::TempDir dir;
};

Outcome clone_end_to_end(const Workspace& ws) {
  SynthOptions o;
  o.entities = 2000;
  o.seed = 11;
  const auto t0 = Clock::now();
  write_synthetic(generate_synthetic(o), ws.dir / "clone");
  PipelineConfig c;
  c.dataset.path = ws.dir / "clone";
  c.output = ws.dir / "clone-run";
  const auto r = run_pipeline(c);
  const double secs = seconds_since(t0);
  const double h1 = r.report->hits_at.at(1);
  return {h1 == 1.0 && r.report->mrr == 1.0 && secs < 60.0,
          fmt::format("2x2000 clone, hash embedder, greedy: Hits@1 {:.4f}, MRR {:.4f}, {:.1f}s", h1, r.report->mrr, secs)};
}

PipelineConfig perturbed_config(const Workspace& ws, const std::string& out) {
  PipelineConfig c;
  c.dataset.path = ws.dir / "perturbed";
  c.output = ws.dir / out;
  c.seed = 1;
  return c;
}

struct TrainedRun {
  PipelineResult result;
};

Outcome training_efficacy(const Workspace& ws, TrainedRun& trained) {
  SynthOptions o;
  o.entities = 2000;
  o.seed = 1;
  o.attribute_dropout = 0.3;
  o.synonym_rate = 0.6;
  write_synthetic(generate_synthetic(o), ws.dir / "perturbed");

  const auto t0 = Clock::now();
  const auto untrained = run_pipeline(perturbed_config(ws, "untrained"));
  auto c = perturbed_config(ws, "trained-a");
  c.embedder.train = true;
  c.reranker.enabled = true;
  trained.result = run_pipeline(c);
  const double secs = seconds_since(t0);

  const auto& curve = *trained.result.embedder_curve;
  const double mrr_gain = curve.validation[curve.best_epoch] - curve.validation[0];
  const double base_h1 = untrained.report->hits_at.at(1);
  const double er_h1 = trained.result.retrieval_report->hits_at.at(1);
  const double ar_h1 = trained.result.report->hits_at.at(1);
  return {base_h1 < 0.9 && mrr_gain >= kMrrGain && ar_h1 >= er_h1,
          fmt::format("untrained Hits@1 {:.4f}; val MRR {:.4f} -> {:.4f} (+{:.4f}, {} negatives from top-{}); test "
                      "Hits@1 {:.4f} -> {:.4f} with reranker ({} negatives); {:.0f}s",
                      base_h1, curve.validation[0], curve.validation[curve.best_epoch], mrr_gain, c.embedder.negatives,
                      c.embedder.pool, er_h1, ar_h1, c.reranker.negatives, secs)};
}

Outcome hard_split() {
  Rng rng(106);
  int ok = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = 5 + rng.uniform_below(400);
    std::vector<double> sims(n);
    std::vector<EntityPair> gold;
    std::map<EntityId, std::string> src_names, tgt_names;
    std::map<std::string, float> value;
    for (std::size_t i = 0; i < n; ++i) {
      sims[i] = static_cast<double>(i) / n + rng.uniform(0.0, 0.5 / n);  // distinct
      gold.push_back({fmt::format("s{:04}", i), fmt::format("t{:04}", i)});
      src_names[gold.back().source] = fmt::format("src name {}", i);
      tgt_names[gold.back().target] = "target";
      value[src_names[gold.back().source]] = static_cast<float>(sims[i]);
    }
    rng.shuffle(std::span(gold));
    std::vector<EntityId> src_ids, tgt_ids;
    for (const auto& p : gold) {
      src_ids.push_back(p.source);
      tgt_ids.push_back(p.target);
    }
    DatasetBundle b{KnowledgeGraph({}, {}, src_ids, src_names), KnowledgeGraph({}, {}, tgt_ids, tgt_names), gold, {}};
    // 1-d embedder: target names map to 1, source names to their similarity.
    const NameEmbedder embed = [&](std::span<const std::string> names) {
      std::vector<std::vector<float>> out;
      for (const auto& nm : names) out.push_back({nm == "target" ? 1.0f : value.at(nm)});
      return out;
    };
    const auto seeds = make_hard_split(b, embed, 9);
    const auto again = make_hard_split(b, embed, 9);

    // Oracle: rank pairs by similarity.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto c) {
      return static_cast<float>(sims[a]) < static_cast<float>(sims[c]);
    });
    const auto n_test = static_cast<std::size_t>(std::llround(0.6 * n));
    const auto n_train = static_cast<std::size_t>(std::llround(0.3 * n));
    std::set<EntityId> want_test;
    for (std::size_t i = 0; i < n_test; ++i) want_test.insert(fmt::format("s{:04}", order[i]));
    std::set<EntityId> got_test;
    for (const auto& p : seeds.pairs_in(Split::kTest)) got_test.insert(p.source);
    ok += got_test == want_test && seeds.count(Split::kTrain) == n_train &&
          seeds.count(Split::kValidation) == n - n_test - n_train && seeds.pairs() == again.pairs();
  }
  return {ok == trials, fmt::format("{}/{} random gold sets: lowest 60% tagged test, rest 30/10, repeatable", ok, trials)};
}

Outcome determinism(const Workspace& ws, const TrainedRun& a) {
  auto c = perturbed_config(ws, "trained-b");
  c.embedder.train = true;
  c.reranker.enabled = true;
  run_pipeline(c);
  bool ok = true;
  std::string which;
  for (const char* f : {"align/alignment.tsv", "evaluate/report.json", "evaluate/report.txt",
                        "evaluate/retrieval_report.json", "evaluate/ranks.csv"}) {
    const bool same = read_file(ws.dir / "trained-a" / f) == read_file(ws.dir / "trained-b" / f);
    ok &= same;
    if (!same) which += std::string(" ") + f;
  }
  (void)a;
  return {ok, ok ? "two trained runs (embedder + reranker): alignment TSV and reports byte-identical"
                 : "differs:" + which};
}

struct Criterion {
  const char* name;
  bool attainable;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace kgalign

int main() {
  using namespace kgalign;
  logger()->set_level(spdlog::level::warn);
  Workspace ws;
  TrainedRun trained;
  const std::vector<Criterion> criteria{
      {"full-scale results", false, desk_scale},
      {"gradient correctness", true, gradients},
      {"loss oracle values", true, loss_oracles},
      {"retrieval oracle equivalence", true, retrieval_oracle},
      {"assignment correctness", true, assignment},
      {"metric oracles", true, metric_oracles},
      {"end-to-end synthetic clone", true, [&] { return clone_end_to_end(ws); }},
      {"training efficacy", true, [&] { return training_efficacy(ws, trained); }},
      {"hard-split contract", true, hard_split},
      {"determinism", true, [&] { return determinism(ws, trained); }},
  };
  int failed = 0;
  int index = 0;
  for (const auto& c : criteria) {
    ++index;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const char* note = !o.pass && !c.attainable ? " [unattainable here; not counted]" : "";
    std::printf("%s  %2d %-30s %s%s\n", o.pass ? "PASS" : "FAIL", index, c.name, o.detail.c_str(), note);
    std::fflush(stdout);
    if (!o.pass && c.attainable) ++failed;
  }
  std::printf("%d attainable criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
