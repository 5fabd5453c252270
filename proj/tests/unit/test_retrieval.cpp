#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include "kgalign/error.hpp"
#include "kgalign/retrieval.hpp"
#include "kgalign/rng.hpp"
#include "test_support.hpp"

namespace kgalign {
namespace {

using testing::random_matrix;

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kStageFailure;
}

std::vector<EntityId> ids(std::size_t n, const char* prefix = "t") {
  std::vector<EntityId> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(fmt::format("{}{:05}", prefix, i));
  return out;
}

// Full sort by (score desc, id asc), scores recomputed in double.
std::vector<ScoredCandidate> naive_topk(const std::vector<EntityId>& names, const DenseMatrix& m,
                                        std::span<const float> q, std::size_t k) {
  std::vector<ScoredCandidate> all;
  for (std::size_t i = 0; i < m.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += static_cast<double>(m.row(i)[j]) * q[j];
    all.push_back({names[i], s});
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.score != b.score ? a.score > b.score : a.target < b.target;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

TEST(ExactIndex, MatchesNaiveSort) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.uniform_below(1000);
    const std::size_t d = 1 + rng.uniform_below(64);
    const std::size_t k = 1 + rng.uniform_below(50);
    auto m = random_matrix(rng, n, d);
    // Force ties on some instances.
    if (trial % 5 == 0 && n > 3) m.data.assign(m.data.size(), 0.25f);
    const auto names = ids(n);
    auto shuffled = names;
    rng.shuffle(std::span(shuffled));
    DenseMatrix perm(n, d);
    std::map<EntityId, std::size_t> pos;
    for (std::size_t i = 0; i < n; ++i) pos[names[i]] = i;
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(m.row(pos[shuffled[i]]).begin(), m.row(pos[shuffled[i]]).end(), perm.row(i).begin());
    }
    const auto index = VectorIndex::build(shuffled, perm);
    const auto q = random_matrix(rng, 1, d);
    const auto got = topk(index, "s", q.row(0), k).candidates;
    const auto want = naive_topk(names, m, q.row(0), k);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].target, want[i].target) << "trial " << trial << " rank " << i;
      EXPECT_NEAR(got[i].score, want[i].score, 1e-5);
    }
  }
}

TEST(ExactIndex, BatchedEqualsPerQuery) {
  Rng rng(12);
  const auto m = random_matrix(rng, 300, 24);
  const auto index = VectorIndex::build(ids(300), m);
  const auto queries = random_matrix(rng, 37, 24);
  const auto sources = ids(37, "s");
  const auto batched = topk_all(index, sources, queries, 10, 3);
  for (std::size_t i = 0; i < sources.size(); ++i) EXPECT_EQ(batched[i], topk(index, sources[i], queries.row(i), 10));
}

TEST(ExactIndex, SingleVectorAndEdgeCases) {
  DenseMatrix one(1, 2);
  one.data = {1.0f, 2.0f};
  const auto index = VectorIndex::build({"only"}, one);
  const std::vector<float> q{3.0f, 4.0f};
  const auto r = topk(index, "s", q, 5).candidates;
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].target, "only");
  EXPECT_DOUBLE_EQ(r[0].score, 11.0);

  EXPECT_EQ(code_of([] { VectorIndex::build({}, DenseMatrix(0, 3)); }), ErrorCode::kEmptyInput);
  EXPECT_EQ(code_of([&] { topk(index, "s", std::vector<float>{1.0f}, 1); }), ErrorCode::kDimensionMismatch);
  EXPECT_EQ(code_of([&] { topk(index, "s", q, 0); }), ErrorCode::kUsageError);
  DenseMatrix two(2, 2);
  EXPECT_EQ(code_of([&] { VectorIndex::build({"a", "a"}, two); }), ErrorCode::kDuplicateEntityId);
}

TEST(ExactIndex, IdentityRetrievalAndFullPermutation) {
  Rng rng(13);
  auto m = random_matrix(rng, 200, 32);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double sq = 0.0;
    for (const float x : m.row(i)) sq += static_cast<double>(x) * x;
    for (auto& x : m.row(i)) x = static_cast<float>(x / std::sqrt(sq));
  }
  const auto names = ids(200);
  const auto index = VectorIndex::build(names, m);
  const auto sets = topk_all(index, names, m, 200);
  for (std::size_t i = 0; i < names.size(); ++i) {
    EXPECT_EQ(sets[i].candidates[0].target, names[i]);
    std::set<EntityId> seen;
    for (const auto& c : sets[i].candidates) seen.insert(c.target);
    EXPECT_EQ(seen.size(), 200u);
  }
}

TEST(ExactIndex, RankingProperties) {
  Rng rng(14);
  const auto m = random_matrix(rng, 150, 16);
  const auto names = ids(150);
  const auto index = VectorIndex::build(names, m);
  const auto q = random_matrix(rng, 1, 16);
  const auto full = topk(index, "s", q.row(0), 150).candidates;
  for (std::size_t i = 1; i < full.size(); ++i) {
    EXPECT_GE(full[i - 1].score, full[i].score);
    if (full[i - 1].score == full[i].score) EXPECT_LT(full[i - 1].target, full[i].target);
  }
  for (const std::size_t k : {1u, 5u, 37u, 149u}) {
    const auto part = topk(index, "s", q.row(0), k).candidates;
    EXPECT_TRUE(std::equal(part.begin(), part.end(), full.begin()));
  }
  for (const auto& c : full) {
    const auto row = static_cast<std::size_t>(std::stoul(c.target.substr(1)));
    EXPECT_NEAR(c.score, similarity(m.row(row), q.row(0)), 1e-5);
  }
}

TEST(ExactIndex, SerializationIsDeterministic) {
  Rng rng(15);
  const auto m = random_matrix(rng, 50, 8);
  const auto a = VectorIndex::build(ids(50), m);
  const auto b = VectorIndex::build(ids(50), m);
  EXPECT_EQ(a.serialize(), b.serialize());
  const auto back = VectorIndex::deserialize(a.serialize());
  EXPECT_EQ(back.serialize(), a.serialize());
  EXPECT_EQ(back.ids(), a.ids());
  auto bytes = a.serialize();
  bytes += 'x';
  EXPECT_EQ(code_of([&] { VectorIndex::deserialize(bytes); }), ErrorCode::kFormatError);
  EXPECT_EQ(code_of([] { VectorIndex::deserialize("KGAINDX0"); }), ErrorCode::kFormatError);
}

TEST(HnswIndex, RecallAgainstExact) {
  Rng rng(16);
  const std::size_t n = 3000;
  const auto m = random_matrix(rng, n, 32);
  const auto names = ids(n);
  HnswParams p;
  p.seed = 5;
  const auto approx = VectorIndex::build(names, m, IndexKind::kApproximate, p);
  const auto exact = VectorIndex::build(names, m);
  const auto queries = random_matrix(rng, 100, 32);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < queries.rows; ++i) {
    const auto want = exact.search(queries.row(i), 10);
    const auto got = approx.search(queries.row(i), 10);
    std::set<EntityId> truth;
    for (const auto& c : want) truth.insert(c.target);
    for (const auto& c : got) hit += truth.count(c.target);
    for (std::size_t j = 1; j < got.size(); ++j) EXPECT_GE(got[j - 1].score, got[j].score);
  }
  EXPECT_GE(static_cast<double>(hit) / 1000.0, 0.95);
}

TEST(HnswIndex, SeededBuildIsReproducibleAndRoundTrips) {
  Rng rng(17);
  const auto m = random_matrix(rng, 500, 12);
  HnswParams p;
  p.seed = 9;
  const auto a = VectorIndex::build(ids(500), m, IndexKind::kApproximate, p);
  const auto back = VectorIndex::deserialize(a.serialize());
  EXPECT_EQ(back.kind(), IndexKind::kApproximate);
  EXPECT_EQ(back.params().seed, 9u);
  const auto q = random_matrix(rng, 20, 12);
  for (std::size_t i = 0; i < q.rows; ++i) EXPECT_EQ(a.search(q.row(i), 10), back.search(q.row(i), 10));
}

TEST(Negatives, GoldExcludedAndPoolExhaustion) {
  Rng rng(18);
  const auto m = random_matrix(rng, 30, 8);
  const auto index = VectorIndex::build(ids(30), m);
  const auto q = m.row(3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto negs = mine_negatives(index, q, "t00003", 10, 4, seed);
    EXPECT_EQ(negs.size(), 4u);
    EXPECT_EQ(std::set(negs.begin(), negs.end()).size(), 4u);
    EXPECT_EQ(std::count(negs.begin(), negs.end(), "t00003"), 0);
  }
  // Pool of 5 minus gold leaves 4 < n: all of them come back.
  const auto few = sample_negatives(index.search(q, 5), "t00003", 4, 1);
  EXPECT_LE(few.size(), 4u);
  EXPECT_EQ(code_of([&] { mine_negatives(index, q, "x", 3, 4, 0); }), ErrorCode::kUsageError);
  const std::vector<ScoredCandidate> only_gold{{"g", 1.0}};
  EXPECT_EQ(code_of([&] { sample_negatives(only_gold, "g", 2, 0); }), ErrorCode::kEmptyPool);
}

TEST(Negatives, MatchesReferenceSampler) {
  std::vector<ScoredCandidate> pool;
  for (int i = 0; i < 200; ++i) pool.push_back({fmt::format("c{:03}", i), 1.0 - i * 1e-3});
  const EntityId gold = "c017";
  std::map<EntityId, int> freq;
  const int trials = 2000;
  for (std::uint64_t seed = 0; seed < trials; ++seed) {
    // Forward Fisher-Yates over the pool in rank order with gold removed.
    std::vector<EntityId> rest;
    for (const auto& c : pool) {
      if (c.target != gold) rest.push_back(c.target);
    }
    Rng ref(seed);
    for (std::size_t i = 0; i < 64; ++i) {
      const auto j = i + static_cast<std::size_t>(ref.uniform_below(rest.size() - i));
      std::swap(rest[i], rest[j]);
    }
    rest.resize(64);
    const auto got = sample_negatives(pool, gold, 64, seed);
    ASSERT_EQ(got, rest);
    for (const auto& g : got) ++freq[g];
  }
  // Each of the 199 candidates is drawn with probability 64/199.
  const double p = 64.0 / 199.0;
  const double sd = std::sqrt(trials * p * (1 - p));
  for (const auto& [id, f] : freq) EXPECT_NEAR(f, trials * p, 5 * sd) << id;
  EXPECT_EQ(freq.size(), 199u);
}

TEST(CandidateRecall, MonotoneInK) {
  Rng rng(19);
  const auto m = random_matrix(rng, 100, 8);
  const auto q = random_matrix(rng, 40, 8);
  const auto index = VectorIndex::build(ids(100), m);
  const auto sources = ids(40, "s");
  std::vector<EntityPair> gold;
  for (std::size_t i = 0; i < 40; ++i) gold.push_back({sources[i], fmt::format("t{:05}", i * 2)});
  const auto sets = topk_all(index, sources, q, 100);
  double prev = 0.0;
  for (std::size_t k = 1; k <= 100; ++k) {
    const double r = candidate_recall(sets, gold, k);
    EXPECT_GE(r, prev);
    prev = r;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
  EXPECT_EQ(code_of([&] { candidate_recall(sets, {}, 5); }), ErrorCode::kEmptyGold);
}

TEST(CandidatesJsonl, RoundTrip) {
  const std::vector<CandidateSet> sets{{"s\"1", {{"a", 0.5}, {"b", -0.125}}}, {"s2", {}}};
  const auto text = format_candidates_jsonl(sets);
  EXPECT_EQ(parse_candidates_jsonl(text), sets);
  EXPECT_EQ(format_candidates_jsonl(parse_candidates_jsonl(text)), text);
}

}  // namespace
}  // namespace kgalign
