#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgalign/alignment.hpp"
#include "kgalign/kg_store.hpp"
#include "kgalign/retrieval.hpp"

namespace kgalign {

inline constexpr std::size_t kUnboundedK = std::numeric_limits<std::size_t>::max();

// 1-based rank of the gold target; empty when the source has no candidate
// set or the gold target is not in it.
struct GoldRank {
  EntityId source;
  EntityId target;
  std::optional<std::size_t> rank;
};

// One entry per gold pair, in gold order. Missing candidate sets are logged.
std::vector<GoldRank> gold_ranks(std::span<const CandidateSet> ranked, std::span<const EntityPair> gold);

double hits_at_k(std::span<const GoldRank> ranks, std::size_t k);
double mrr(std::span<const GoldRank> ranks);

double hits_at_k(std::span<const CandidateSet> ranked, std::span<const EntityPair> gold, std::size_t k);
double mrr(std::span<const CandidateSet> ranked, std::span<const EntityPair> gold);

struct Prf1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t correct = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
};

// A prediction is correct when the exact (source, target) pair is gold.
Prf1 prf1(std::span<const AlignedPair> predicted, std::span<const EntityPair> gold);

struct MetricsReport {
  std::string setting = "regular";  // regular | hard
  std::map<std::size_t, double> hits_at;
  double mrr = 0.0;
  std::optional<Prf1> decision;
  std::string decision_method;  // how `decision` was produced
  std::size_t test_pairs = 0;
  std::string fingerprint;

  // Flat metric map: "hits@k", "mrr", and "precision"/"recall"/"f1" when a
  // decision was evaluated.
  std::map<std::string, double> metrics() const;

  std::string to_json() const;
  static MetricsReport from_json(std::string_view text);
  std::string to_text() const;
};

MetricsReport make_report(std::span<const CandidateSet> ranked, std::span<const EntityPair> gold,
                          std::span<const std::size_t> ks, const AlignmentResult* decision = nullptr,
                          std::string setting = "regular", std::string fingerprint = {});

struct MetricDelta {
  std::string metric;
  double regular = 0.0;
  double hard = 0.0;
  double delta = 0.0;  // hard - regular
};

// Throws KeyMismatch unless both reports carry the same metric keys.
std::vector<MetricDelta> compare_settings(const MetricsReport& regular, const MetricsReport& hard);
std::string format_comparison(std::span<const MetricDelta> deltas);

// source,target,rank with an empty rank for misses.
std::string format_ranks_csv(std::span<const GoldRank> ranks);

}  // namespace kgalign
