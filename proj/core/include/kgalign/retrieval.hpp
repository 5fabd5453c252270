#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgalign/embedder.hpp"
#include "kgalign/kg_store.hpp"

namespace kgalign {

enum class IndexKind { kExact, kApproximate };

std::string_view index_kind_name(IndexKind kind);
IndexKind parse_index_kind(std::string_view name);

// Build parameters of the approximate (HNSW) index.
struct HnswParams {
  std::uint32_t m = 16;
  std::uint32_t ef_construction = 200;
  std::uint32_t ef_search = 128;
  std::uint64_t seed = 0;
};

struct ScoredCandidate {
  EntityId target;
  double score = 0.0;

  friend bool operator==(const ScoredCandidate&, const ScoredCandidate&) = default;
};

// V_u: scores non-increasing, ties by target id ascending, ids distinct.
struct CandidateSet {
  EntityId source;
  std::vector<ScoredCandidate> candidates;

  friend bool operator==(const CandidateSet&, const CandidateSet&) = default;
};

class HnswGraph;

// Row i of the matrix embeds ids()[i]. Immutable after build and safe for
// concurrent queries.
class VectorIndex {
 public:
  static VectorIndex build(std::vector<EntityId> ids, DenseMatrix vectors, IndexKind kind = IndexKind::kExact,
                           HnswParams params = {});

  IndexKind kind() const { return kind_; }
  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return vectors_.cols; }
  const std::vector<EntityId>& ids() const { return ids_; }
  const DenseMatrix& vectors() const { return vectors_; }
  const HnswParams& params() const { return params_; }

  std::vector<ScoredCandidate> search(std::span<const float> query, std::size_t k) const;

  // magic "KGAINDX1", u32 version, u8 kind, u32 d, u64 count, ids as
  // u32-length-prefixed UTF-8, row-major f32 vectors; approximate indexes
  // append their build parameters and rebuild the graph on load.
  std::string serialize() const;
  static VectorIndex deserialize(std::string_view bytes);

 private:
  std::vector<ScoredCandidate> exact_search(std::span<const float> query, std::size_t k) const;
  friend std::vector<CandidateSet> topk_all(const VectorIndex&, std::span<const EntityId>, const DenseMatrix&,
                                            std::size_t, std::size_t);

  IndexKind kind_ = IndexKind::kExact;
  std::vector<EntityId> ids_;
  DenseMatrix vectors_;
  std::vector<std::uint32_t> id_rank_;  // lexicographic rank of ids_[i]
  HnswParams params_;
  std::shared_ptr<const HnswGraph> graph_;
};

// Top-k targets by dot product. k larger than the index returns everything.
CandidateSet topk(const VectorIndex& index, EntityId source, std::span<const float> query, std::size_t k);

// All queries at once with blocked scoring; results equal per-query topk.
std::vector<CandidateSet> topk_all(const VectorIndex& index, std::span<const EntityId> sources,
                                   const DenseMatrix& queries, std::size_t k, std::size_t threads = 0);

// Takes the pool_size nearest targets, drops the gold target, and samples n
// of the rest uniformly without replacement (all of them if fewer remain).
std::vector<EntityId> mine_negatives(const VectorIndex& index, std::span<const float> query,
                                     const EntityId& gold, std::size_t pool_size, std::size_t n,
                                     std::uint64_t seed);

// Same, on a precomputed ranked pool (for example a CandidateSet).
std::vector<EntityId> sample_negatives(std::span<const ScoredCandidate> pool, const EntityId& gold, std::size_t n,
                                       std::uint64_t seed);

// Fraction of gold sources whose target is within the first k candidates.
double candidate_recall(std::span<const CandidateSet> sets, std::span<const EntityPair> gold, std::size_t k);

// {"source": id, "candidates": [[id, score], ...]} per line.
std::string format_candidates_jsonl(std::span<const CandidateSet> sets);
std::vector<CandidateSet> parse_candidates_jsonl(std::string_view contents);

}  // namespace kgalign
