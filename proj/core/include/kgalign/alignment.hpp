#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgalign/kg_store.hpp"
#include "kgalign/retrieval.hpp"

namespace kgalign {

enum class AlignmentMethod { kGreedy, kHungarian, kSinkhorn };

std::string_view alignment_method_name(AlignmentMethod m);
AlignmentMethod parse_alignment_method(std::string_view name);

// Dense row-major score matrix.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  ScoreMatrix() = default;
  ScoreMatrix(std::size_t r, std::size_t c, double v = 0.0) : rows(r), cols(c), values(r * c, v) {}

  double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

// Sources x (union of candidate targets), both in id order. Cells outside a
// source's candidate set hold `fill`.
struct CandidateMatrix {
  std::vector<EntityId> sources;
  std::vector<EntityId> targets;
  ScoreMatrix scores;
  std::vector<char> observed;
  double fill = 0.0;
};

// fill = min - 3 * (max - min) over all observed scores (range 1 if flat).
CandidateMatrix build_candidate_matrix(std::span<const CandidateSet> candidates);

// Maximum-total-score assignment; result[i] is the column of row i or -1
// when rows outnumber columns.
std::vector<std::ptrdiff_t> hungarian_assign(const ScoreMatrix& m);

struct SinkhornOptions {
  double epsilon = 0.05;
  std::size_t max_iterations = 1000;
  // Stop once every row and column marginal is within this much.
  double tolerance = 1e-9;
};

struct SinkhornDiagnostics {
  std::size_t iterations = 0;
  std::size_t newton_steps = 0;  // polishing steps after the scaling sweeps
  bool converged = false;
  double max_marginal_violation = 0.0;
};

struct SinkhornPlan {
  ScoreMatrix plan;  // transport plan with uniform marginals 1/rows, 1/cols
  SinkhornDiagnostics diagnostics;
};

// Entropy-regularized transport computed in the log domain.
SinkhornPlan sinkhorn(const ScoreMatrix& m, const SinkhornOptions& options = {});

// Repeatedly takes the remaining cell with the most plan mass and masks its
// row and column. Ties go to the smaller (row, column).
std::vector<std::ptrdiff_t> harden_plan(const ScoreMatrix& plan);

struct AlignedPair {
  EntityId source;
  EntityId target;
  double score = 0.0;
  bool candidate = true;  // false when matched through a fill cell

  friend bool operator==(const AlignedPair&, const AlignedPair&) = default;
};

struct AlignmentResult {
  AlignmentMethod method = AlignmentMethod::kGreedy;
  bool one_to_one = false;
  std::vector<AlignedPair> pairs;  // sorted by source id
  std::optional<SinkhornDiagnostics> sinkhorn;
  double epsilon = 0.0;  // sinkhorn only
  double fill = 0.0;
};

// Highest-scoring candidate per source, ties by target id. One target may
// be chosen by several sources.
AlignmentResult decide_greedy(std::span<const CandidateSet> candidates);
AlignmentResult decide_hungarian(std::span<const CandidateSet> candidates);
AlignmentResult decide_sinkhorn(std::span<const CandidateSet> candidates, const SinkhornOptions& options = {});

AlignmentResult decide(AlignmentMethod method, std::span<const CandidateSet> candidates,
                       const SinkhornOptions& options = {});

// source \t target \t score, one pair per line.
std::string format_alignment_tsv(const AlignmentResult& result);
std::vector<AlignedPair> parse_alignment_tsv(std::string_view contents);
std::string alignment_metadata_json(const AlignmentResult& result);

}  // namespace kgalign
