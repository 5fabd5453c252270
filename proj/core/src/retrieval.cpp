#include "kgalign/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <unordered_set>

#include <fmt/format.h>
#include <json.hpp>

#include "kgalign/binary_io.hpp"
#include "kgalign/dot.hpp"
#include "kgalign/error.hpp"
#include "kgalign/parallel.hpp"
#include "kgalign/rng.hpp"

namespace kgalign {

namespace {

using json = nlohmann::json;

constexpr std::string_view kIndexMagic = "KGAINDX1";
constexpr std::uint32_t kIndexVersion = 1;

// (score, node); larger score is closer.
using Scored = std::pair<double, std::uint32_t>;

struct CloserFirst {
  bool operator()(const Scored& a, const Scored& b) const {
    return a.first < b.first || (a.first == b.first && a.second > b.second);
  }
};
struct FartherFirst {
  bool operator()(const Scored& a, const Scored& b) const {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  }
};

}  // namespace

// Hierarchical navigable small-world graph over inner product. Holds only
// the links; vectors are passed in so index copies can share one graph.
class HnswGraph {
 public:
  HnswGraph(const DenseMatrix& vectors, const HnswParams& params) : params_(params) {
    const std::size_t n = vectors.rows;
    links_.resize(n);
    if (n == 0) return;
    const double ml = 1.0 / std::log(std::max<double>(2.0, params.m));
    Rng rng(params.seed);
    for (std::uint32_t i = 0; i < n; ++i) {
      double u = rng.uniform01();
      while (u <= 0.0) u = rng.uniform01();
      const auto level = static_cast<std::size_t>(std::floor(-std::log(u) * ml));
      insert(vectors, i, level);
    }
  }

  std::vector<Scored> search(const DenseMatrix& vectors, const float* query, std::size_t ef) const {
    if (links_.empty()) return {};
    std::uint32_t ep = entry_;
    for (std::size_t lev = max_level_; lev > 0; --lev) ep = greedy(vectors, query, ep, lev);
    return search_layer(vectors, query, {ep}, ef, 0);
  }

 private:
  std::size_t max_links(std::size_t level) const { return level == 0 ? 2 * params_.m : params_.m; }

  static double score(const DenseMatrix& v, const float* q, std::uint32_t node) {
    return dot_f32(q, v.data.data() + static_cast<std::size_t>(node) * v.cols, v.cols);
  }

  std::uint32_t greedy(const DenseMatrix& v, const float* q, std::uint32_t ep, std::size_t level) const {
    double best = score(v, q, ep);
    for (bool improved = true; improved;) {
      improved = false;
      for (const auto nb : links_[ep][level]) {
        const double s = score(v, q, nb);
        if (s > best || (s == best && nb < ep)) {
          best = s;
          ep = nb;
          improved = true;
        }
      }
    }
    return ep;
  }

  std::vector<Scored> search_layer(const DenseMatrix& v, const float* q, const std::vector<std::uint32_t>& entries,
                                   std::size_t ef, std::size_t level) const {
    std::vector<char> visited(links_.size(), 0);
    std::priority_queue<Scored, std::vector<Scored>, CloserFirst> frontier;
    std::priority_queue<Scored, std::vector<Scored>, FartherFirst> best;
    for (const auto e : entries) {
      if (visited[e]) continue;
      visited[e] = 1;
      const Scored s{score(v, q, e), e};
      frontier.push(s);
      best.push(s);
      if (best.size() > ef) best.pop();
    }
    while (!frontier.empty()) {
      const auto cur = frontier.top();
      frontier.pop();
      if (best.size() >= ef && cur.first < best.top().first) break;
      for (const auto nb : links_[cur.second][level]) {
        if (visited[nb]) continue;
        visited[nb] = 1;
        const Scored s{score(v, q, nb), nb};
        if (best.size() < ef || s.first > best.top().first) {
          frontier.push(s);
          best.push(s);
          if (best.size() > ef) best.pop();
        }
      }
    }
    std::vector<Scored> out;
    out.reserve(best.size());
    while (!best.empty()) {
      out.push_back(best.top());
      best.pop();
    }
    return out;
  }

  // Keeps a candidate only if it is closer to the base than to every
  // neighbor kept so far (diversity heuristic).
  std::vector<std::uint32_t> select(const DenseMatrix& v, std::vector<Scored> candidates, std::size_t limit) const {
    std::sort(candidates.begin(), candidates.end(), [](const Scored& a, const Scored& b) {
      return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    std::vector<std::uint32_t> kept;
    for (const auto& [s, c] : candidates) {
      if (kept.size() >= limit) break;
      bool diverse = true;
      const float* cv = v.data.data() + static_cast<std::size_t>(c) * v.cols;
      for (const auto k : kept) {
        if (score(v, cv, k) > s) {
          diverse = false;
          break;
        }
      }
      if (diverse) kept.push_back(c);
    }
    return kept;
  }

  void insert(const DenseMatrix& v, std::uint32_t node, std::size_t level) {
    links_[node].resize(level + 1);
    if (node == 0) {
      entry_ = 0;
      max_level_ = level;
      return;
    }
    const float* q = v.data.data() + static_cast<std::size_t>(node) * v.cols;
    std::uint32_t ep = entry_;
    for (std::size_t lev = max_level_; lev > level; --lev) ep = greedy(v, q, ep, lev);

    std::vector<std::uint32_t> entries{ep};
    for (std::size_t lev = std::min(level, max_level_) + 1; lev-- > 0;) {
      auto found = search_layer(v, q, entries, params_.ef_construction, lev);
      links_[node][lev] = select(v, found, params_.m);
      for (const auto nb : links_[node][lev]) {
        auto& back = links_[nb][lev];
        back.push_back(node);
        if (back.size() > max_links(lev)) {
          const float* nv = v.data.data() + static_cast<std::size_t>(nb) * v.cols;
          std::vector<Scored> cand;
          cand.reserve(back.size());
          for (const auto x : back) cand.push_back({score(v, nv, x), x});
          back = select(v, std::move(cand), max_links(lev));
        }
      }
      entries.clear();
      for (const auto& s : found) entries.push_back(s.second);
    }
    if (level > max_level_) {
      max_level_ = level;
      entry_ = node;
    }
  }

  HnswParams params_;
  std::vector<std::vector<std::vector<std::uint32_t>>> links_;  // node -> level -> neighbors
  std::uint32_t entry_ = 0;
  std::size_t max_level_ = 0;
};

std::string_view index_kind_name(IndexKind kind) {
  return kind == IndexKind::kExact ? "exact" : "approximate";
}

IndexKind parse_index_kind(std::string_view name) {
  if (name == "exact") return IndexKind::kExact;
  if (name == "approximate") return IndexKind::kApproximate;
  fail(ErrorCode::kConfigError, fmt::format("unknown index kind '{}'", name));
}

VectorIndex VectorIndex::build(std::vector<EntityId> ids, DenseMatrix vectors, IndexKind kind, HnswParams params) {
  if (ids.empty()) fail(ErrorCode::kEmptyInput, "cannot index zero vectors");
  if (vectors.rows != ids.size() || vectors.data.size() != vectors.rows * vectors.cols || vectors.cols == 0) {
    fail(ErrorCode::kDimensionMismatch,
         fmt::format("{} ids but a {}x{} matrix", ids.size(), vectors.rows, vectors.cols));
  }
  for (const float x : vectors.data) {
    if (!std::isfinite(x)) fail(ErrorCode::kNonFiniteMatrix, "index vectors must be finite");
  }
  VectorIndex index;
  index.kind_ = kind;
  index.ids_ = std::move(ids);
  index.vectors_ = std::move(vectors);
  index.params_ = params;

  std::vector<std::uint32_t> order(index.ids_.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return index.ids_[a] < index.ids_[b]; });
  index.id_rank_.resize(order.size());
  for (std::uint32_t r = 0; r < order.size(); ++r) {
    if (r > 0 && index.ids_[order[r]] == index.ids_[order[r - 1]]) {
      fail(ErrorCode::kDuplicateEntityId, fmt::format("'{}' indexed twice", index.ids_[order[r]]));
    }
    index.id_rank_[order[r]] = r;
  }

  if (kind == IndexKind::kApproximate) {
    if (params.m < 2 || params.ef_construction == 0 || params.ef_search == 0) {
      fail(ErrorCode::kConfigError, "HNSW parameters m >= 2, ef_construction >= 1, ef_search >= 1 required");
    }
    index.graph_ = std::make_shared<HnswGraph>(index.vectors_, params);
  }
  return index;
}

namespace {

// Picks the first k rows of `scores` under (score desc, id rank asc).
std::vector<std::uint32_t> rank_rows(std::span<const double> scores, std::span<const std::uint32_t> id_rank,
                                     std::size_t k) {
  std::vector<std::uint32_t> rows(scores.size());
  std::iota(rows.begin(), rows.end(), 0);
  k = std::min(k, rows.size());
  const auto before = [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && id_rank[a] < id_rank[b]);
  };
  std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k), rows.end(), before);
  rows.resize(k);
  return rows;
}

}  // namespace

std::vector<ScoredCandidate> VectorIndex::exact_search(std::span<const float> query, std::size_t k) const {
  std::vector<double> scores(size());
  for (std::size_t i = 0; i < size(); ++i) scores[i] = dot_f32(query.data(), vectors_.row(i).data(), dim());
  std::vector<ScoredCandidate> out;
  for (const auto r : rank_rows(scores, id_rank_, k)) out.push_back({ids_[r], scores[r]});
  return out;
}

std::vector<ScoredCandidate> VectorIndex::search(std::span<const float> query, std::size_t k) const {
  if (query.size() != dim()) {
    fail(ErrorCode::kDimensionMismatch, fmt::format("query has d={}, index has d={}", query.size(), dim()));
  }
  if (k == 0) fail(ErrorCode::kUsageError, "k must be >= 1");
  if (kind_ == IndexKind::kExact) return exact_search(query, k);

  auto found = graph_->search(vectors_, query.data(), std::max<std::size_t>(k, params_.ef_search));
  std::sort(found.begin(), found.end(), [&](const Scored& a, const Scored& b) {
    return a.first > b.first || (a.first == b.first && id_rank_[a.second] < id_rank_[b.second]);
  });
  if (found.size() > k) found.resize(k);
  std::vector<ScoredCandidate> out;
  out.reserve(found.size());
  for (const auto& [s, node] : found) out.push_back({ids_[node], s});
  return out;
}

std::string VectorIndex::serialize() const {
  BinaryWriter w;
  w.bytes(kIndexMagic);
  w.u32(kIndexVersion);
  w.u8(kind_ == IndexKind::kExact ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(dim()));
  w.u64(size());
  for (const auto& id : ids_) w.str(id);
  w.f32s(vectors_.data);
  if (kind_ == IndexKind::kApproximate) {
    w.u32(params_.m);
    w.u32(params_.ef_construction);
    w.u32(params_.ef_search);
    w.u64(params_.seed);
  }
  return w.release();
}

VectorIndex VectorIndex::deserialize(std::string_view bytes) {
  BinaryReader r(bytes);
  if (r.bytes(kIndexMagic.size()) != kIndexMagic) fail(ErrorCode::kFormatError, "not a vector index file");
  if (r.u32() != kIndexVersion) fail(ErrorCode::kFormatError, "unsupported index version");
  const auto kind_tag = r.u8();
  if (kind_tag > 1) fail(ErrorCode::kFormatError, "unknown index kind");
  const auto d = r.u32();
  const auto count = r.u64();
  if (count > r.remaining()) fail(ErrorCode::kFormatError, "index count exceeds file size");
  std::vector<EntityId> ids;
  ids.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) ids.push_back(r.str());
  DenseMatrix m(count, d);
  r.f32s(m.data);
  HnswParams params;
  const IndexKind kind = kind_tag == 0 ? IndexKind::kExact : IndexKind::kApproximate;
  if (kind == IndexKind::kApproximate) {
    params.m = r.u32();
    params.ef_construction = r.u32();
    params.ef_search = r.u32();
    params.seed = r.u64();
  }
  if (!r.at_end()) fail(ErrorCode::kFormatError, "trailing bytes in index file");
  return build(std::move(ids), std::move(m), kind, params);
}

CandidateSet topk(const VectorIndex& index, EntityId source, std::span<const float> query, std::size_t k) {
  return {std::move(source), index.search(query, k)};
}

std::vector<CandidateSet> topk_all(const VectorIndex& index, std::span<const EntityId> sources,
                                   const DenseMatrix& queries, std::size_t k, std::size_t threads) {
  if (sources.size() != queries.rows) fail(ErrorCode::kDimensionMismatch, "one query row per source required");
  if (queries.rows > 0 && queries.cols != index.dim()) {
    fail(ErrorCode::kDimensionMismatch, fmt::format("queries have d={}, index has d={}", queries.cols, index.dim()));
  }
  if (k == 0) fail(ErrorCode::kUsageError, "k must be >= 1");
  std::vector<CandidateSet> out(sources.size());
  if (index.kind() == IndexKind::kApproximate) {
    parallel_for(sources.size(), threads, [&](std::size_t i) { out[i] = topk(index, sources[i], queries.row(i), k); });
    return out;
  }

  // Query blocks x target tiles; each score uses the same kernel and
  // accumulation order as a single-query scan.
  constexpr std::size_t kQueryBlock = 32;
  constexpr std::size_t kTargetTile = 256;
  const std::size_t n = index.size();
  const std::size_t d = index.dim();
  const std::size_t blocks = (sources.size() + kQueryBlock - 1) / kQueryBlock;
  parallel_for(blocks, threads, [&](std::size_t b) {
    const std::size_t q0 = b * kQueryBlock;
    const std::size_t q1 = std::min(sources.size(), q0 + kQueryBlock);
    std::vector<double> scores((q1 - q0) * n);
    for (std::size_t t0 = 0; t0 < n; t0 += kTargetTile) {
      const std::size_t t1 = std::min(n, t0 + kTargetTile);
      for (std::size_t q = q0; q < q1; ++q) {
        const float* qv = queries.row(q).data();
        double* dst = scores.data() + (q - q0) * n;
        for (std::size_t t = t0; t < t1; ++t) dst[t] = dot_f32(qv, index.vectors_.row(t).data(), d);
      }
    }
    for (std::size_t q = q0; q < q1; ++q) {
      const std::span<const double> row(scores.data() + (q - q0) * n, n);
      CandidateSet set{sources[q], {}};
      for (const auto r : rank_rows(row, index.id_rank_, k)) set.candidates.push_back({index.ids_[r], row[r]});
      out[q] = std::move(set);
    }
  });
  return out;
}

std::vector<EntityId> sample_negatives(std::span<const ScoredCandidate> pool, const EntityId& gold, std::size_t n,
                                       std::uint64_t seed) {
  std::vector<EntityId> rest;
  rest.reserve(pool.size());
  for (const auto& c : pool) {
    if (c.target != gold) rest.push_back(c.target);
  }
  if (rest.empty()) fail(ErrorCode::kEmptyPool, fmt::format("no negatives left after removing gold '{}'", gold));
  if (rest.size() <= n) return rest;
  Rng rng(seed);
  rng.partial_shuffle(std::span(rest), n);
  rest.resize(n);
  return rest;
}

std::vector<EntityId> mine_negatives(const VectorIndex& index, std::span<const float> query, const EntityId& gold,
                                     std::size_t pool_size, std::size_t n, std::uint64_t seed) {
  if (pool_size < n) fail(ErrorCode::kUsageError, fmt::format("pool size {} is smaller than n={}", pool_size, n));
  const auto pool = index.search(query, pool_size);
  return sample_negatives(pool, gold, n, seed);
}

double candidate_recall(std::span<const CandidateSet> sets, std::span<const EntityPair> gold, std::size_t k) {
  if (gold.empty()) fail(ErrorCode::kEmptyGold, "no gold pairs");
  std::unordered_map<std::string, const CandidateSet*> by_source;
  for (const auto& s : sets) by_source.emplace(s.source, &s);
  std::size_t hits = 0;
  for (const auto& p : gold) {
    const auto it = by_source.find(p.source);
    if (it == by_source.end()) continue;
    const auto& c = it->second->candidates;
    const auto limit = std::min(k, c.size());
    for (std::size_t i = 0; i < limit; ++i) {
      if (c[i].target == p.target) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

std::string format_candidates_jsonl(std::span<const CandidateSet> sets) {
  std::string out;
  for (const auto& s : sets) {
    json line;
    line["source"] = s.source;
    line["candidates"] = json::array();
    for (const auto& c : s.candidates) line["candidates"].push_back(json::array({c.target, c.score}));
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::vector<CandidateSet> parse_candidates_jsonl(std::string_view contents) {
  std::vector<CandidateSet> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    const auto line = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      CandidateSet set;
      set.source = j.at("source").get<std::string>();
      for (const auto& c : j.at("candidates")) {
        set.candidates.push_back({c.at(0).get<std::string>(), c.at(1).get<double>()});
      }
      out.push_back(std::move(set));
    } catch (const json::exception& e) {
      throw MalformedLineError("candidates", line_no, e.what());
    }
  }
  return out;
}

}  // namespace kgalign
