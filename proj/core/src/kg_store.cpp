#include "kgalign/kg_store.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include <fmt/format.h>

#include "kgalign/binary_io.hpp"
#include "kgalign/error.hpp"
#include "kgalign/log.hpp"
#include "kgalign/rng.hpp"
#include "kgalign/text.hpp"

namespace kgalign {
namespace fs = std::filesystem;

bool is_name_attribute(std::string_view attribute) {
  const auto label = text::ascii_lower(text::local_name(attribute));
  return label == "name" || label == "label" || label == "preflabel";
}

namespace {

// Calls fn(line_number, fields) for every non-empty line. Lines are split on
// tabs; a trailing '\r' is dropped.
template <typename Fn>
void for_each_tsv_line(const fs::path& file, std::size_t arity, Fn&& fn) {
  if (!fs::exists(file)) fail(ErrorCode::kMissingFile, file.string());
  const std::string contents = read_file(file);
  const std::string origin = file.filename().string();
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string::npos) end = contents.size();
    std::string_view line(contents.data() + start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto fields = text::split(line, '\t');
    if (fields.size() != arity) {
      throw MalformedLineError(origin, line_no,
                               fmt::format("expected {} tab-separated fields, found {}", arity,
                                           fields.size()));
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i].empty()) {
        throw MalformedLineError(origin, line_no, fmt::format("field {} is empty", i + 1));
      }
    }
    fn(line_no, fields);
  }
}

std::int64_t parse_int_field(std::string_view field, const std::string& origin, std::size_t line) {
  std::int64_t value = 0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw MalformedLineError(origin, line, fmt::format("'{}' is not an integer id", field));
  }
  return value;
}

fs::path side_file(const fs::path& dir, std::string_view stem, int side) {
  return dir / fmt::format("{}_{}", stem, side);
}

// DBP15K `ent_ids_N`: integer id -> URI.
std::map<std::int64_t, std::string> parse_ent_ids(const fs::path& file) {
  std::map<std::int64_t, std::string> ids;
  std::unordered_set<std::string> uris;
  const std::string origin = file.filename().string();
  for_each_tsv_line(file, 2, [&](std::size_t line, const auto& f) {
    const auto id = parse_int_field(f[0], origin, line);
    std::string uri(f[1]);
    if (ids.contains(id)) {
      fail(ErrorCode::kDuplicateEntityId, fmt::format("{}:{}: id {} declared twice", origin, line, id));
    }
    if (!uris.insert(uri).second) {
      fail(ErrorCode::kDuplicateEntityId, fmt::format("{}:{}: '{}' declared twice", origin, line, uri));
    }
    ids.emplace(id, std::move(uri));
  });
  return ids;
}

std::vector<AttributeTriple> parse_attr_file(const fs::path& file) {
  std::vector<AttributeTriple> out;
  for_each_tsv_line(file, 3, [&](std::size_t, const auto& f) {
    out.push_back({std::string(f[0]), std::string(f[1]), std::string(f[2])});
  });
  return out;
}

KnowledgeGraph parse_openea(const fs::path& dir, int side) {
  std::vector<RelationTriple> rel;
  for_each_tsv_line(side_file(dir, "rel_triples", side), 3, [&](std::size_t, const auto& f) {
    rel.push_back({std::string(f[0]), std::string(f[1]), std::string(f[2])});
  });
  auto attr = parse_attr_file(side_file(dir, "attr_triples", side));
  return KnowledgeGraph(std::move(rel), std::move(attr));
}

KnowledgeGraph parse_dbp15k(const fs::path& dir, int side) {
  const auto ids = parse_ent_ids(side_file(dir, "ent_ids", side));

  std::map<std::int64_t, std::string> rel_labels;
  const auto rel_ids_file = side_file(dir, "rel_ids", side);
  if (fs::exists(rel_ids_file)) {
    const std::string origin = rel_ids_file.filename().string();
    for_each_tsv_line(rel_ids_file, 2, [&](std::size_t line, const auto& f) {
      rel_labels.emplace(parse_int_field(f[0], origin, line), std::string(f[1]));
    });
  }

  const auto triples_file = side_file(dir, "triples", side);
  const std::string origin = triples_file.filename().string();
  std::vector<RelationTriple> rel;
  for_each_tsv_line(triples_file, 3, [&](std::size_t line, const auto& f) {
    const auto head = parse_int_field(f[0], origin, line);
    const auto relation = parse_int_field(f[1], origin, line);
    const auto tail = parse_int_field(f[2], origin, line);
    const auto h = ids.find(head);
    const auto t = ids.find(tail);
    if (h == ids.end() || t == ids.end()) {
      throw MalformedLineError(origin, line, "entity id not declared in ent_ids");
    }
    const auto label = rel_labels.find(relation);
    rel.push_back({h->second, label == rel_labels.end() ? std::to_string(relation) : label->second,
                   t->second});
  });

  std::vector<AttributeTriple> attr;
  const auto attr_file = side_file(dir, "attr_triples", side);
  if (fs::exists(attr_file)) attr = parse_attr_file(attr_file);

  std::vector<EntityId> declared;
  declared.reserve(ids.size());
  std::unordered_set<std::string> known;
  for (const auto& [id, uri] : ids) {
    declared.push_back(uri);
    known.insert(uri);
  }
  for (const auto& t : attr) {
    if (!known.contains(t.subject)) {
      fail(ErrorCode::kMalformedLine,
           fmt::format("{}: attribute subject '{}' is not declared in ent_ids_{}",
                       attr_file.filename().string(), t.subject, side));
    }
  }
  return KnowledgeGraph(std::move(rel), std::move(attr), std::move(declared));
}

}  // namespace

KnowledgeGraph::KnowledgeGraph(std::vector<RelationTriple> rel_triples,
                               std::vector<AttributeTriple> attr_triples,
                               std::vector<EntityId> extra_entities,
                               std::map<EntityId, std::string> names)
    : rel_triples_(std::move(rel_triples)),
      attr_triples_(std::move(attr_triples)),
      explicit_names_(std::move(names)) {
  std::set<EntityId> all(std::make_move_iterator(extra_entities.begin()),
                         std::make_move_iterator(extra_entities.end()));
  for (const auto& t : rel_triples_) {
    if (t.subject.empty() || t.object.empty() || t.relation.empty()) {
      fail(ErrorCode::kMalformedLine, "relation triple with an empty field");
    }
    all.insert(t.subject);
    all.insert(t.object);
  }
  for (const auto& t : attr_triples_) {
    if (t.subject.empty() || t.attribute.empty()) {
      fail(ErrorCode::kMalformedLine, "attribute triple with an empty subject or attribute");
    }
    all.insert(t.subject);
  }
  if (all.contains(EntityId{})) fail(ErrorCode::kMalformedLine, "empty entity id");

  entities_.assign(all.begin(), all.end());
  index_.reserve(entities_.size());
  for (std::size_t i = 0; i < entities_.size(); ++i) index_.emplace(entities_[i], i);

  neighbors_.resize(entities_.size());
  attrs_.resize(entities_.size());
  for (const auto& t : rel_triples_) {
    neighbors_[index_.at(t.subject)].push_back({t.relation, t.object, false});
    neighbors_[index_.at(t.object)].push_back({t.relation, t.subject, true});
  }
  names_.resize(entities_.size());
  for (const auto& t : attr_triples_) {
    const auto i = index_.at(t.subject);
    attrs_[i].push_back({t.attribute, t.value});
    if (is_name_attribute(t.attribute) && !t.value.empty()) {
      // Smallest value wins so the choice does not depend on line order.
      if (!names_[i] || t.value < *names_[i]) names_[i] = t.value;
    }
  }
  for (const auto& [id, name] : explicit_names_) {
    const auto it = index_.find(id);
    if (it != index_.end() && !name.empty()) names_[it->second] = name;
  }
}

bool KnowledgeGraph::contains(std::string_view id) const {
  return index_.find(std::string(id)) != index_.end();
}

std::size_t KnowledgeGraph::index_of(std::string_view id) const {
  const auto it = index_.find(std::string(id));
  if (it == index_.end()) fail(ErrorCode::kUnknownEntity, std::string(id));
  return it->second;
}

std::vector<std::string> KnowledgeGraph::relations() const {
  std::set<std::string> out;
  for (const auto& t : rel_triples_) out.insert(t.relation);
  return {out.begin(), out.end()};
}

std::vector<std::string> KnowledgeGraph::attribute_labels() const {
  std::set<std::string> out;
  for (const auto& t : attr_triples_) out.insert(t.attribute);
  return {out.begin(), out.end()};
}

std::vector<std::string> KnowledgeGraph::literals() const {
  std::set<std::string> out;
  for (const auto& t : attr_triples_) out.insert(t.value);
  return {out.begin(), out.end()};
}

std::span<const Neighbor> KnowledgeGraph::neighbors(std::string_view id) const {
  return neighbors_[index_of(id)];
}

std::span<const AttributeEntry> KnowledgeGraph::attributes(std::string_view id) const {
  return attrs_[index_of(id)];
}

std::optional<std::string> KnowledgeGraph::name(std::string_view id) const {
  return names_[index_of(id)];
}

std::string KnowledgeGraph::display_name(std::string_view id) const {
  if (auto n = name(id)) return *n;
  return text::local_name(id);
}

KnowledgeGraph KnowledgeGraph::with_names(const std::map<EntityId, std::string>& names) const {
  auto merged = explicit_names_;
  for (const auto& [id, name] : names) merged[id] = name;
  return KnowledgeGraph(rel_triples_, attr_triples_, entities_, std::move(merged));
}

KgStats KnowledgeGraph::stats() const {
  return {entities_.size(), relations().size(), attribute_labels().size(), rel_triples_.size(),
          attr_triples_.size()};
}

DatasetFormat parse_dataset_format(std::string_view name) {
  if (name == "openea") return DatasetFormat::kOpenEA;
  if (name == "dbp15k") return DatasetFormat::kDbp15k;
  fail(ErrorCode::kConfigError, fmt::format("unknown dataset format '{}'", name));
}

std::string_view dataset_format_name(DatasetFormat format) {
  return format == DatasetFormat::kOpenEA ? "openea" : "dbp15k";
}

KnowledgeGraph parse_kg(const fs::path& dir, DatasetFormat format, int side) {
  if (side != 1 && side != 2) fail(ErrorCode::kUsageError, "side must be 1 or 2");
  if (!fs::is_directory(dir)) fail(ErrorCode::kMissingFile, dir.string());
  return format == DatasetFormat::kOpenEA ? parse_openea(dir, side) : parse_dbp15k(dir, side);
}

void check_one_to_one(std::span<const EntityPair> pairs) {
  std::unordered_set<std::string> sources;
  std::unordered_set<std::string> targets;
  for (const auto& p : pairs) {
    if (!sources.insert(p.source).second) {
      fail(ErrorCode::kNotOneToOne, fmt::format("source '{}' appears in more than one pair", p.source));
    }
    if (!targets.insert(p.target).second) {
      fail(ErrorCode::kNotOneToOne, fmt::format("target '{}' appears in more than one pair", p.target));
    }
  }
}

DatasetBundle load_bundle(const fs::path& dir, DatasetFormat format) {
  DatasetBundle bundle;
  bundle.source = parse_kg(dir, format, 1);
  bundle.target = parse_kg(dir, format, 2);

  if (format == DatasetFormat::kOpenEA) {
    const auto links = dir / "ent_links";
    const std::string origin = links.filename().string();
    for_each_tsv_line(links, 2, [&](std::size_t line, const auto& f) {
      EntityPair pair{std::string(f[0]), std::string(f[1])};
      if (!bundle.source.contains(pair.source)) {
        throw MalformedLineError(origin, line, fmt::format("unknown source entity '{}'", pair.source));
      }
      if (!bundle.target.contains(pair.target)) {
        throw MalformedLineError(origin, line, fmt::format("unknown target entity '{}'", pair.target));
      }
      bundle.gold.push_back(std::move(pair));
    });
  } else {
    const auto ids1 = parse_ent_ids(dir / "ent_ids_1");
    const auto ids2 = parse_ent_ids(dir / "ent_ids_2");
    const auto links = dir / "ref_ent_ids";
    const std::string origin = links.filename().string();
    for_each_tsv_line(links, 2, [&](std::size_t line, const auto& f) {
      const auto s = ids1.find(parse_int_field(f[0], origin, line));
      const auto t = ids2.find(parse_int_field(f[1], origin, line));
      if (s == ids1.end() || t == ids2.end()) {
        throw MalformedLineError(origin, line, "gold pair references an undeclared id");
      }
      bundle.gold.push_back({s->second, t->second});
    });
  }
  check_one_to_one(bundle.gold);

  bundle.meta.name = fs::absolute(dir).lexically_normal().filename().string();
  if (bundle.meta.name.empty()) bundle.meta.name = fs::absolute(dir).parent_path().filename().string();
  const auto langs = text::split(bundle.meta.name, '_');
  if (langs.size() == 2 && langs[0].size() == 2 && langs[1].size() == 2) {
    bundle.meta.source_language = std::string(langs[0]);
    bundle.meta.target_language = std::string(langs[1]);
  }
  return bundle;
}

std::map<EntityId, std::string> load_names(const fs::path& file) {
  std::map<EntityId, std::string> names;
  const std::string origin = file.filename().string();
  for_each_tsv_line(file, 2, [&](std::size_t line, const auto& f) {
    if (!names.emplace(std::string(f[0]), std::string(f[1])).second) {
      fail(ErrorCode::kDuplicateEntityId,
           fmt::format("{}:{}: name for '{}' given twice", origin, line, f[0]));
    }
  });
  return names;
}

namespace {

// The triple files have no quoting, so a tab or newline in a field would
// silently change the arity on the way back in.
const std::string& tsv_field(const std::string& f) {
  if (f.find_first_of("\t\n\r") != std::string::npos) {
    fail(ErrorCode::kMalformedLine, fmt::format("field \"{}\" contains a tab or line break", f));
  }
  return f;
}

}  // namespace

void write_openea_side(const fs::path& dir, const KnowledgeGraph& kg, int side) {
  std::string rel;
  for (const auto& t : kg.rel_triples()) {
    rel += fmt::format("{}\t{}\t{}\n", tsv_field(t.subject), tsv_field(t.relation), tsv_field(t.object));
  }
  std::string attr;
  for (const auto& t : kg.attr_triples()) {
    attr += fmt::format("{}\t{}\t{}\n", tsv_field(t.subject), tsv_field(t.attribute), tsv_field(t.value));
  }
  write_file_atomic(side_file(dir, "rel_triples", side), rel);
  write_file_atomic(side_file(dir, "attr_triples", side), attr);
}

void write_links(const fs::path& file, std::span<const EntityPair> pairs) {
  std::string out;
  for (const auto& p : pairs) out += fmt::format("{}\t{}\n", p.source, p.target);
  write_file_atomic(file, out);
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "val";
    case Split::kTest: return "test";
  }
  return "test";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kValidation;
  if (name == "test") return Split::kTest;
  fail(ErrorCode::kFormatError, fmt::format("unknown split tag '{}'", name));
}

SeedAlignments::SeedAlignments(std::vector<SeedPair> pairs) : pairs_(std::move(pairs)) {
  std::sort(pairs_.begin(), pairs_.end(), [](const SeedPair& a, const SeedPair& b) {
    return std::tie(a.source, a.target) < std::tie(b.source, b.target);
  });
  std::vector<EntityPair> plain;
  plain.reserve(pairs_.size());
  for (const auto& p : pairs_) plain.push_back({p.source, p.target});
  check_one_to_one(plain);
}

std::vector<EntityPair> SeedAlignments::pairs_in(Split split) const {
  std::vector<EntityPair> out;
  for (const auto& p : pairs_) {
    if (p.split == split) out.push_back({p.source, p.target});
  }
  return out;
}

std::size_t SeedAlignments::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(pairs_.begin(), pairs_.end(), [&](const SeedPair& p) { return p.split == split; }));
}

std::optional<Split> SeedAlignments::split_of(const EntityPair& pair) const {
  const auto it = std::lower_bound(pairs_.begin(), pairs_.end(), pair, [](const SeedPair& a, const EntityPair& b) {
    return std::tie(a.source, a.target) < std::tie(b.source, b.target);
  });
  if (it == pairs_.end() || it->source != pair.source || it->target != pair.target) return std::nullopt;
  return it->split;
}

namespace {

std::vector<EntityPair> sorted_pairs(std::span<const EntityPair> pairs) {
  std::vector<EntityPair> out(pairs.begin(), pairs.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t round_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratio));
}

}  // namespace

SeedAlignments make_split(std::span<const EntityPair> pairs, std::array<double, 3> ratios,
                          std::uint64_t seed) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    fail(ErrorCode::kRatioSumError,
         fmt::format("ratios ({}, {}, {}) must be non-negative and sum to 1", ratios[0], ratios[1], ratios[2]));
  }
  check_one_to_one(pairs);

  auto order = sorted_pairs(pairs);
  Rng rng(seed);
  rng.shuffle(std::span(order));

  const std::size_t n = order.size();
  const std::size_t n_train = std::min(n, round_count(n, ratios[0]));
  const std::size_t n_val = std::min(n - n_train, round_count(n, ratios[1]));

  std::vector<SeedPair> tagged;
  tagged.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Split tag = i < n_train ? Split::kTrain : (i < n_train + n_val ? Split::kValidation : Split::kTest);
    tagged.push_back({std::move(order[i].source), std::move(order[i].target), tag});
  }
  return SeedAlignments(std::move(tagged));
}

SeedAlignments make_hard_split(const DatasetBundle& bundle, const NameEmbedder& embed_names,
                               std::uint64_t seed) {
  if (bundle.gold.empty()) fail(ErrorCode::kEmptySeeds, "dataset has no gold pairs");
  const auto pairs = sorted_pairs(bundle.gold);
  check_one_to_one(pairs);

  std::vector<std::string> names;
  names.reserve(pairs.size() * 2);
  std::size_t missing = 0;
  for (const auto& p : pairs) {
    if (!bundle.source.name(p.source)) ++missing;
    names.push_back(bundle.source.display_name(p.source));
  }
  for (const auto& p : pairs) {
    if (!bundle.target.name(p.target)) ++missing;
    names.push_back(bundle.target.display_name(p.target));
  }
  if (missing > 0) {
    logger()->warn("hard split: {} entities have no name; using the id local name instead", missing);
  }

  std::vector<std::vector<float>> vectors;
  try {
    vectors = embed_names(names);
  } catch (const std::exception& e) {
    fail(ErrorCode::kEmbedderFailure, e.what());
  }
  if (vectors.size() != names.size()) {
    fail(ErrorCode::kEmbedderFailure,
         fmt::format("name embedder returned {} vectors for {} names", vectors.size(), names.size()));
  }

  const std::size_t n = pairs.size();
  std::vector<double> sims(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& u = vectors[i];
    const auto& v = vectors[n + i];
    if (u.size() != v.size()) fail(ErrorCode::kEmbedderFailure, "name vectors differ in dimension");
    double dot = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j) dot += static_cast<double>(u[j]) * v[j];
    sims[i] = dot;
  }

  // Pairs are already in (source, target) order, so a stable sort on
  // similarity gives the lexicographic tie-break.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] < sims[b]; });

  const std::size_t n_test = std::min(n, round_count(n, 0.6));
  const std::size_t n_train = std::min(n - n_test, round_count(n, 0.3));

  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(rest.begin(), rest.end());
  Rng rng(seed);
  rng.shuffle(std::span(rest));

  std::vector<SeedPair> tagged;
  tagged.reserve(n);
  for (std::size_t i = 0; i < n_test; ++i) {
    const auto& p = pairs[order[i]];
    tagged.push_back({p.source, p.target, Split::kTest});
  }
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const auto& p = pairs[rest[i]];
    tagged.push_back({p.source, p.target, i < n_train ? Split::kTrain : Split::kValidation});
  }
  return SeedAlignments(std::move(tagged));
}

std::string format_split_tsv(const SeedAlignments& seeds) {
  std::string out;
  for (const auto& p : seeds.pairs()) out += fmt::format("{}\t{}\t{}\n", p.source, p.target, split_name(p.split));
  return out;
}

SeedAlignments parse_split_tsv(std::string_view contents, const std::string& origin) {
  std::vector<SeedPair> pairs;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    auto line = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 3 || f[0].empty() || f[1].empty()) {
      throw MalformedLineError(origin, line_no, "expected source<TAB>target<TAB>{train|val|test}");
    }
    if (f[2] != "train" && f[2] != "val" && f[2] != "test") {
      throw MalformedLineError(origin, line_no, fmt::format("unknown split tag '{}'", f[2]));
    }
    pairs.push_back({std::string(f[0]), std::string(f[1]), parse_split(f[2])});
  }
  return SeedAlignments(std::move(pairs));
}

void check_seeds_against(const SeedAlignments& seeds, const DatasetBundle& bundle) {
  for (const auto& p : seeds.pairs()) {
    if (!bundle.source.contains(p.source)) {
      fail(ErrorCode::kKeyMismatch, fmt::format("split pair source '{}' is not in the source KG", p.source));
    }
    if (!bundle.target.contains(p.target)) {
      fail(ErrorCode::kKeyMismatch, fmt::format("split pair target '{}' is not in the target KG", p.target));
    }
  }
}

}  // namespace kgalign
