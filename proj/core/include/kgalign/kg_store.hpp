#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kgalign {

using EntityId = std::string;

struct RelationTriple {
  EntityId subject;
  std::string relation;
  EntityId object;

  friend auto operator<=>(const RelationTriple&, const RelationTriple&) = default;
};

struct AttributeTriple {
  EntityId subject;
  std::string attribute;
  std::string value;

  friend auto operator<=>(const AttributeTriple&, const AttributeTriple&) = default;
};

// One entry of N_e. `inverse` marks an in-edge (other, relation, e).
struct Neighbor {
  std::string relation;
  EntityId entity;
  bool inverse = false;

  friend auto operator<=>(const Neighbor&, const Neighbor&) = default;
};

// One entry of L_e.
struct AttributeEntry {
  std::string attribute;
  std::string value;

  friend auto operator<=>(const AttributeEntry&, const AttributeEntry&) = default;
};

struct KgStats {
  std::size_t entities = 0;
  std::size_t relations = 0;
  std::size_t attributes = 0;
  std::size_t rel_triples = 0;
  std::size_t attr_triples = 0;
};

// Attributes whose local name is name, label or prefLabel (any case).
bool is_name_attribute(std::string_view attribute);

// Immutable after construction; safe for concurrent reads.
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;

  // `extra_entities` declares entities that may have no triples. Explicit
  // `names` override names derived from name/label attributes.
  KnowledgeGraph(std::vector<RelationTriple> rel_triples,
                 std::vector<AttributeTriple> attr_triples,
                 std::vector<EntityId> extra_entities = {},
                 std::map<EntityId, std::string> names = {});

  const std::vector<EntityId>& entities() const { return entities_; }
  bool contains(std::string_view id) const;

  const std::vector<RelationTriple>& rel_triples() const { return rel_triples_; }
  const std::vector<AttributeTriple>& attr_triples() const { return attr_triples_; }

  std::vector<std::string> relations() const;
  std::vector<std::string> attribute_labels() const;
  std::vector<std::string> literals() const;

  // N_e: out-edges and inverse-flagged in-edges, in triple-list order.
  std::span<const Neighbor> neighbors(std::string_view id) const;
  // L_e, in triple-list order.
  std::span<const AttributeEntry> attributes(std::string_view id) const;

  std::optional<std::string> name(std::string_view id) const;
  // name(id), or the URI local name of the id when no name is known.
  std::string display_name(std::string_view id) const;

  KnowledgeGraph with_names(const std::map<EntityId, std::string>& names) const;

  KgStats stats() const;

 private:
  std::size_t index_of(std::string_view id) const;

  std::vector<EntityId> entities_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<RelationTriple> rel_triples_;
  std::vector<AttributeTriple> attr_triples_;
  std::vector<std::vector<Neighbor>> neighbors_;
  std::vector<std::vector<AttributeEntry>> attrs_;
  std::vector<std::optional<std::string>> names_;
  std::map<EntityId, std::string> explicit_names_;
};

enum class DatasetFormat { kOpenEA, kDbp15k };

DatasetFormat parse_dataset_format(std::string_view name);
std::string_view dataset_format_name(DatasetFormat format);

// Parses side 1 (source) or 2 (target) of a dataset directory.
KnowledgeGraph parse_kg(const std::filesystem::path& dir, DatasetFormat format, int side);

struct EntityPair {
  EntityId source;
  EntityId target;

  friend auto operator<=>(const EntityPair&, const EntityPair&) = default;
};

struct DatasetMeta {
  std::string name;
  std::string source_language;
  std::string target_language;
};

struct DatasetBundle {
  KnowledgeGraph source;
  KnowledgeGraph target;
  std::vector<EntityPair> gold;
  DatasetMeta meta;
};

// Loads both sides and the gold links (`ent_links` or `ref_ent_ids`).
DatasetBundle load_bundle(const std::filesystem::path& dir, DatasetFormat format);

// `id<TAB>name` lines, used for pre-translated names.
std::map<EntityId, std::string> load_names(const std::filesystem::path& file);

// Writes `rel_triples_<side>` and `attr_triples_<side>` in OpenEA layout.
void write_openea_side(const std::filesystem::path& dir, const KnowledgeGraph& kg, int side);
void write_links(const std::filesystem::path& file, std::span<const EntityPair> pairs);

enum class Split { kTrain, kValidation, kTest };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct SeedPair {
  EntityId source;
  EntityId target;
  Split split = Split::kTrain;

  friend bool operator==(const SeedPair&, const SeedPair&) = default;
};

// Tagged gold pairs; one-to-one across all tags. Stored sorted by
// (source, target).
class SeedAlignments {
 public:
  SeedAlignments() = default;
  explicit SeedAlignments(std::vector<SeedPair> pairs);

  const std::vector<SeedPair>& pairs() const { return pairs_; }
  std::vector<EntityPair> pairs_in(Split split) const;
  std::size_t count(Split split) const;
  std::optional<Split> split_of(const EntityPair& pair) const;

 private:
  std::vector<SeedPair> pairs_;
};

void check_one_to_one(std::span<const EntityPair> pairs);

// Counts are round-to-nearest of n * ratio for train and validation, the
// remainder goes to test.
SeedAlignments make_split(std::span<const EntityPair> pairs, std::array<double, 3> ratios,
                          std::uint64_t seed);

// Embeds a batch of names; row i belongs to names[i].
using NameEmbedder =
    std::function<std::vector<std::vector<float>>(std::span<const std::string> names)>;

// The 60% of gold pairs with lowest name similarity become test; the rest is
// split 30/10 (of the total) into train and validation.
SeedAlignments make_hard_split(const DatasetBundle& bundle, const NameEmbedder& embed_names,
                               std::uint64_t seed);

std::string format_split_tsv(const SeedAlignments& seeds);
SeedAlignments parse_split_tsv(std::string_view contents, const std::string& origin = "split");

void check_seeds_against(const SeedAlignments& seeds, const DatasetBundle& bundle);

}  // namespace kgalign
