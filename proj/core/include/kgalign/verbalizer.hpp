#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgalign/kg_store.hpp"
#include "kgalign/service_client.hpp"

namespace kgalign {

enum class Provenance { kTemplate, kExternalModel };

std::string_view provenance_name(Provenance p);

struct VerbalizedEntity {
  EntityId entity_id;
  std::string text;
  Provenance provenance = Provenance::kTemplate;
  bool truncated = false;
};

struct RelationToken {
  std::string relation;
  std::string neighbor;
  bool inverse = false;

  friend auto operator<=>(const RelationToken&, const RelationToken&) = default;
};

struct AttributeToken {
  std::string attribute;
  std::string value;

  friend auto operator<=>(const AttributeToken&, const AttributeToken&) = default;
};

// x = (e, r_1, e_1, ..., r_k, e_k, a_1, v_1, ..., a_m, v_m) in canonical order:
// relations by (label, neighbor, direction), attributes by (label, value).
struct TripleSequence {
  EntityId entity_id;
  std::string name;
  std::vector<RelationToken> relations;
  std::vector<AttributeToken> attributes;
  bool truncated = false;

  // Flat token list; inverse relations appear as "is <rel> of".
  std::vector<std::string> tokens() const;
};

struct SerializeOptions {
  // Budget on the rendered template length, in code points.
  std::size_t budget = 2048;
  bool include_relations = true;
  bool include_attributes = true;
  // When false, entity ids stand in for names and name attributes are
  // left out (attribute-only side information).
  bool use_names = true;
  std::size_t max_value_chars = 100;
};

TripleSequence serialize_triples(const KnowledgeGraph& kg, std::string_view entity,
                                 const SerializeOptions& options = {});

// "{name}. {rel}: {obj}; .... {attr}: {val}; ...."
VerbalizedEntity render_template(const TripleSequence& seq);

// Code point length that render_template would produce.
std::size_t rendered_length(const TripleSequence& seq);

// The predefined entity type list accepted by build_prompt.
std::span<const std::string> entity_types();

// Four-part generation prompt: task prefix naming the entity type, the
// short-description instruction, the triple/text format, one worked example,
// followed by the entity's own triples.
std::string build_prompt(std::string_view entity_type, const TripleSequence& seq);

struct ExternalVerbalizerOptions {
  std::string entity_type = "person";
  int max_tokens = 256;
  int parallelism = 4;
};

// Client for POST /generate {"prompt", "max_tokens"} -> {"text"}.
class ExternalVerbalizer {
 public:
  ExternalVerbalizer(ServiceClient client, ResponseCache cache, ExternalVerbalizerOptions options);

  // Empty generations fall back to render_template with a logged warning.
  VerbalizedEntity verbalize(const TripleSequence& seq) const;

  // Order-preserving; up to `parallelism` requests in flight.
  std::vector<VerbalizedEntity> verbalize_all(std::span<const TripleSequence> seqs) const;

 private:
  ServiceClient client_;
  ResponseCache cache_;
  ExternalVerbalizerOptions options_;
};

// id<TAB>text lines with TSV escaping. Entity order is preserved.
std::string format_texts_tsv(std::span<const VerbalizedEntity> entities);
std::vector<VerbalizedEntity> parse_texts_tsv(std::string_view contents);

}  // namespace kgalign
