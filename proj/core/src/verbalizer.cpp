#include "kgalign/verbalizer.hpp"

#include <algorithm>
#include <array>

#include <fmt/format.h>
#include <json.hpp>

#include "kgalign/error.hpp"
#include "kgalign/log.hpp"
#include "kgalign/parallel.hpp"
#include "kgalign/text.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;

constexpr std::string_view kEllipsis = "…";

std::string relation_piece(const RelationToken& r) {
  return r.inverse ? fmt::format("is {} of: {}", r.relation, r.neighbor)
                   : fmt::format("{}: {}", r.relation, r.neighbor);
}

std::string attribute_piece(const AttributeToken& a) { return fmt::format("{}: {}", a.attribute, a.value); }

// Appending a piece costs two code points either way: " piece." opens a
// group, "; piece" extends one.
constexpr std::size_t piece_cost(std::size_t piece_len) { return piece_len + 2; }

const std::array<std::string, 25>& type_list() {
  static const std::array<std::string, 25> types = {
      "person",      "organization", "location",  "country",         "city",
      "company",     "university",   "movie",     "book",            "album",
      "song",        "television show", "sports team", "event",      "disease",
      "drug",        "gene",         "species",   "language",        "software",
      "award",       "building",     "vehicle",   "artwork",         "political party",
  };
  return types;
}

}  // namespace

std::string_view provenance_name(Provenance p) {
  return p == Provenance::kTemplate ? "template" : "external_model";
}

std::vector<std::string> TripleSequence::tokens() const {
  std::vector<std::string> out;
  out.reserve(1 + 2 * (relations.size() + attributes.size()));
  out.push_back(name);
  for (const auto& r : relations) {
    out.push_back(r.inverse ? fmt::format("is {} of", r.relation) : r.relation);
    out.push_back(r.neighbor);
  }
  for (const auto& a : attributes) {
    out.push_back(a.attribute);
    out.push_back(a.value);
  }
  return out;
}

TripleSequence serialize_triples(const KnowledgeGraph& kg, std::string_view entity,
                                 const SerializeOptions& options) {
  if (!kg.contains(entity)) fail(ErrorCode::kUnknownEntity, std::string(entity));

  const auto name_of = [&](std::string_view id) {
    return options.use_names ? kg.display_name(id) : std::string(id);
  };

  TripleSequence seq;
  seq.entity_id = std::string(entity);
  seq.name = name_of(entity);

  std::vector<RelationToken> relations;
  if (options.include_relations) {
    for (const auto& n : kg.neighbors(entity)) {
      relations.push_back({text::local_name(n.relation), name_of(n.entity), n.inverse});
    }
    std::sort(relations.begin(), relations.end());
  }

  std::vector<AttributeToken> attributes;
  if (options.include_attributes) {
    for (const auto& a : kg.attributes(entity)) {
      if (!options.use_names && is_name_attribute(a.attribute)) continue;
      attributes.push_back({text::local_name(a.attribute), a.value});
    }
    std::sort(attributes.begin(), attributes.end());
    for (auto& a : attributes) {
      if (text::codepoint_count(a.value) > options.max_value_chars) {
        a.value = text::truncate_codepoints(a.value, options.max_value_chars) + std::string(kEllipsis);
      }
    }
  }

  // Keep whole pairs while the rendered text fits; stop at the first pair that
  // does not, so a smaller budget always yields a prefix.
  std::size_t used = text::codepoint_count(seq.name) + 1;
  bool stopped = false;
  for (auto& r : relations) {
    const auto cost = piece_cost(text::codepoint_count(relation_piece(r)));
    if (used + cost > options.budget) {
      stopped = true;
      break;
    }
    used += cost;
    seq.relations.push_back(std::move(r));
  }
  if (!stopped) {
    for (auto& a : attributes) {
      const auto cost = piece_cost(text::codepoint_count(attribute_piece(a)));
      if (used + cost > options.budget) {
        stopped = true;
        break;
      }
      used += cost;
      seq.attributes.push_back(std::move(a));
    }
  }
  seq.truncated = stopped;
  return seq;
}

VerbalizedEntity render_template(const TripleSequence& seq) {
  std::string text = seq.name + ".";
  if (!seq.relations.empty()) {
    text += ' ';
    for (std::size_t i = 0; i < seq.relations.size(); ++i) {
      if (i > 0) text += "; ";
      text += relation_piece(seq.relations[i]);
    }
    text += '.';
  }
  if (!seq.attributes.empty()) {
    text += ' ';
    for (std::size_t i = 0; i < seq.attributes.size(); ++i) {
      if (i > 0) text += "; ";
      text += attribute_piece(seq.attributes[i]);
    }
    text += '.';
  }
  return {seq.entity_id, std::move(text), Provenance::kTemplate, seq.truncated};
}

std::size_t rendered_length(const TripleSequence& seq) {
  return text::codepoint_count(render_template(seq).text);
}

std::span<const std::string> entity_types() { return type_list(); }

std::string build_prompt(std::string_view entity_type, const TripleSequence& seq) {
  const auto& types = type_list();
  if (std::find(types.begin(), types.end(), entity_type) == types.end()) {
    fail(ErrorCode::kUnknownEntityType, std::string(entity_type));
  }

  std::string prompt;
  // (1) Task prefix with the entity type.
  prompt += fmt::format(
      "### Task\nYou are given the knowledge graph triples of one entity of type \"{}\". "
      "Each triple links the entity to a related entity or to a literal value.\n\n",
      entity_type);
  // (2) Description instruction.
  prompt +=
      "### Instruction\nWrite a short and precise description of the entity in English that "
      "states every fact contained in the triples and nothing else.\n\n";
  // (3) Formats.
  prompt +=
      "### Format\nTriples are given one per line as: subject | predicate | object. "
      "A predicate written as \"is P of\" means the related entity has predicate P pointing at "
      "the subject. Answer with a single paragraph of plain text after \"Description:\".\n\n";
  // (4) Worked example.
  prompt +=
      "### Example\nTriples:\n"
      "Marie Curie | field | physics\n"
      "Marie Curie | birthPlace | Warsaw\n"
      "Marie Curie | is doctoralAdvisor of | Marguerite Perey\n"
      "Description: Marie Curie was a physicist born in Warsaw who was the doctoral advisor of "
      "Marguerite Perey.\n\n";

  prompt += "### Entity\nTriples:\n";
  for (const auto& r : seq.relations) {
    prompt += fmt::format("{} | {} | {}\n", seq.name,
                          r.inverse ? fmt::format("is {} of", r.relation) : r.relation, r.neighbor);
  }
  for (const auto& a : seq.attributes) prompt += fmt::format("{} | {} | {}\n", seq.name, a.attribute, a.value);
  if (seq.relations.empty() && seq.attributes.empty()) prompt += fmt::format("{}\n", seq.name);
  prompt += "Description:";
  return prompt;
}

ExternalVerbalizer::ExternalVerbalizer(ServiceClient client, ResponseCache cache,
                                       ExternalVerbalizerOptions options)
    : client_(std::move(client)), cache_(std::move(cache)), options_(std::move(options)) {
  const auto& types = type_list();
  if (std::find(types.begin(), types.end(), options_.entity_type) == types.end()) {
    fail(ErrorCode::kUnknownEntityType, options_.entity_type);
  }
}

VerbalizedEntity ExternalVerbalizer::verbalize(const TripleSequence& seq) const {
  const json request = {{"prompt", build_prompt(options_.entity_type, seq)},
                        {"max_tokens", options_.max_tokens}};
  const std::string body = request.dump();
  const std::string key = ResponseCache::key_for("/generate\n" + body);

  std::string generated;
  if (auto hit = cache_.get(key)) {
    generated = std::move(*hit);
  } else {
    const auto response = client_.post("/generate", body);
    json parsed;
    try {
      parsed = json::parse(response);
      generated = parsed.at("text").get<std::string>();
    } catch (const json::exception& e) {
      fail(ErrorCode::kServiceErrorStatus, fmt::format("malformed /generate response: {}", e.what()));
    }
    generated = std::string(text::trim(generated));
    if (!generated.empty()) cache_.put(key, generated);
  }

  if (generated.empty()) {
    logger()->warn("empty generation for entity '{}'; using template text", seq.entity_id);
    return render_template(seq);
  }
  return {seq.entity_id, std::move(generated), Provenance::kExternalModel, seq.truncated};
}

std::vector<VerbalizedEntity> ExternalVerbalizer::verbalize_all(std::span<const TripleSequence> seqs) const {
  std::vector<VerbalizedEntity> out(seqs.size());
  parallel_for(seqs.size(), static_cast<std::size_t>(std::max(1, options_.parallelism)),
               [&](std::size_t i) { out[i] = verbalize(seqs[i]); });
  return out;
}

std::string format_texts_tsv(std::span<const VerbalizedEntity> entities) {
  std::string out;
  for (const auto& e : entities) {
    out += fmt::format("{}\t{}\t{}\t{}\n", text::escape_tsv(e.entity_id), provenance_name(e.provenance),
                       e.truncated ? 1 : 0, text::escape_tsv(e.text));
  }
  return out;
}

std::vector<VerbalizedEntity> parse_texts_tsv(std::string_view contents) {
  std::vector<VerbalizedEntity> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    const auto line = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 4 || (f[1] != "template" && f[1] != "external_model") || (f[2] != "0" && f[2] != "1")) {
      throw MalformedLineError("texts", line_no, "expected id<TAB>provenance<TAB>truncated<TAB>text");
    }
    out.push_back({text::unescape_tsv(f[0]), text::unescape_tsv(f[3]),
                   f[1] == "template" ? Provenance::kTemplate : Provenance::kExternalModel, f[2] == "1"});
  }
  return out;
}

}  // namespace kgalign
