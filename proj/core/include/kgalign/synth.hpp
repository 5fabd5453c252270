#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kgalign/kg_store.hpp"

namespace kgalign {

// Groups of interchangeable tokens. Substitution replaces a token by another
// member of its group.
class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(std::vector<std::vector<std::string>> groups);

  // The vocabulary the generator draws names, labels and values from.
  static const Lexicon& builtin();
  // One group per line, members separated by commas or tabs; '#' starts a
  // comment.
  static Lexicon parse(std::string_view contents, const std::string& origin = "lexicon");
  static Lexicon load(const std::filesystem::path& file);

  const std::vector<std::vector<std::string>>& groups() const { return groups_; }
  // Group of a token (case-insensitive), or -1.
  int group_of(std::string_view token) const;

 private:
  std::vector<std::vector<std::string>> groups_;
  std::unordered_map<std::string, int> index_;
};

struct SynthOptions {
  std::size_t entities = 2000;
  std::size_t name_words = 3;
  std::size_t min_attributes = 2;
  std::size_t max_attributes = 5;
  std::size_t relations_per_entity = 2;
  std::uint64_t seed = 0;

  // Perturbations applied to the target clone.
  double attribute_dropout = 0.0;
  // Per-token chance for names and values; per-label chance for predicates
  // (a renamed predicate is renamed everywhere in the target KG).
  double synonym_rate = 0.0;
  double triple_dropout = 0.0;
};

// A source KG and a perturbed target clone with opaque, renamed ids; gold
// covers every entity. With all rates at zero the two sides verbalize to
// identical texts.
DatasetBundle generate_synthetic(const SynthOptions& options, const Lexicon& substitutions = Lexicon::builtin());

// OpenEA layout: rel_triples_{1,2}, attr_triples_{1,2}, ent_links.
void write_synthetic(const DatasetBundle& bundle, const std::filesystem::path& dir);

}  // namespace kgalign
