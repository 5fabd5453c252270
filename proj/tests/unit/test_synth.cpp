#include <gtest/gtest.h>

#include <map>
#include <set>

#include "kgalign/error.hpp"
#include "kgalign/synth.hpp"
#include "kgalign/verbalizer.hpp"
#include "test_support.hpp"

namespace kgalign {
namespace {

std::map<EntityId, std::string> texts_of(const KnowledgeGraph& kg) {
  std::map<EntityId, std::string> out;
  for (const auto& e : kg.entities()) out[e] = render_template(serialize_triples(kg, e)).text;
  return out;
}

TEST(Synth, NoiseFreeCloneVerbalizesIdentically) {
  SynthOptions o;
  o.entities = 200;
  o.seed = 3;
  const auto b = generate_synthetic(o);
  EXPECT_EQ(b.source.entities().size(), 200u);
  EXPECT_EQ(b.target.entities().size(), 200u);
  ASSERT_EQ(b.gold.size(), 200u);
  const auto src = texts_of(b.source);
  const auto tgt = texts_of(b.target);
  std::set<std::string> distinct;
  for (const auto& p : b.gold) {
    EXPECT_NE(p.source, p.target);
    EXPECT_EQ(src.at(p.source), tgt.at(p.target));
    distinct.insert(src.at(p.source));
  }
  // Texts identify their entity.
  EXPECT_GT(distinct.size(), 190u);
}

TEST(Synth, SeededAndPerturbed) {
  SynthOptions o;
  o.entities = 100;
  o.seed = 4;
  o.synonym_rate = 0.5;
  o.attribute_dropout = 0.3;
  const auto a = generate_synthetic(o);
  const auto b = generate_synthetic(o);
  EXPECT_EQ(a.gold, b.gold);
  EXPECT_EQ(a.target.attr_triples(), b.target.attr_triples());
  EXPECT_LT(a.target.attr_triples().size(), a.source.attr_triples().size());
  const auto src = texts_of(a.source);
  const auto tgt = texts_of(a.target);
  std::size_t changed = 0;
  for (const auto& p : a.gold) changed += src.at(p.source) != tgt.at(p.target);
  EXPECT_GT(changed, 80u);
  o.seed = 5;
  EXPECT_NE(generate_synthetic(o).target.attr_triples(), a.target.attr_triples());
}

TEST(Synth, WriteThenLoad) {
  SynthOptions o;
  o.entities = 50;
  o.triple_dropout = 0.2;
  const auto b = generate_synthetic(o);
  testing::TempDir dir;
  write_synthetic(b, dir.path());
  const auto back = load_bundle(dir.path(), DatasetFormat::kOpenEA);
  EXPECT_EQ(back.gold.size(), b.gold.size());
  EXPECT_EQ(back.source.rel_triples().size(), b.source.rel_triples().size());
  EXPECT_EQ(back.target.attr_triples().size(), b.target.attr_triples().size());
}

TEST(LexiconParse, GroupsAndComments) {
  const auto lex = Lexicon::parse("# colours\nred, crimson\tscarlet\n\nbig,large # size\n");
  ASSERT_EQ(lex.groups().size(), 2u);
  EXPECT_EQ(lex.groups()[0], (std::vector<std::string>{"red", "crimson", "scarlet"}));
  EXPECT_EQ(lex.group_of("Crimson"), 0);
  EXPECT_EQ(lex.group_of("large"), 1);
  EXPECT_EQ(lex.group_of("tiny"), -1);
  EXPECT_FALSE(Lexicon::builtin().groups().empty());
}

TEST(LexiconParse, TokensOutsideTheLexiconStay) {
  const Lexicon lex(std::vector<std::vector<std::string>>{{"alpha", "beta"}});
  SynthOptions o;
  o.entities = 20;
  o.synonym_rate = 1.0;
  // Tokens outside the lexicon stay put, so the clone is unchanged.
  const auto b = generate_synthetic(o, lex);
  const auto src = texts_of(b.source);
  const auto tgt = texts_of(b.target);
  for (const auto& p : b.gold) EXPECT_EQ(src.at(p.source), tgt.at(p.target));
}

}  // namespace
}  // namespace kgalign
