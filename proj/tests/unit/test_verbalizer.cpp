#include <gtest/gtest.h>
#include <json.hpp>

#include "kgalign/error.hpp"
#include "kgalign/rng.hpp"
#include "kgalign/text.hpp"
#include "kgalign/verbalizer.hpp"
#include "test_support.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;

KnowledgeGraph paris() {
  return KnowledgeGraph({{"Paris", "capitalOf", "France"}}, {{"Paris", "population", "2.1M"}});
}

TEST(Serialize, SinglePairCase) {
  const auto seq = serialize_triples(paris(), "Paris");
  EXPECT_EQ(seq.tokens(), (std::vector<std::string>{"Paris", "capitalOf", "France", "population", "2.1M"}));
  EXPECT_FALSE(seq.truncated);
}

TEST(Serialize, NoTriplesKeepsName) {
  const KnowledgeGraph kg({}, {}, {"Q42"});
  EXPECT_EQ(serialize_triples(kg, "Q42").tokens(), std::vector<std::string>{"Q42"});
  EXPECT_EQ(render_template(serialize_triples(kg, "Q42")).text, "Q42.");
}

TEST(Serialize, RelationsSortedByLabel) {
  const KnowledgeGraph kg({{"p", "birthPlace", "Ulm"}, {"p", "almaMater", "ETH"}}, {});
  const auto tokens = serialize_triples(kg, "p").tokens();
  ASSERT_EQ(tokens.size(), 5u);
  EXPECT_EQ(tokens[1], "almaMater");
  EXPECT_EQ(tokens[3], "birthPlace");
}

TEST(Serialize, UnknownEntity) {
  try {
    serialize_triples(paris(), "Lyon");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownEntity);
  }
}

TEST(Template, RendersPairsAndInverse) {
  EXPECT_EQ(render_template(serialize_triples(paris(), "Paris")).text,
            "Paris. capitalOf: France. population: 2.1M.");
  const KnowledgeGraph kg({{"France", "contains", "Paris"}}, {});
  const auto v = render_template(serialize_triples(kg, "Paris"));
  EXPECT_EQ(v.text, "Paris. is contains of: France.");
  EXPECT_EQ(v.provenance, Provenance::kTemplate);
}

TEST(Template, LongValuesGetEllipsis) {
  const KnowledgeGraph kg({}, {{"e", "abstract", std::string(150, 'x')}});
  SerializeOptions o;
  o.max_value_chars = 100;
  const auto seq = serialize_triples(kg, "e", o);
  EXPECT_EQ(seq.attributes[0].value, std::string(100, 'x') + "…");
}

KnowledgeGraph random_graph(Rng& rng, std::vector<RelationTriple>& rel, std::vector<AttributeTriple>& attr) {
  rel.clear();
  attr.clear();
  for (int i = 0; i < 12; ++i) {
    rel.push_back({"hub", fmt::format("rel{}", rng.uniform_below(5)), fmt::format("n{}", rng.uniform_below(6))});
    rel.push_back({fmt::format("n{}", rng.uniform_below(6)), fmt::format("rel{}", rng.uniform_below(5)), "hub"});
    attr.push_back({"hub", fmt::format("attr{}", rng.uniform_below(4)), fmt::format("văl {}", rng.uniform_below(50))});
  }
  return KnowledgeGraph(rel, attr, {}, {{"hub", "Hub Entity"}});
}

TEST(Serialize, InvariantToTripleOrder) {
  Rng rng(1);
  std::vector<RelationTriple> rel;
  std::vector<AttributeTriple> attr;
  for (int trial = 0; trial < 20; ++trial) {
    const auto kg = random_graph(rng, rel, attr);
    const auto base = serialize_triples(kg, "hub").tokens();
    rng.shuffle(std::span(rel));
    rng.shuffle(std::span(attr));
    const KnowledgeGraph shuffled(rel, attr, {}, {{"hub", "Hub Entity"}});
    EXPECT_EQ(serialize_triples(shuffled, "hub").tokens(), base);
  }
}

TEST(Serialize, TruncationIsMonotonePrefix) {
  Rng rng(2);
  std::vector<RelationTriple> rel;
  std::vector<AttributeTriple> attr;
  for (int trial = 0; trial < 10; ++trial) {
    const auto kg = random_graph(rng, rel, attr);
    std::vector<std::string> previous;
    for (std::size_t budget = 5; budget < 800; budget += 17) {
      SerializeOptions o;
      o.budget = budget;
      const auto seq = serialize_triples(kg, "hub", o);
      const auto tokens = seq.tokens();
      ASSERT_GE(tokens.size(), previous.size());
      EXPECT_TRUE(std::equal(previous.begin(), previous.end(), tokens.begin()));
      EXPECT_EQ(tokens[0], "Hub Entity");
      // Pairs are never split.
      EXPECT_EQ(tokens.size() % 2, 1u);
      const auto v = render_template(seq);
      if (seq.relations.size() + seq.attributes.size() > 0) EXPECT_LE(rendered_length(seq), budget);
      EXPECT_NE(v.text.find("Hub Entity"), std::string::npos);
      EXPECT_EQ(v.truncated, seq.truncated);
      previous = tokens;
    }
  }
}

TEST(Serialize, AttributeOnlyModeHidesNames) {
  const KnowledgeGraph kg({{"e1", "r", "e2"}}, {{"e1", "name", "Secret"}, {"e1", "year", "1990"}});
  SerializeOptions o;
  o.use_names = false;
  const auto text = render_template(serialize_triples(kg, "e1", o)).text;
  EXPECT_EQ(text.find("Secret"), std::string::npos);
  EXPECT_EQ(text, "e1. r: e2. year: 1990.");
}

TEST(Prompt, FourPartsInOrderAndDeterministic) {
  const auto seq = serialize_triples(paris(), "Paris");
  const auto p = build_prompt("person", seq);
  const auto task = p.find("### Task");
  const auto instr = p.find("short and precise description");
  const auto format = p.find("### Format");
  const auto example = p.find("### Example");
  const auto entity = p.find("Paris | capitalOf | France");
  ASSERT_NE(task, std::string::npos);
  EXPECT_NE(p.find("\"person\""), std::string::npos);
  EXPECT_LT(task, instr);
  EXPECT_LT(instr, format);
  EXPECT_LT(format, example);
  EXPECT_LT(example, entity);
  EXPECT_EQ(p, build_prompt("person", seq));
  EXPECT_EQ(entity_types().size(), 25u);
  try {
    build_prompt("spaceship", seq);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownEntityType);
  }
}

TEST(TextsTsv, RoundTrip) {
  std::vector<VerbalizedEntity> v{{"a\tb", "line\nbreak\\", Provenance::kExternalModel, true},
                                  {"c", "plain", Provenance::kTemplate, false}};
  const auto back = parse_texts_tsv(format_texts_tsv(v));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].entity_id, "a\tb");
  EXPECT_EQ(back[0].text, "line\nbreak\\");
  EXPECT_EQ(back[0].provenance, Provenance::kExternalModel);
  EXPECT_TRUE(back[0].truncated);
  EXPECT_EQ(back[1].text, "plain");
}

class ExternalVerbalizerTest : public ::testing::Test {
 protected:
  ExternalVerbalizer make(int retries = 1) {
    return ExternalVerbalizer(ServiceClient(make_http_transport(service.url(), std::chrono::seconds(5)), retries),
                              ResponseCache(cache_dir.path()), {});
  }
  testing::FakeService service;
  testing::TempDir cache_dir;
};

TEST_F(ExternalVerbalizerTest, CachesResponses) {
  std::string last_prompt;
  service.on("/generate", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body);
    last_prompt = body.at("prompt");
    EXPECT_EQ(body.at("max_tokens"), 256);
    res.set_content(json{{"text", "  Paris is the capital of France.  "}}.dump(), "application/json");
  });
  service.start();
  const auto seq = serialize_triples(paris(), "Paris");
  const auto v = make().verbalize(seq);
  EXPECT_EQ(v.text, "Paris is the capital of France.");
  EXPECT_EQ(v.provenance, Provenance::kExternalModel);
  EXPECT_EQ(last_prompt, build_prompt("person", seq));
  EXPECT_EQ(service.requests(), 1);
  ASSERT_EQ(make().verbalize(seq).text, v.text);
  EXPECT_EQ(service.requests(), 1);
}

TEST_F(ExternalVerbalizerTest, EmptyGenerationFallsBack) {
  testing::LogCapture log;
  service.on("/generate", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"text": ""})", "application/json");
  });
  service.start();
  const auto seq = serialize_triples(paris(), "Paris");
  const auto v = make().verbalize(seq);
  EXPECT_EQ(v.text, render_template(seq).text);
  EXPECT_EQ(v.provenance, Provenance::kTemplate);
  EXPECT_FALSE(v.truncated);
  EXPECT_TRUE(log.contains("empty generation"));
}

TEST_F(ExternalVerbalizerTest, RetryExhaustionSurfacesStatus) {
  service.on("/generate", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  service.start();
  try {
    make(1).verbalize(serialize_triples(paris(), "Paris"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kServiceErrorStatus);
  }
  EXPECT_EQ(service.requests(), 2);
}

TEST_F(ExternalVerbalizerTest, UnreachableService) {
  ExternalVerbalizer v(ServiceClient(make_http_transport("http://127.0.0.1:1", std::chrono::seconds(1)), 0),
                       ResponseCache(), {});
  try {
    v.verbalize(serialize_triples(paris(), "Paris"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kServiceUnreachable);
  }
}

TEST_F(ExternalVerbalizerTest, BatchPreservesOrder) {
  service.on("/generate", [](const httplib::Request& req, httplib::Response& res) {
    const std::string prompt = json::parse(req.body).at("prompt");
    const auto at = prompt.rfind("Triples:\n");
    const auto name = prompt.substr(at + 9, prompt.find(' ', at + 9) - at - 9);
    res.set_content(json{{"text", "about " + name}}.dump(), "application/json");
  });
  service.start();
  std::vector<RelationTriple> rel;
  for (int i = 0; i < 30; ++i) rel.push_back({fmt::format("e{:02}", i), "r", "hub"});
  const KnowledgeGraph kg(rel, {});
  std::vector<TripleSequence> seqs;
  for (int i = 0; i < 30; ++i) seqs.push_back(serialize_triples(kg, fmt::format("e{:02}", i)));
  const auto out = make().verbalize_all(seqs);
  for (int i = 0; i < 30; ++i) EXPECT_EQ(out[i].text, fmt::format("about e{:02}", i));
}

}  // namespace
}  // namespace kgalign
