#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>
#include <set>

#include "kgalign/error.hpp"
#include "kgalign/eval.hpp"
#include "kgalign/reranker.hpp"
#include "kgalign/retrieval.hpp"
#include "kgalign/rng.hpp"
#include "test_support.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;
using testing::gradient_relative_error;

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kStageFailure;
}

MlpScorerConfig small_config(std::uint32_t df = 64, std::size_t hidden = 8) {
  MlpScorerConfig c;
  c.features = {3, df};
  c.hidden = hidden;
  c.seed = 1;
  return c;
}

std::string random_word(Rng& rng, std::size_t len) {
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w += static_cast<char>('a' + rng.uniform_below(26));
  return w;
}

TEST(MlpScorer, HandSetProductWeightsPreferOverlap) {
  const std::uint32_t df = 1u << 14;
  MlpScorer s(small_config(df, 4));
  const std::size_t in = s.input_dim();
  for (std::size_t i = 0; i < s.parameter_count(); ++i) s.set_parameter(i, 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 2 * df; c < 3 * df; ++c) s.set_parameter(r * in + c, 1.0);
    s.set_parameter(4 * in + 4 + r, 1.0);  // w2
  }
  const double same = s.score_pair("knowledge graph", "knowledge graph");
  const double disjoint = s.score_pair("knowledge graph", "xyzzy qwv");
  EXPECT_GT(same, disjoint);
  // Disjoint n-grams leave every hidden unit at softplus(0).
  EXPECT_NEAR(disjoint, 4 * std::log(2.0), 1e-6);
}

TEST(MlpScorer, DeterministicAndSymmetrize) {
  MlpScorer plain(small_config());
  const double a = plain.score_pair("Paris France", "Paris, capital");
  EXPECT_EQ(a, plain.score_pair("Paris France", "Paris, capital"));
  auto cfg = small_config();
  cfg.symmetrize = true;
  MlpScorer sym(cfg);
  EXPECT_DOUBLE_EQ(sym.score_pair("alpha beta", "gamma delta"), sym.score_pair("gamma delta", "alpha beta"));
  EXPECT_NE(plain.score_pair("alpha beta", "gamma delta"), plain.score_pair("gamma delta", "alpha beta"));
}

TEST(MlpScorer, SerializeRoundTrip) {
  auto encoder = std::make_shared<ProjectionModel>(6, FeaturizerOptions{3, 128}, true, 0.05, 3);
  for (const auto& enc : {std::shared_ptr<ProjectionModel>(), encoder}) {
    MlpScorer s(small_config(), enc);
    const auto back = MlpScorer::deserialize(s.serialize());
    EXPECT_TRUE(back == s);
    EXPECT_EQ(back.serialize(), s.serialize());
    EXPECT_EQ(back.score_pair("x y z", "x y w"), s.score_pair("x y z", "x y w"));
    auto bytes = s.serialize();
    bytes.resize(bytes.size() - 3);
    EXPECT_EQ(code_of([&] { MlpScorer::deserialize(bytes); }), ErrorCode::kFormatError);
  }
}

TEST(RerankLoss, Oracles) {
  MlpScorer s(small_config());
  const auto u = s.features_of("source entity");
  const auto v = s.features_of("target entity");
  EXPECT_EQ(rerank_loss(s, u, v, {}).loss, 0.0);
  const std::vector<TextFeatures> same(110, v);
  EXPECT_NEAR(rerank_loss(s, u, v, same).loss, std::log(111.0), 1e-9);
}

double fd_error(const MlpScorer& s, const TextFeatures& u, const TextFeatures& v,
                std::span<const TextFeatures> negs) {
  const auto l = rerank_loss(s, u, v, negs);
  std::vector<double> analytic, numeric;
  const double h = 1e-6;
  for (std::size_t i = 0; i < s.parameter_count(); ++i) {
    const MlpPerturbation plus{i, h};
    const MlpPerturbation minus{i, -h};
    numeric.push_back((rerank_loss(s, u, v, negs, &plus).loss - rerank_loss(s, u, v, negs, &minus).loss) / (2 * h));
    analytic.push_back(l.gradient.at(i));
  }
  return gradient_relative_error(analytic, numeric);
}

TEST(RerankLoss, FiniteDifferenceGradient) {
  Rng rng(21);
  auto encoder = std::make_shared<ProjectionModel>(4, FeaturizerOptions{3, 32}, true, 0.05, 3);
  for (const bool symmetrize : {false, true}) {
    for (const auto& enc : {std::shared_ptr<ProjectionModel>(), encoder}) {
      auto cfg = small_config(32, 6);
      cfg.symmetrize = symmetrize;
      MlpScorer s(cfg, enc);
      const auto u = s.features_of(random_word(rng, 12));
      const auto v = s.features_of(random_word(rng, 12));
      std::vector<TextFeatures> negs;
      for (int i = 0; i < 4; ++i) negs.push_back(s.features_of(random_word(rng, 10)));
      EXPECT_LT(fd_error(s, u, v, negs), 1e-4) << "symmetrize " << symmetrize << " encoder " << bool(enc);
    }
  }
}

TEST(RerankLoss, WrongFeatureShapeRejected) {
  MlpScorer s(small_config(64));
  MlpScorer other(small_config(128));
  const auto u = s.features_of("abc");
  const auto v = other.features_of("abd");
  EXPECT_EQ(code_of([&] { rerank_loss(s, u, v, {}); }), ErrorCode::kDimensionMismatch);
}

TEST(RerankLoss, EqualsEmbedderLossForDotProductScorer) {
  Rng rng(22);
  auto model = std::make_shared<ProjectionModel>(8, FeaturizerOptions{3, 256}, true, 1.0, 4);
  const EmbeddingDotScorer dot(std::make_shared<ProjectionEmbedder>(model));
  for (int trial = 0; trial < 10; ++trial) {
    const auto u = random_word(rng, 15);
    const auto v = random_word(rng, 15);
    std::vector<std::string> negs;
    std::vector<FeatureVector> neg_features;
    for (int i = 0; i < 5; ++i) {
      negs.push_back(random_word(rng, 14));
      neg_features.push_back(featurize(negs.back(), model->featurizer()));
    }
    const double want =
        contrastive_loss(*model, featurize(u, model->featurizer()), featurize(v, model->featurizer()), neg_features)
            .loss;
    EXPECT_NEAR(rerank_loss_value(dot, u, v, negs), want, 1e-5);
  }
}

// Texts where the gold shares one rare token with the source while every
// distractor shares a long common prefix.
struct RareTokenTask {
  EntityTexts texts;
  std::vector<CandidateSet> candidates;
  std::vector<EntityPair> train, val;
};

RareTokenTask rare_token_task(std::size_t n_train, std::size_t n_val, std::uint64_t seed) {
  Rng rng(seed);
  RareTokenTask t;
  const std::string common = "entity in the shared catalogue ";
  for (std::size_t i = 0; i < n_train + n_val; ++i) {
    const auto s = fmt::format("s{:03}", i);
    const auto g = fmt::format("g{:03}", i);
    const auto rare = random_word(rng, 7);
    t.texts.source[s] = common + rare;
    t.texts.target[g] = rare + " item";
    CandidateSet set{s, {}};
    for (int k = 0; k < 6; ++k) {
      const auto d = fmt::format("d{:03}_{}", i, k);
      t.texts.target[d] = common + random_word(rng, 7);
      set.candidates.push_back({d, 1.0 - 0.1 * k});
    }
    // Retrieval put the gold third.
    set.candidates.insert(set.candidates.begin() + 2, {g, 0.85});
    t.candidates.push_back(set);
    (i < n_train ? t.train : t.val).push_back({s, g});
  }
  return t;
}

double val_hits1(const MlpScorer& s, const RareTokenTask& t) {
  std::vector<CandidateSet> val_sets(t.candidates.begin() + t.train.size(), t.candidates.end());
  return hits_at_k(rerank(s, val_sets, t.texts), t.val, 1);
}

RerankTrainingOptions rare_options() {
  RerankTrainingOptions o;
  o.negatives = 6;
  o.epochs = 8;
  o.learning_rate = 0.01;
  o.batch_size = 8;
  o.seed = 2;
  return o;
}

TEST(RerankTraining, ZeroEpochsLeavesScorerUnchanged) {
  const auto t = rare_token_task(10, 5, 1);
  MlpScorer s(small_config(256, 16));
  const auto before = s;
  auto o = rare_options();
  o.epochs = 0;
  train_reranker(s, t.candidates, t.train, t.texts, o);
  EXPECT_TRUE(s == before);
}

TEST(RerankTraining, LearnsRareSharedToken) {
  const auto t = rare_token_task(60, 30, 3);
  MlpScorer s(small_config(1024, 16));
  const double before = val_hits1(s, t);
  const auto curve =
      train_reranker(s, t.candidates, t.train, t.texts, rare_options(), [&](const MlpScorer& m) {
        return val_hits1(m, t);
      });
  ASSERT_EQ(curve.validation.size(), rare_options().epochs + 1);
  EXPECT_DOUBLE_EQ(curve.validation[0], before);
  EXPECT_GT(val_hits1(s, t), before);
  EXPECT_LT(curve.epoch_loss.back(), curve.epoch_loss.front());

  // The gold that retrieval ranked third is first after training.
  const std::vector<CandidateSet> first{t.candidates[0]};
  EXPECT_EQ(first[0].candidates[2].target, t.train[0].target);
  EXPECT_EQ(rerank(s, first, t.texts)[0].candidates[0].target, t.train[0].target);
}

TEST(RerankTraining, SameSeedSameWeights) {
  const auto t = rare_token_task(20, 5, 4);
  MlpScorer a(small_config(256, 8));
  MlpScorer b(small_config(256, 8));
  auto o = rare_options();
  o.epochs = 2;
  const auto ca = train_reranker(a, t.candidates, t.train, t.texts, o);
  const auto cb = train_reranker(b, t.candidates, t.train, t.texts, o);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.serialize(), b.serialize());
  EXPECT_EQ(ca.epoch_loss, cb.epoch_loss);
}

TEST(RerankTraining, TrainingSetConstruction) {
  const std::vector<CandidateSet> sets{{"s1", {{"a", 1.0}, {"b", 0.5}}}, {"s2", {{"c", 1.0}}}};
  const std::vector<EntityPair> pairs{{"s1", "z"}, {"s2", "c"}, {"s3", "y"}};
  const auto set = build_rerank_training_set(sets, pairs);
  ASSERT_EQ(set.records.size(), 1u);
  EXPECT_EQ(set.records[0].negatives_pool, (std::vector<EntityId>{"a", "b"}));
  EXPECT_EQ(set.injected_gold, 1u);
  MlpScorer s(small_config());
  EntityTexts texts;
  EXPECT_EQ(code_of([&] { train_reranker(s, sets, std::vector<EntityPair>{{"s2", "c"}}, texts, rare_options()); }),
            ErrorCode::kEmptyTrainingSet);
}

TEST(Rerank, MembershipPreservedAndSingletonsUnchanged) {
  const auto t = rare_token_task(5, 5, 5);
  MlpScorer s(small_config(256, 8));
  const auto out = rerank(s, t.candidates, t.texts);
  ASSERT_EQ(out.size(), t.candidates.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].source, t.candidates[i].source);
    std::multiset<EntityId> a, b;
    for (const auto& c : out[i].candidates) a.insert(c.target);
    for (const auto& c : t.candidates[i].candidates) b.insert(c.target);
    EXPECT_EQ(a, b);
    for (std::size_t j = 1; j < out[i].candidates.size(); ++j) {
      EXPECT_GE(out[i].candidates[j - 1].score, out[i].candidates[j].score);
    }
  }
  std::vector<EntityPair> gold(t.train);
  gold.insert(gold.end(), t.val.begin(), t.val.end());
  for (const std::size_t k : {1u, 3u, 7u}) EXPECT_LE(hits_at_k(out, gold, k), candidate_recall(t.candidates, gold, 7));

  const std::vector<CandidateSet> single{{"s000", {{"g000", 0.3}}}};
  const auto r = rerank(s, single, t.texts);
  ASSERT_EQ(r[0].candidates.size(), 1u);
  EXPECT_EQ(r[0].candidates[0].target, "g000");

  const std::vector<CandidateSet> missing{{"s000", {{"nobody", 0.3}}}};
  EXPECT_EQ(code_of([&] { rerank(s, missing, t.texts); }), ErrorCode::kMissingText);
}

TEST(Rerank, DotProductReplayPreservesRetrievalOrder) {
  Rng rng(23);
  auto model = std::make_shared<ProjectionModel>(16, FeaturizerOptions{3, 512}, true, 0.05, 6);
  auto provider = std::make_shared<ProjectionEmbedder>(model);
  EntityTexts texts;
  std::vector<EntityId> targets;
  std::vector<std::string> target_texts;
  for (int i = 0; i < 80; ++i) {
    targets.push_back(fmt::format("t{:02}", i));
    target_texts.push_back(random_word(rng, 12));
    texts.target[targets.back()] = target_texts.back();
  }
  std::vector<EntityId> sources;
  std::vector<std::string> source_texts;
  for (int i = 0; i < 10; ++i) {
    sources.push_back(fmt::format("s{:02}", i));
    source_texts.push_back(random_word(rng, 12));
    texts.source[sources.back()] = source_texts.back();
  }
  const auto index = VectorIndex::build(targets, provider->embed_batch(target_texts));
  const auto sets = topk_all(index, sources, provider->embed_batch(source_texts), 20);
  const auto replay = rerank(EmbeddingDotScorer(provider), sets, texts);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    for (std::size_t j = 0; j < sets[i].candidates.size(); ++j) {
      EXPECT_EQ(replay[i].candidates[j].target, sets[i].candidates[j].target);
      EXPECT_NEAR(replay[i].candidates[j].score, sets[i].candidates[j].score, 1e-5);
    }
  }
}

TEST(ExternalScorer, ScoresAndCaches) {
  testing::FakeService service;
  testing::TempDir cache;
  service.on("/score", [](const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body);
    json out = json::object();
    out["scores"] = json::array();
    for (const auto& p : body.at("pairs")) {
      out["scores"].push_back(static_cast<double>(p[0].get<std::string>().size() * 10 + p[1].get<std::string>().size()));
    }
    res.set_content(out.dump(), "application/json");
  });
  service.start();
  const auto make = [&] {
    return ExternalScorer(ServiceClient(make_http_transport(service.url(), std::chrono::seconds(5)), 0),
                          ResponseCache(cache.path()), 2);
  };
  const std::vector<TextPair> pairs{{"a", "bb"}, {"ccc", "d"}, {"ee", "fff"}};
  EXPECT_EQ(make().score_pairs(pairs), (std::vector<double>{12, 31, 23}));
  EXPECT_EQ(service.requests(), 2);
  EXPECT_EQ(make().score_pairs(pairs), (std::vector<double>{12, 31, 23}));
  EXPECT_EQ(service.requests(), 2);
}

TEST(ExternalScorer, WrongCountIsServiceError) {
  testing::FakeService service;
  service.on("/score", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"scores": [1.0, 2.0]})", "application/json");
  });
  service.start();
  ExternalScorer s(ServiceClient(make_http_transport(service.url(), std::chrono::seconds(5)), 0), ResponseCache(), 8);
  const std::vector<TextPair> pairs{{"a", "b"}};
  EXPECT_EQ(code_of([&] { s.score_pairs(pairs); }), ErrorCode::kServiceErrorStatus);
}

}  // namespace
}  // namespace kgalign
