#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kgalign/embedder.hpp"
#include "kgalign/kg_store.hpp"
#include "kgalign/retrieval.hpp"
#include "kgalign/service_client.hpp"

namespace kgalign {

using TextPair = std::pair<std::string, std::string>;

// delta(u, v): higher means more likely equivalent.
class PairScorer {
 public:
  virtual ~PairScorer() = default;
  virtual std::vector<double> score_pairs(std::span<const TextPair> pairs) const = 0;
  virtual std::string describe() const = 0;

  double score_pair(std::string_view text_u, std::string_view text_v) const;
};

struct MlpScorerConfig {
  FeaturizerOptions features{3, 1u << 12};
  std::size_t hidden = 128;
  bool symmetrize = false;
  std::size_t max_text_chars = 512;
  std::uint64_t seed = 0;
};

// What the scorer sees of one text: hashed n-grams and, when an encoder is
// attached, the encoder's embedding.
struct TextFeatures {
  FeatureVector ngrams;
  std::vector<float> embedding;
};

// Parameter index for the finite-difference check path, in the flat layout
// [W1 row-major (hidden x input_dim) | b1 | w2 | b2].
struct MlpPerturbation {
  std::size_t index = 0;
  double delta = 0.0;
};

struct MlpGradient {
  std::size_t hidden = 0;
  std::size_t input_dim = 0;
  std::vector<std::uint32_t> columns;  // touched W1 input columns, sorted
  std::vector<double> w1;              // columns.size() x hidden, column-major
  std::vector<double> b1;
  std::vector<double> w2;
  double b2 = 0.0;

  // Same flat layout as MlpScorer::parameter().
  double at(std::size_t flat_index) const;
};

// Two-layer feedforward scorer on x = [f(u); f(v); f(u) * f(v); e(u) * e(v)]:
// delta = w2 . softplus(W1 x + b1) + b2.
// f is the hashed n-gram vector; e is the embedding of an optional frozen
// encoder (the trained projection), which lets the interaction see
// similarities the n-grams miss, such as synonyms.
class MlpScorer final : public PairScorer {
 public:
  MlpScorer() = default;
  explicit MlpScorer(MlpScorerConfig config, std::shared_ptr<const ProjectionModel> encoder = nullptr);

  const MlpScorerConfig& config() const { return config_; }
  const ProjectionModel* encoder() const { return encoder_.get(); }
  std::size_t embedding_dim() const { return encoder_ ? encoder_->dim() : 0; }
  std::size_t input_dim() const { return 3 * static_cast<std::size_t>(config_.features.dimension) + embedding_dim(); }
  std::size_t parameter_count() const;
  double parameter(std::size_t flat_index) const;
  void set_parameter(std::size_t flat_index, double value);

  // Applies the text cap first.
  TextFeatures features_of(std::string_view text) const;

  // Ordered-pair score, honouring the symmetrize option.
  double score_features(const TextFeatures& fu, const TextFeatures& fv, const MlpPerturbation* p = nullptr) const;

  std::vector<double> score_pairs(std::span<const TextPair> pairs) const override;
  std::string describe() const override;

  // magic "KGARRNK1", u32 version, u32 ngram, u32 D_f, u8 symmetrize,
  // u32 max_text_chars, u64 seed, u32 embedding dim, u32 layer count, then
  // per layer (u32 rows, u32 cols) and the weights, biases as little-endian
  // f32; with an encoder, u64 length and the encoder's own serialization.
  std::string serialize() const;
  static MlpScorer deserialize(std::string_view bytes);

  friend bool operator==(const MlpScorer& a, const MlpScorer& b);

 private:
  friend struct MlpAccess;

  MlpScorerConfig config_;
  std::shared_ptr<const ProjectionModel> encoder_;
  std::vector<float> w1_;  // input-major: column c holds `hidden` weights
  std::vector<float> b1_;
  std::vector<float> w2_;
  float b2_ = 0.0f;
};

// delta = phi(u) . phi(v) from an embedding provider (retrieval replay).
class EmbeddingDotScorer final : public PairScorer {
 public:
  explicit EmbeddingDotScorer(std::shared_ptr<const EmbeddingProvider> provider);
  std::vector<double> score_pairs(std::span<const TextPair> pairs) const override;
  std::string describe() const override;

 private:
  std::shared_ptr<const EmbeddingProvider> provider_;
};

// Client for POST /score {"pairs": [[u, v], ...]} -> {"scores": [...]}.
class ExternalScorer final : public PairScorer {
 public:
  ExternalScorer(ServiceClient client, ResponseCache cache, std::size_t batch_size = 64);
  std::vector<double> score_pairs(std::span<const TextPair> pairs) const override;
  std::string describe() const override;

 private:
  ServiceClient client_;
  ResponseCache cache_;
  std::size_t batch_size_;
};

struct RerankLoss {
  double loss = 0.0;
  MlpGradient gradient;
};

// Softmax-contrastive loss over delta logits (positive first) with exact
// gradients through the scorer.
RerankLoss rerank_loss(const MlpScorer& scorer, const TextFeatures& u, const TextFeatures& positive,
                       std::span<const TextFeatures> negatives, const MlpPerturbation* perturbation = nullptr);

// Loss value for any scorer, from texts.
double rerank_loss_value(const PairScorer& scorer, const std::string& u, const std::string& positive,
                         std::span<const std::string> negatives);

// Verbalized text per entity id for each KG.
struct EntityTexts {
  std::unordered_map<EntityId, std::string> source;
  std::unordered_map<EntityId, std::string> target;
};

// (u_j, v_j, N_j) with N_j = V_{u_j} minus v_j.
struct RerankRecord {
  EntityId source;
  EntityId gold;
  std::vector<EntityId> negatives_pool;
};

struct RerankTrainingSet {
  std::vector<RerankRecord> records;
  std::size_t injected_gold = 0;  // pairs whose gold was not retrieved
};

// Training sources without a candidate set are skipped with a warning.
RerankTrainingSet build_rerank_training_set(std::span<const CandidateSet> candidates,
                                            std::span<const EntityPair> train_pairs);

struct RerankTrainingOptions {
  std::size_t negatives = 110;
  std::size_t epochs = 5;
  double learning_rate = 1e-3;
  std::size_t batch_size = 12;
  Optimizer optimizer = Optimizer::kAdam;
  std::uint64_t seed = 0;
  std::size_t patience = 0;
};

struct RerankCurve {
  std::vector<double> epoch_loss;
  std::vector<double> validation;  // before training, then per epoch
  std::size_t best_epoch = 0;
};

// Higher is better (the pipeline passes validation Hits@1).
using RerankValidator = std::function<double(const MlpScorer&)>;

RerankCurve train_reranker(MlpScorer& scorer, std::span<const CandidateSet> candidates,
                           std::span<const EntityPair> train_pairs, const EntityTexts& texts,
                           const RerankTrainingOptions& options, const RerankValidator& validate = {});

// Reorders each set by delta (ties by target id) without changing
// membership; scores become delta values.
std::vector<CandidateSet> rerank(const PairScorer& scorer, std::span<const CandidateSet> candidates,
                                 const EntityTexts& texts, std::size_t max_text_chars = 512,
                                 std::size_t threads = 0);

}  // namespace kgalign
