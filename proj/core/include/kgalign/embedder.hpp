#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgalign/kg_store.hpp"
#include "kgalign/service_client.hpp"

namespace kgalign {

// Sparse L2-normalized hashed character n-gram counts. Indices are sorted
// and unique; all weights are positive.
struct FeatureVector {
  std::uint32_t dimension = 0;
  std::vector<std::uint32_t> indices;
  std::vector<float> weights;
};

struct FeaturizerOptions {
  std::size_t ngram = 3;
  std::uint32_t dimension = 1u << 14;

  friend bool operator==(const FeaturizerOptions&, const FeaturizerOptions&) = default;
};

// Character n-grams over UTF-8 code points, bucket = fnv1a64(ngram bytes) mod
// dimension. Texts shorter than n contribute a single gram (the whole text).
FeatureVector featurize(std::string_view text, std::size_t n, std::uint32_t dimension);
inline FeatureVector featurize(std::string_view text, const FeaturizerOptions& options) {
  return featurize(text, options.ngram, options.dimension);
}

std::vector<FeatureVector> featurize_all(std::span<const std::string> texts,
                                         const FeaturizerOptions& options, std::size_t threads = 0);

struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
};

// Embeddings of an ordered entity list, row i for ids[i].
struct EmbeddingTable {
  std::vector<EntityId> ids;
  DenseMatrix vectors;

  // magic "KGAEMBD1", u32 version, u32 d, u64 count, ids as
  // u32-length-prefixed UTF-8, row-major little-endian f32.
  std::string serialize() const;
  static EmbeddingTable deserialize(std::string_view bytes);
};

// Sum of u_i * v_i accumulated in double, with no normalization.
double similarity(std::span<const float> u, std::span<const float> v);

// Embeds texts into one d-dimensional space. The same instance encodes both
// KGs, so source and target share one encoder by construction.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  // Row i embeds texts[i].
  virtual DenseMatrix embed_batch(std::span<const std::string> texts) const = 0;
  virtual std::string describe() const = 0;
};

// One perturbed weight for the finite-difference check path.
struct ParameterPerturbation {
  std::size_t row = 0;
  std::size_t col = 0;
  double delta = 0.0;
};

// phi(x) = W x, optionally L2-normalized, with W of shape d x D_f. Weights
// are stored in single precision; all loss math runs in double.
class ProjectionModel {
 public:
  ProjectionModel() = default;
  // W ~ U[-1/sqrt(D_f), 1/sqrt(D_f)] from `seed`.
  ProjectionModel(std::size_t dim, FeaturizerOptions features, bool normalize, double temperature,
                  std::uint64_t seed);

  std::size_t dim() const { return dim_; }
  std::uint32_t feature_dim() const { return features_.dimension; }
  const FeaturizerOptions& featurizer() const { return features_; }
  bool normalize() const { return normalize_; }
  double temperature() const { return temperature_; }
  std::uint64_t seed() const { return seed_; }

  float weight(std::size_t row, std::size_t col) const { return w_[col * dim_ + row]; }
  void set_weight(std::size_t row, std::size_t col, float value) { w_[col * dim_ + row] = value; }
  // The d weights multiplying feature `col`.
  std::span<const float> column(std::size_t col) const { return {w_.data() + col * dim_, dim_}; }
  std::span<float> column(std::size_t col) { return {w_.data() + col * dim_, dim_}; }

  // W x before normalization.
  std::vector<double> project(const FeatureVector& x, const ParameterPerturbation* p = nullptr) const;
  // phi(x): projected and, if configured, normalized.
  std::vector<double> encode(const FeatureVector& x, const ParameterPerturbation* p = nullptr) const;

  // magic "KGAPROJ1", u32 version, u32 d, u32 D_f, f64 tau, u8 normalize,
  // u32 ngram, u64 seed, then W row-major as little-endian f32.
  std::string serialize() const;
  static ProjectionModel deserialize(std::string_view bytes);

  friend bool operator==(const ProjectionModel&, const ProjectionModel&) = default;

 private:
  std::size_t dim_ = 0;
  FeaturizerOptions features_;
  bool normalize_ = true;
  double temperature_ = 1.0;
  std::uint64_t seed_ = 0;
  std::vector<float> w_;  // feature-major: column j is contiguous
};

// Gradient w.r.t. W restricted to the columns the instance touches.
struct SparseGradient {
  std::size_t dim = 0;
  std::uint32_t feature_dim = 0;
  std::vector<std::uint32_t> columns;  // sorted
  std::vector<double> values;          // columns.size() x dim, column-major

  std::span<const double> column(std::size_t slot) const { return {values.data() + slot * dim, dim}; }
  double at(std::size_t row, std::size_t col) const;
  // Same shape as W, row-major.
  std::vector<double> dense() const;
};

struct SoftmaxContrastive {
  double loss = 0.0;
  std::vector<double> dlogits;  // d loss / d logit_i
};

// -log softmax(logits)[0] with max-subtraction; logits[0] is the positive.
SoftmaxContrastive softmax_contrastive(std::span<const double> logits);

struct ContrastiveLoss {
  double loss = 0.0;
  SparseGradient gradient;
};

// -log(e^{f(u,v)/tau} / (e^{f(u,v)/tau} + sum_{v'} e^{f(u,v')/tau})) with
// f(u,v) = phi(u) . phi(v), plus the exact gradient w.r.t. W.
ContrastiveLoss contrastive_loss(const ProjectionModel& model, const FeatureVector& u,
                                 const FeatureVector& positive, std::span<const FeatureVector> negatives,
                                 const ParameterPerturbation* perturbation = nullptr);

// Training record: indices into the source / target feature tables.
struct ContrastiveRecord {
  std::size_t source = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
};

enum class Optimizer { kSgd, kAdam };

struct ProjectionTrainingOptions {
  std::size_t epochs = 5;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  Optimizer optimizer = Optimizer::kAdam;
  std::uint64_t seed = 0;
  // Stop after this many epochs without validation improvement; 0 disables.
  std::size_t patience = 0;
};

struct TrainingCurve {
  std::vector<double> epoch_loss;  // mean loss per epoch
  // Validation metric before training (index 0) and after each epoch.
  std::vector<double> validation;
  std::size_t best_epoch = 0;  // 0 = initial parameters
};

// Higher is better (the pipeline passes validation MRR).
using ProjectionValidator = std::function<double(const ProjectionModel&)>;

// Mini-batch descent on the mean contrastive loss; keeps the parameters with
// the best validation score when a validator is given.
TrainingCurve train_projection(ProjectionModel& model, std::span<const FeatureVector> source_features,
                               std::span<const FeatureVector> target_features,
                               std::span<const ContrastiveRecord> records,
                               const ProjectionTrainingOptions& options,
                               const ProjectionValidator& validate = {});

// Featurize then project with a ProjectionModel. An untrained model is the
// "hash" provider: a fixed random projection of hashed n-grams.
class ProjectionEmbedder final : public EmbeddingProvider {
 public:
  explicit ProjectionEmbedder(std::shared_ptr<const ProjectionModel> model, std::size_t threads = 0);

  std::size_t dim() const override { return model_->dim(); }
  DenseMatrix embed_batch(std::span<const std::string> texts) const override;
  DenseMatrix embed_features(std::span<const FeatureVector> features) const;
  std::string describe() const override;

  const ProjectionModel& model() const { return *model_; }

 private:
  std::shared_ptr<const ProjectionModel> model_;
  std::size_t threads_;
};

struct ExternalEmbedderOptions {
  std::size_t dim = 768;
  std::size_t batch_size = 64;
  bool normalize = false;
};

// Client for POST /embed {"texts": [...]} -> {"vectors": [[...], ...]}.
// Vectors are cached per text under the content hash.
class ExternalEmbedder final : public EmbeddingProvider {
 public:
  ExternalEmbedder(ServiceClient client, ResponseCache cache, ExternalEmbedderOptions options);

  std::size_t dim() const override { return options_.dim; }
  DenseMatrix embed_batch(std::span<const std::string> texts) const override;
  std::string describe() const override;

 private:
  ServiceClient client_;
  ResponseCache cache_;
  ExternalEmbedderOptions options_;
};

}  // namespace kgalign
