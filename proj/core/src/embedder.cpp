#include "kgalign/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "kgalign/binary_io.hpp"
#include "kgalign/dot.hpp"
#include "kgalign/error.hpp"
#include "kgalign/hash.hpp"
#include "kgalign/log.hpp"
#include "kgalign/parallel.hpp"
#include "kgalign/rng.hpp"
#include "kgalign/text.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;

constexpr std::string_view kProjectionMagic = "KGAPROJ1";
constexpr std::uint32_t kProjectionVersion = 1;
constexpr std::string_view kEmbeddingMagic = "KGAEMBD1";
constexpr std::uint32_t kEmbeddingVersion = 1;

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (const double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_features(const ProjectionModel& model, const FeatureVector& x) {
  if (x.dimension != model.feature_dim()) {
    fail(ErrorCode::kDimensionMismatch,
         fmt::format("feature dimension {} does not match model D_f {}", x.dimension, model.feature_dim()));
  }
}

// Projection state of one instance vector in the loss graph.
struct Encoded {
  const FeatureVector* x = nullptr;
  std::vector<double> z;
  std::vector<double> e;
  double norm = 0.0;
};

Encoded encode_for_loss(const ProjectionModel& model, const FeatureVector& x, const ParameterPerturbation* p) {
  Encoded out;
  out.x = &x;
  out.z = model.project(x, p);
  out.norm = norm2(out.z);
  out.e = out.z;
  if (model.normalize() && out.norm > 0.0) {
    for (auto& v : out.e) v /= out.norm;
  }
  return out;
}

// d loss / d z from d loss / d e, through e = z / |z| when normalizing.
std::vector<double> backprop_normalization(const ProjectionModel& model, const Encoded& enc,
                                           std::vector<double> de) {
  if (!model.normalize() || enc.norm <= 0.0) return de;
  const double proj = dot(enc.e, de);
  for (std::size_t i = 0; i < de.size(); ++i) de[i] = (de[i] - enc.e[i] * proj) / enc.norm;
  return de;
}

}  // namespace

FeatureVector featurize(std::string_view text, std::size_t n, std::uint32_t dimension) {
  if (n == 0) fail(ErrorCode::kUsageError, "n-gram size must be >= 1");
  if (dimension == 0) fail(ErrorCode::kUsageError, "feature dimension must be >= 1");
  if (text.empty()) fail(ErrorCode::kEmptyText, "cannot featurize empty text");

  const auto offsets = text::codepoint_offsets(text);
  const std::size_t count = offsets.size() - 1;
  std::map<std::uint32_t, double> buckets;
  const auto add = [&](std::string_view gram) {
    buckets[static_cast<std::uint32_t>(fnv1a64(gram) % dimension)] += 1.0;
  };
  if (count < n) {
    add(text);
  } else {
    for (std::size_t i = 0; i + n <= count; ++i) {
      add(text.substr(offsets[i], offsets[i + n] - offsets[i]));
    }
  }

  double sq = 0.0;
  for (const auto& [idx, c] : buckets) sq += c * c;
  const double inv = 1.0 / std::sqrt(sq);

  FeatureVector out;
  out.dimension = dimension;
  out.indices.reserve(buckets.size());
  out.weights.reserve(buckets.size());
  for (const auto& [idx, c] : buckets) {
    out.indices.push_back(idx);
    out.weights.push_back(static_cast<float>(c * inv));
  }
  return out;
}

std::vector<FeatureVector> featurize_all(std::span<const std::string> texts, const FeaturizerOptions& options,
                                         std::size_t threads) {
  std::vector<FeatureVector> out(texts.size());
  parallel_for(texts.size(), threads, [&](std::size_t i) { out[i] = featurize(texts[i], options); });
  return out;
}

double similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) {
    fail(ErrorCode::kDimensionMismatch, fmt::format("similarity of {}-d and {}-d vectors", u.size(), v.size()));
  }
  return dot_f32(u.data(), v.data(), u.size());
}

ProjectionModel::ProjectionModel(std::size_t dim, FeaturizerOptions features, bool normalize, double temperature,
                                 std::uint64_t seed)
    : dim_(dim), features_(features), normalize_(normalize), temperature_(temperature), seed_(seed) {
  if (dim == 0 || features.dimension == 0) fail(ErrorCode::kConfigError, "projection dimensions must be positive");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    fail(ErrorCode::kConfigError, "temperature must be a positive finite number");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(features.dimension));
  w_.resize(dim * features.dimension);
  Rng rng(seed);
  // Fill in row-major W order so the draw sequence matches the file layout.
  for (std::size_t r = 0; r < dim; ++r) {
    for (std::size_t c = 0; c < features.dimension; ++c) {
      set_weight(r, c, static_cast<float>(rng.uniform(-bound, bound)));
    }
  }
}

std::vector<double> ProjectionModel::project(const FeatureVector& x, const ParameterPerturbation* p) const {
  check_features(*this, x);
  std::vector<double> z(dim_, 0.0);
  for (std::size_t k = 0; k < x.indices.size(); ++k) {
    const double xw = x.weights[k];
    const float* col = w_.data() + static_cast<std::size_t>(x.indices[k]) * dim_;
    for (std::size_t r = 0; r < dim_; ++r) z[r] += xw * static_cast<double>(col[r]);
  }
  if (p != nullptr) {
    const auto it = std::lower_bound(x.indices.begin(), x.indices.end(), p->col);
    if (it != x.indices.end() && *it == p->col) {
      z[p->row] += static_cast<double>(x.weights[static_cast<std::size_t>(it - x.indices.begin())]) * p->delta;
    }
  }
  return z;
}

std::vector<double> ProjectionModel::encode(const FeatureVector& x, const ParameterPerturbation* p) const {
  auto z = project(x, p);
  if (normalize_) {
    const double n = norm2(z);
    if (n > 0.0) {
      for (auto& v : z) v /= n;
    }
  }
  return z;
}

std::string ProjectionModel::serialize() const {
  BinaryWriter w;
  w.bytes(kProjectionMagic);
  w.u32(kProjectionVersion);
  w.u32(static_cast<std::uint32_t>(dim_));
  w.u32(features_.dimension);
  w.f64(temperature_);
  w.u8(normalize_ ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(features_.ngram));
  w.u64(seed_);
  for (std::size_t r = 0; r < dim_; ++r) {
    for (std::size_t c = 0; c < features_.dimension; ++c) w.f32(weight(r, c));
  }
  return w.release();
}

ProjectionModel ProjectionModel::deserialize(std::string_view bytes) {
  BinaryReader r(bytes);
  if (r.bytes(kProjectionMagic.size()) != kProjectionMagic) fail(ErrorCode::kFormatError, "not a projection model");
  if (r.u32() != kProjectionVersion) fail(ErrorCode::kFormatError, "unsupported projection model version");
  ProjectionModel m;
  m.dim_ = r.u32();
  m.features_.dimension = r.u32();
  m.temperature_ = r.f64();
  m.normalize_ = r.u8() != 0;
  m.features_.ngram = r.u32();
  m.seed_ = r.u64();
  if (m.dim_ == 0 || m.features_.dimension == 0 || m.features_.ngram == 0 || !(m.temperature_ > 0.0)) {
    fail(ErrorCode::kFormatError, "invalid projection model header");
  }
  const std::size_t n = m.dim_ * m.features_.dimension;
  if (r.remaining() != n * 4) fail(ErrorCode::kFormatError, "projection model size mismatch");
  m.w_.resize(n);
  for (std::size_t row = 0; row < m.dim_; ++row) {
    for (std::size_t c = 0; c < m.features_.dimension; ++c) {
      const float v = r.f32();
      if (!std::isfinite(v)) fail(ErrorCode::kFormatError, "non-finite weight in projection model");
      m.set_weight(row, c, v);
    }
  }
  return m;
}

std::string EmbeddingTable::serialize() const {
  if (ids.size() != vectors.rows) fail(ErrorCode::kDimensionMismatch, "embedding table ids and rows differ");
  BinaryWriter w;
  w.bytes(kEmbeddingMagic);
  w.u32(kEmbeddingVersion);
  w.u32(static_cast<std::uint32_t>(vectors.cols));
  w.u64(ids.size());
  for (const auto& id : ids) w.str(id);
  w.f32s(vectors.data);
  return w.release();
}

EmbeddingTable EmbeddingTable::deserialize(std::string_view bytes) {
  BinaryReader r(bytes);
  if (r.bytes(kEmbeddingMagic.size()) != kEmbeddingMagic) fail(ErrorCode::kFormatError, "not an embedding table");
  if (r.u32() != kEmbeddingVersion) fail(ErrorCode::kFormatError, "unsupported embedding table version");
  const std::size_t d = r.u32();
  const std::size_t n = r.u64();
  EmbeddingTable t;
  t.ids.reserve(std::min<std::size_t>(n, r.remaining()));
  for (std::size_t i = 0; i < n; ++i) t.ids.push_back(r.str());
  if (r.remaining() != n * d * 4) fail(ErrorCode::kFormatError, "embedding table size mismatch");
  t.vectors = DenseMatrix(n, d);
  r.f32s(t.vectors.data);
  return t;
}

double SparseGradient::at(std::size_t row, std::size_t col) const {
  const auto it = std::lower_bound(columns.begin(), columns.end(), static_cast<std::uint32_t>(col));
  if (it == columns.end() || *it != col) return 0.0;
  return values[static_cast<std::size_t>(it - columns.begin()) * dim + row];
}

std::vector<double> SparseGradient::dense() const {
  std::vector<double> out(dim * feature_dim, 0.0);
  for (std::size_t s = 0; s < columns.size(); ++s) {
    for (std::size_t r = 0; r < dim; ++r) out[r * feature_dim + columns[s]] = values[s * dim + r];
  }
  return out;
}

SoftmaxContrastive softmax_contrastive(std::span<const double> logits) {
  if (logits.empty()) fail(ErrorCode::kUsageError, "softmax over no logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (const double l : logits) sum += std::exp(l - m);
  SoftmaxContrastive out;
  out.loss = m + std::log(sum) - logits[0];
  if (!std::isfinite(out.loss)) fail(ErrorCode::kNonFiniteLoss, "contrastive loss is not finite");
  out.dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.dlogits[i] = std::exp(logits[i] - m) / sum;
  out.dlogits[0] -= 1.0;
  return out;
}

ContrastiveLoss contrastive_loss(const ProjectionModel& model, const FeatureVector& u, const FeatureVector& positive,
                                 std::span<const FeatureVector> negatives, const ParameterPerturbation* perturbation) {
  const double tau = model.temperature();
  const std::size_t dim = model.dim();

  std::vector<Encoded> nodes;
  nodes.reserve(2 + negatives.size());
  nodes.push_back(encode_for_loss(model, u, perturbation));
  nodes.push_back(encode_for_loss(model, positive, perturbation));
  for (const auto& n : negatives) nodes.push_back(encode_for_loss(model, n, perturbation));

  const std::size_t n_cand = nodes.size() - 1;
  std::vector<double> logits(n_cand);
  for (std::size_t i = 0; i < n_cand; ++i) logits[i] = dot(nodes[0].e, nodes[i + 1].e) / tau;
  const auto sc = softmax_contrastive(logits);

  ContrastiveLoss out;
  out.loss = sc.loss;
  out.gradient.dim = dim;
  out.gradient.feature_dim = model.feature_dim();

  std::vector<std::uint32_t> cols;
  for (const auto& node : nodes) cols.insert(cols.end(), node.x->indices.begin(), node.x->indices.end());
  std::sort(cols.begin(), cols.end());
  cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
  out.gradient.columns = cols;
  out.gradient.values.assign(cols.size() * dim, 0.0);

  // d loss / d e for every node.
  std::vector<std::vector<double>> de(nodes.size(), std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < n_cand; ++i) {
    const double g = sc.dlogits[i] / tau;
    const auto& ec = nodes[i + 1].e;
    const auto& eu = nodes[0].e;
    for (std::size_t r = 0; r < dim; ++r) {
      de[0][r] += g * ec[r];
      de[i + 1][r] += g * eu[r];
    }
  }

  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const auto dz = backprop_normalization(model, nodes[k], std::move(de[k]));
    const auto& x = *nodes[k].x;
    for (std::size_t f = 0; f < x.indices.size(); ++f) {
      const auto slot = static_cast<std::size_t>(std::lower_bound(cols.begin(), cols.end(), x.indices[f]) - cols.begin());
      double* dst = out.gradient.values.data() + slot * dim;
      const double xw = x.weights[f];
      for (std::size_t r = 0; r < dim; ++r) dst[r] += dz[r] * xw;
    }
  }
  return out;
}

TrainingCurve train_projection(ProjectionModel& model, std::span<const FeatureVector> source_features,
                               std::span<const FeatureVector> target_features,
                               std::span<const ContrastiveRecord> records, const ProjectionTrainingOptions& options,
                               const ProjectionValidator& validate) {
  TrainingCurve curve;
  if (options.epochs == 0) return curve;
  if (records.empty()) fail(ErrorCode::kEmptyTrainingSet, "no contrastive training records");
  if (!(options.learning_rate > 0.0)) fail(ErrorCode::kConfigError, "learning rate must be positive");
  for (const auto& rec : records) {
    bool ok = rec.source < source_features.size() && rec.positive < target_features.size();
    for (const auto n : rec.negatives) ok = ok && n < target_features.size();
    if (!ok) fail(ErrorCode::kUsageError, "training record references a missing feature vector");
  }

  const std::size_t dim = model.dim();
  const std::size_t fdim = model.feature_dim();
  const std::size_t batch_size = std::max<std::size_t>(1, options.batch_size);

  std::vector<double> grad(dim * fdim, 0.0);
  std::vector<char> touched(fdim, 0);
  std::vector<std::uint32_t> touched_cols;
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  if (options.optimizer == Optimizer::kAdam) {
    adam_m.assign(dim * fdim, 0.0f);
    adam_v.assign(dim * fdim, 0.0f);
  }
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  std::uint64_t step = 0;

  double best_score = -std::numeric_limits<double>::infinity();
  ProjectionModel best = model;
  std::size_t since_best = 0;
  if (validate) {
    best_score = validate(model);
    curve.validation.push_back(best_score);
  }

  std::vector<std::size_t> order(records.size());
  std::vector<FeatureVector> negs;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(options.seed, epoch));
    rng.shuffle(std::span(order));

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const auto& rec = records[order[b]];
        negs.clear();
        for (const auto n : rec.negatives) negs.push_back(target_features[n]);
        const auto res = contrastive_loss(model, source_features[rec.source], target_features[rec.positive], negs);
        epoch_loss += res.loss;
        for (std::size_t s = 0; s < res.gradient.columns.size(); ++s) {
          const auto c = res.gradient.columns[s];
          if (!touched[c]) {
            touched[c] = 1;
            touched_cols.push_back(c);
          }
          double* dst = grad.data() + static_cast<std::size_t>(c) * dim;
          const double* src = res.gradient.values.data() + s * dim;
          for (std::size_t r = 0; r < dim; ++r) dst[r] += src[r] * scale;
        }
      }

      ++step;
      const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      std::sort(touched_cols.begin(), touched_cols.end());
      for (const auto c : touched_cols) {
        auto col = model.column(c);
        double* g = grad.data() + static_cast<std::size_t>(c) * dim;
        for (std::size_t r = 0; r < dim; ++r) {
          double update = g[r];
          if (options.optimizer == Optimizer::kAdam) {
            const std::size_t i = static_cast<std::size_t>(c) * dim + r;
            adam_m[i] = static_cast<float>(kBeta1 * adam_m[i] + (1.0 - kBeta1) * g[r]);
            adam_v[i] = static_cast<float>(kBeta2 * adam_v[i] + (1.0 - kBeta2) * g[r] * g[r]);
            update = (adam_m[i] / bc1) / (std::sqrt(adam_v[i] / bc2) + kEps);
          }
          col[r] = static_cast<float>(col[r] - options.learning_rate * update);
          g[r] = 0.0;
        }
        touched[c] = 0;
      }
      touched_cols.clear();
    }

    const double mean_loss = epoch_loss / static_cast<double>(records.size());
    if (!std::isfinite(mean_loss)) fail(ErrorCode::kNonFiniteLoss, fmt::format("epoch {} loss diverged", epoch));
    curve.epoch_loss.push_back(mean_loss);

    if (validate) {
      const double score = validate(model);
      curve.validation.push_back(score);
      logger()->info("embedder epoch {}: loss {:.6f}, validation {:.6f}", epoch, mean_loss, score);
      if (score > best_score) {
        best_score = score;
        best = model;
        curve.best_epoch = epoch;
        since_best = 0;
      } else if (options.patience > 0 && ++since_best >= options.patience) {
        break;
      }
    } else {
      logger()->info("embedder epoch {}: loss {:.6f}", epoch, mean_loss);
      curve.best_epoch = epoch;
    }
  }
  if (validate) model = std::move(best);
  return curve;
}

ProjectionEmbedder::ProjectionEmbedder(std::shared_ptr<const ProjectionModel> model, std::size_t threads)
    : model_(std::move(model)), threads_(threads) {
  if (!model_) fail(ErrorCode::kConfigError, "projection embedder without a model");
}

DenseMatrix ProjectionEmbedder::embed_features(std::span<const FeatureVector> features) const {
  DenseMatrix out(features.size(), model_->dim());
  parallel_for(features.size(), threads_, [&](std::size_t i) {
    const auto e = model_->encode(features[i]);
    auto row = out.row(i);
    for (std::size_t r = 0; r < e.size(); ++r) row[r] = static_cast<float>(e[r]);
  });
  return out;
}

DenseMatrix ProjectionEmbedder::embed_batch(std::span<const std::string> texts) const {
  return embed_features(featurize_all(texts, model_->featurizer(), threads_));
}

std::string ProjectionEmbedder::describe() const {
  return fmt::format("projection(d={}, D_f={}, n={}, normalize={}, tau={}, seed={})", model_->dim(),
                     model_->feature_dim(), model_->featurizer().ngram, model_->normalize(), model_->temperature(),
                     model_->seed());
}

ExternalEmbedder::ExternalEmbedder(ServiceClient client, ResponseCache cache, ExternalEmbedderOptions options)
    : client_(std::move(client)), cache_(std::move(cache)), options_(options) {
  if (options_.dim == 0) fail(ErrorCode::kConfigError, "external embedder dimension must be positive");
}

DenseMatrix ExternalEmbedder::embed_batch(std::span<const std::string> texts) const {
  DenseMatrix out(texts.size(), options_.dim);
  std::vector<std::string> keys(texts.size());
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    keys[i] = ResponseCache::key_for(fmt::format("/embed\n{}\n{}", options_.dim, texts[i]));
    auto hit = cache_.get(keys[i]);
    if (hit && hit->size() == options_.dim * 4) {
      BinaryReader r(*hit);
      r.f32s(out.row(i));
    } else {
      missing.push_back(i);
    }
  }

  const std::size_t batch = std::max<std::size_t>(1, options_.batch_size);
  for (std::size_t start = 0; start < missing.size(); start += batch) {
    const std::size_t end = std::min(missing.size(), start + batch);
    json request;
    request["texts"] = json::array();
    for (std::size_t k = start; k < end; ++k) request["texts"].push_back(texts[missing[k]]);
    const auto body = client_.post("/embed", request.dump());

    json vectors;
    try {
      vectors = json::parse(body).at("vectors");
    } catch (const json::exception& e) {
      fail(ErrorCode::kServiceErrorStatus, fmt::format("malformed /embed response: {}", e.what()));
    }
    if (!vectors.is_array() || vectors.size() != end - start) {
      fail(ErrorCode::kEmbedderFailure, fmt::format("/embed returned {} vectors for {} texts",
                                                    vectors.is_array() ? vectors.size() : 0, end - start));
    }
    for (std::size_t k = start; k < end; ++k) {
      const auto& v = vectors[k - start];
      if (!v.is_array() || v.size() != options_.dim) {
        fail(ErrorCode::kDimensionMismatch,
             fmt::format("/embed returned d={} but the configured dimension is {}", v.is_array() ? v.size() : 0,
                         options_.dim));
      }
      auto row = out.row(missing[k]);
      for (std::size_t r = 0; r < options_.dim; ++r) {
        row[r] = v[r].get<float>();
        if (!std::isfinite(row[r])) fail(ErrorCode::kEmbedderFailure, "/embed returned a non-finite value");
      }
      BinaryWriter w;
      w.f32s(row);
      cache_.put(keys[missing[k]], w.data());
    }
  }

  if (options_.normalize) {
    for (std::size_t i = 0; i < out.rows; ++i) {
      auto row = out.row(i);
      double sq = 0.0;
      for (const float x : row) sq += static_cast<double>(x) * x;
      const double n = std::sqrt(sq);
      if (n > 0.0) {
        for (auto& x : row) x = static_cast<float>(x / n);
      }
    }
  }
  return out;
}

std::string ExternalEmbedder::describe() const {
  return fmt::format("external(d={}, normalize={})", options_.dim, options_.normalize);
}

}  // namespace kgalign
