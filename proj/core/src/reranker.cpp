#include "kgalign/reranker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "kgalign/binary_io.hpp"
#include "kgalign/error.hpp"
#include "kgalign/log.hpp"
#include "kgalign/parallel.hpp"
#include "kgalign/rng.hpp"
#include "kgalign/text.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;

constexpr std::string_view kScorerMagic = "KGARRNK1";
constexpr std::uint32_t kScorerVersion = 1;

double softplus(double a) { return a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a)); }

double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

struct InputEntry {
  std::uint32_t col;
  double x;
};

// Sparse [f(u); f(v); f(u) * f(v); e(u) * e(v)], column-sorted.
std::vector<InputEntry> pair_input(const TextFeatures& tu, const TextFeatures& tv) {
  const auto& fu = tu.ngrams;
  const auto& fv = tv.ngrams;
  const std::uint32_t df = fu.dimension;
  std::vector<InputEntry> out;
  out.reserve(fu.indices.size() + fv.indices.size() + std::min(fu.indices.size(), fv.indices.size()));
  for (std::size_t i = 0; i < fu.indices.size(); ++i) out.push_back({fu.indices[i], fu.weights[i]});
  for (std::size_t i = 0; i < fv.indices.size(); ++i) out.push_back({df + fv.indices[i], fv.weights[i]});
  std::size_t a = 0;
  std::size_t b = 0;
  while (a < fu.indices.size() && b < fv.indices.size()) {
    if (fu.indices[a] < fv.indices[b]) {
      ++a;
    } else if (fv.indices[b] < fu.indices[a]) {
      ++b;
    } else {
      out.push_back({2 * df + fu.indices[a], static_cast<double>(fu.weights[a]) * fv.weights[b]});
      ++a;
      ++b;
    }
  }
  for (std::size_t i = 0; i < tu.embedding.size(); ++i) {
    out.push_back({static_cast<std::uint32_t>(3 * df + i), static_cast<double>(tu.embedding[i]) * tv.embedding[i]});
  }
  return out;
}

std::string capped(std::string_view s, std::size_t max_chars) { return text::truncate_codepoints(s, max_chars); }

const std::string& lookup_text(const std::unordered_map<EntityId, std::string>& texts, const EntityId& id,
                               std::string_view side) {
  const auto it = texts.find(id);
  if (it == texts.end()) fail(ErrorCode::kMissingText, fmt::format("no {} text for entity '{}'", side, id));
  return it->second;
}

}  // namespace

double PairScorer::score_pair(std::string_view text_u, std::string_view text_v) const {
  const TextPair p{std::string(text_u), std::string(text_v)};
  return score_pairs(std::span(&p, 1)).at(0);
}

namespace {

// Parameters of one forward pass with the perturbation folded in, so the
// finite-difference path and the gradient see the same values.
struct MlpView {
  const MlpScorer& s;
  std::size_t hidden;
  std::size_t input;
  std::vector<double> b1;
  std::vector<double> w2;
  double b2;
  // W1 perturbation, if any.
  std::size_t p_row = 0;
  std::size_t p_col = std::numeric_limits<std::size_t>::max();
  double p_delta = 0.0;
};

struct Forward {
  std::vector<InputEntry> x;
  std::vector<double> a;
  std::vector<double> h;
  double delta = 0.0;
};

}  // namespace

double MlpGradient::at(std::size_t flat) const {
  const std::size_t w1_size = hidden * input_dim;
  if (flat < w1_size) {
    const auto row = flat / input_dim;
    const auto col = static_cast<std::uint32_t>(flat % input_dim);
    const auto it = std::lower_bound(columns.begin(), columns.end(), col);
    if (it == columns.end() || *it != col) return 0.0;
    return w1[static_cast<std::size_t>(it - columns.begin()) * hidden + row];
  }
  flat -= w1_size;
  if (flat < hidden) return b1[flat];
  flat -= hidden;
  if (flat < hidden) return w2[flat];
  flat -= hidden;
  if (flat == 0) return b2;
  fail(ErrorCode::kUsageError, "gradient index out of range");
}

MlpScorer::MlpScorer(MlpScorerConfig config, std::shared_ptr<const ProjectionModel> encoder)
    : config_(config), encoder_(std::move(encoder)) {
  if (config_.features.ngram == 0 || config_.features.dimension == 0 || config_.hidden == 0) {
    fail(ErrorCode::kConfigError, "reranker needs positive n-gram size, feature dimension and hidden width");
  }
  const std::size_t h = config_.hidden;
  const std::size_t df = config_.features.dimension;
  w1_.assign(input_dim() * h, 0.0f);
  b1_.assign(h, 0.0f);
  w2_.assign(h, 0.0f);
  // The u and v blocks start as symmetric noise. The product blocks and the
  // output layer start positive, so an untrained scorer already increases
  // with n-gram overlap and encoder similarity, and training refines that
  // ordering.
  Rng rng(config_.seed);
  for (std::size_t col = 0; col < input_dim(); ++col) {
    const bool product = col >= 2 * df;
    for (std::size_t r = 0; r < h; ++r) {
      w1_[col * h + r] = static_cast<float>(product ? rng.uniform(0.0, 2.0) : rng.uniform(-0.5, 0.5));
    }
  }
  const double s = 2.0 / std::sqrt(static_cast<double>(h));
  for (auto& w : w2_) w = static_cast<float>(rng.uniform(0.0, s));
}

std::size_t MlpScorer::parameter_count() const { return w1_.size() + b1_.size() + w2_.size() + 1; }

double MlpScorer::parameter(std::size_t flat) const {
  const std::size_t h = config_.hidden;
  const std::size_t in = input_dim();
  if (flat < h * in) return w1_[(flat % in) * h + flat / in];
  flat -= h * in;
  if (flat < h) return b1_[flat];
  flat -= h;
  if (flat < h) return w2_[flat];
  if (flat == h) return b2_;
  fail(ErrorCode::kUsageError, "parameter index out of range");
}

void MlpScorer::set_parameter(std::size_t flat, double value) {
  const std::size_t h = config_.hidden;
  const std::size_t in = input_dim();
  const auto v = static_cast<float>(value);
  if (flat < h * in) {
    w1_[(flat % in) * h + flat / in] = v;
    return;
  }
  flat -= h * in;
  if (flat < h) {
    b1_[flat] = v;
    return;
  }
  flat -= h;
  if (flat < h) {
    w2_[flat] = v;
    return;
  }
  if (flat == h) {
    b2_ = v;
    return;
  }
  fail(ErrorCode::kUsageError, "parameter index out of range");
}

TextFeatures MlpScorer::features_of(std::string_view text) const {
  TextFeatures t;
  t.ngrams = featurize(capped(text, config_.max_text_chars), config_.features);
  if (encoder_) {
    const auto e = encoder_->encode(encoder_->featurizer() == config_.features
                                        ? t.ngrams
                                        : featurize(capped(text, config_.max_text_chars), encoder_->featurizer()));
    t.embedding.assign(e.begin(), e.end());
  }
  return t;
}

bool operator==(const MlpScorer& a, const MlpScorer& b) {
  const auto& x = a.config_;
  const auto& y = b.config_;
  const bool same_config = x.features.ngram == y.features.ngram && x.features.dimension == y.features.dimension &&
                           x.hidden == y.hidden && x.symmetrize == y.symmetrize &&
                           x.max_text_chars == y.max_text_chars && x.seed == y.seed;
  const bool same_encoder = a.encoder_ == b.encoder_ || (a.encoder_ && b.encoder_ && *a.encoder_ == *b.encoder_);
  return same_config && same_encoder && a.w1_ == b.w1_ && a.b1_ == b.b1_ && a.w2_ == b.w2_ && a.b2_ == b.b2_;
}

namespace {

MlpView make_view(const MlpScorer& s, const std::vector<float>& b1, const std::vector<float>& w2, float b2,
                  const MlpPerturbation* p) {
  MlpView v{s, s.config().hidden, s.input_dim(), {b1.begin(), b1.end()}, {w2.begin(), w2.end()}, b2};
  if (p) {
    std::size_t flat = p->index;
    const std::size_t w1_size = v.hidden * v.input;
    if (flat < w1_size) {
      v.p_row = flat / v.input;
      v.p_col = flat % v.input;
      v.p_delta = p->delta;
    } else if ((flat -= w1_size) < v.hidden) {
      v.b1[flat] += p->delta;
    } else if ((flat -= v.hidden) < v.hidden) {
      v.w2[flat] += p->delta;
    } else if (flat == v.hidden) {
      v.b2 += p->delta;
    } else {
      fail(ErrorCode::kUsageError, "perturbation index out of range");
    }
  }
  return v;
}

void check_pair_features(const MlpScorer& s, const TextFeatures& t) {
  if (t.ngrams.dimension != s.config().features.dimension) {
    fail(ErrorCode::kDimensionMismatch, fmt::format("feature dimension {} does not match the scorer's {}",
                                                    t.ngrams.dimension, s.config().features.dimension));
  }
  if (t.embedding.size() != s.embedding_dim()) {
    fail(ErrorCode::kDimensionMismatch, fmt::format("embedding size {} does not match the scorer's {}",
                                                    t.embedding.size(), s.embedding_dim()));
  }
}

}  // namespace

// Implemented as a member-access helper so the private weights stay private.
struct MlpAccess {
  static MlpView view(const MlpScorer& s, const MlpPerturbation* p) { return make_view(s, s.b1_, s.w2_, s.b2_, p); }

  static Forward forward(const MlpView& v, const TextFeatures& fu, const TextFeatures& fv) {
    Forward f;
    f.x = pair_input(fu, fv);
    f.a = v.b1;
    const auto& w1 = v.s.w1_;
    for (const auto& e : f.x) {
      const float* col = w1.data() + static_cast<std::size_t>(e.col) * v.hidden;
      for (std::size_t r = 0; r < v.hidden; ++r) f.a[r] += e.x * col[r];
      if (e.col == v.p_col) f.a[v.p_row] += e.x * v.p_delta;
    }
    f.h.resize(v.hidden);
    f.delta = v.b2;
    for (std::size_t r = 0; r < v.hidden; ++r) {
      f.h[r] = softplus(f.a[r]);
      f.delta += v.w2[r] * f.h[r];
    }
    return f;
  }

  static std::vector<float>& w1(MlpScorer& s) { return s.w1_; }
  static std::vector<float>& b1(MlpScorer& s) { return s.b1_; }
  static std::vector<float>& w2(MlpScorer& s) { return s.w2_; }
  static float& b2(MlpScorer& s) { return s.b2_; }
};

double MlpScorer::score_features(const TextFeatures& fu, const TextFeatures& fv, const MlpPerturbation* p) const {
  check_pair_features(*this, fu);
  check_pair_features(*this, fv);
  const auto view = MlpAccess::view(*this, p);
  const double forward = MlpAccess::forward(view, fu, fv).delta;
  if (!config_.symmetrize) return forward;
  return 0.5 * (forward + MlpAccess::forward(view, fv, fu).delta);
}

std::vector<double> MlpScorer::score_pairs(std::span<const TextPair> pairs) const {
  std::vector<double> out(pairs.size());
  const std::string* last_u = nullptr;
  TextFeatures fu;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!last_u || *last_u != pairs[i].first) {
      fu = features_of(pairs[i].first);
      last_u = &pairs[i].first;
    }
    out[i] = score_features(fu, features_of(pairs[i].second));
  }
  return out;
}

std::string MlpScorer::describe() const {
  return fmt::format("mlp(D_f={}, n={}, hidden={}, embedding={}, symmetrize={}, seed={})",
                     config_.features.dimension, config_.features.ngram, config_.hidden, embedding_dim(),
                     config_.symmetrize, config_.seed);
}

std::string MlpScorer::serialize() const {
  const std::size_t h = config_.hidden;
  const std::size_t in = input_dim();
  BinaryWriter w;
  w.bytes(kScorerMagic);
  w.u32(kScorerVersion);
  w.u32(static_cast<std::uint32_t>(config_.features.ngram));
  w.u32(config_.features.dimension);
  w.u8(config_.symmetrize ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(config_.max_text_chars));
  w.u64(config_.seed);
  w.u32(static_cast<std::uint32_t>(embedding_dim()));
  w.u32(2);
  w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(in));
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < in; ++c) w.f32(w1_[c * h + r]);
  }
  w.f32s(b1_);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(h));
  w.f32s(w2_);
  w.f32(b2_);
  if (encoder_) {
    const auto enc = encoder_->serialize();
    w.u64(enc.size());
    w.bytes(enc);
  }
  return w.release();
}

MlpScorer MlpScorer::deserialize(std::string_view bytes) {
  BinaryReader r(bytes);
  if (r.bytes(kScorerMagic.size()) != kScorerMagic) fail(ErrorCode::kFormatError, "not a reranker model");
  if (r.u32() != kScorerVersion) fail(ErrorCode::kFormatError, "unsupported reranker model version");
  MlpScorer s;
  s.config_.features.ngram = r.u32();
  s.config_.features.dimension = r.u32();
  s.config_.symmetrize = r.u8() != 0;
  s.config_.max_text_chars = r.u32();
  s.config_.seed = r.u64();
  const std::size_t embedding = r.u32();
  if (s.config_.features.ngram == 0 || s.config_.features.dimension == 0) {
    fail(ErrorCode::kFormatError, "invalid reranker model header");
  }
  if (r.u32() != 2) fail(ErrorCode::kFormatError, "reranker model must have two layers");
  const std::size_t h = r.u32();
  const std::size_t in = r.u32();
  if (h == 0 || in != s.input_dim() + embedding) fail(ErrorCode::kFormatError, "reranker first layer shape mismatch");
  s.config_.hidden = h;
  if (r.remaining() < (h * in + h) * 4) fail(ErrorCode::kFormatError, "truncated reranker model");
  s.w1_.resize(h * in);
  for (std::size_t row = 0; row < h; ++row) {
    for (std::size_t c = 0; c < in; ++c) s.w1_[c * h + row] = r.f32();
  }
  s.b1_.resize(h);
  r.f32s(s.b1_);
  if (r.u32() != 1 || r.u32() != h) fail(ErrorCode::kFormatError, "reranker output layer shape mismatch");
  s.w2_.resize(h);
  r.f32s(s.w2_);
  s.b2_ = r.f32();
  if (embedding > 0) {
    const auto length = r.u64();
    if (length > r.remaining()) fail(ErrorCode::kFormatError, "truncated reranker encoder");
    s.encoder_ = std::make_shared<const ProjectionModel>(ProjectionModel::deserialize(r.bytes(length)));
    if (s.encoder_->dim() != embedding) fail(ErrorCode::kFormatError, "reranker encoder dimension mismatch");
  }
  if (!r.at_end()) fail(ErrorCode::kFormatError, "trailing bytes in reranker model");
  const auto finite = [](float v) { return std::isfinite(v); };
  if (!std::all_of(s.w1_.begin(), s.w1_.end(), finite) || !std::all_of(s.b1_.begin(), s.b1_.end(), finite) ||
      !std::all_of(s.w2_.begin(), s.w2_.end(), finite) || !std::isfinite(s.b2_)) {
    fail(ErrorCode::kFormatError, "non-finite weight in reranker model");
  }
  return s;
}

EmbeddingDotScorer::EmbeddingDotScorer(std::shared_ptr<const EmbeddingProvider> provider)
    : provider_(std::move(provider)) {
  if (!provider_) fail(ErrorCode::kConfigError, "embedding scorer without a provider");
}

std::vector<double> EmbeddingDotScorer::score_pairs(std::span<const TextPair> pairs) const {
  std::vector<std::string> texts;
  texts.reserve(pairs.size() * 2);
  for (const auto& p : pairs) {
    texts.push_back(p.first);
    texts.push_back(p.second);
  }
  const auto m = provider_->embed_batch(texts);
  std::vector<double> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) out[i] = similarity(m.row(2 * i), m.row(2 * i + 1));
  return out;
}

std::string EmbeddingDotScorer::describe() const { return "dot(" + provider_->describe() + ")"; }

ExternalScorer::ExternalScorer(ServiceClient client, ResponseCache cache, std::size_t batch_size)
    : client_(std::move(client)), cache_(std::move(cache)), batch_size_(std::max<std::size_t>(1, batch_size)) {}

std::vector<double> ExternalScorer::score_pairs(std::span<const TextPair> pairs) const {
  std::vector<double> out(pairs.size(), 0.0);
  std::vector<std::string> keys(pairs.size());
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    keys[i] = ResponseCache::key_for(
        fmt::format("/score\n{}\n{}\n{}", pairs[i].first.size(), pairs[i].first, pairs[i].second));
    const auto hit = cache_.get(keys[i]);
    if (hit && hit->size() == 8) {
      out[i] = BinaryReader(*hit).f64();
    } else {
      missing.push_back(i);
    }
  }
  for (std::size_t start = 0; start < missing.size(); start += batch_size_) {
    const std::size_t end = std::min(missing.size(), start + batch_size_);
    json request;
    request["pairs"] = json::array();
    for (std::size_t k = start; k < end; ++k) {
      request["pairs"].push_back(json::array({pairs[missing[k]].first, pairs[missing[k]].second}));
    }
    const auto body = client_.post("/score", request.dump());
    json scores;
    try {
      scores = json::parse(body).at("scores");
    } catch (const json::exception& e) {
      fail(ErrorCode::kServiceErrorStatus, fmt::format("malformed /score response: {}", e.what()));
    }
    if (!scores.is_array() || scores.size() != end - start) {
      fail(ErrorCode::kServiceErrorStatus, fmt::format("/score returned {} scores for {} pairs",
                                                       scores.is_array() ? scores.size() : 0, end - start));
    }
    for (std::size_t k = start; k < end; ++k) {
      const auto& v = scores[k - start];
      if (!v.is_number()) fail(ErrorCode::kServiceErrorStatus, "/score returned a non-numeric score");
      const double s = v.get<double>();
      if (!std::isfinite(s)) fail(ErrorCode::kNonFiniteScore, "/score returned a non-finite score");
      out[missing[k]] = s;
      BinaryWriter w;
      w.f64(s);
      cache_.put(keys[missing[k]], w.data());
    }
  }
  return out;
}

std::string ExternalScorer::describe() const { return "external"; }

RerankLoss rerank_loss(const MlpScorer& scorer, const TextFeatures& u, const TextFeatures& positive,
                       std::span<const TextFeatures> negatives, const MlpPerturbation* perturbation) {
  check_pair_features(scorer, u);
  check_pair_features(scorer, positive);
  for (const auto& n : negatives) check_pair_features(scorer, n);

  const auto view = MlpAccess::view(scorer, perturbation);
  const std::size_t h = view.hidden;
  const bool sym = scorer.config().symmetrize;

  // One or two forward passes per candidate; each carries weight `scale` of
  // that candidate's logit.
  std::vector<Forward> passes;
  std::vector<double> logits;
  const auto add = [&](const TextFeatures& v) {
    passes.push_back(MlpAccess::forward(view, u, v));
    double d = passes.back().delta;
    if (sym) {
      passes.push_back(MlpAccess::forward(view, v, u));
      d = 0.5 * (d + passes.back().delta);
    }
    logits.push_back(d);
  };
  add(positive);
  for (const auto& n : negatives) add(n);

  RerankLoss out;
  auto& g = out.gradient;
  g.hidden = h;
  g.input_dim = view.input;
  g.b1.assign(h, 0.0);
  g.w2.assign(h, 0.0);
  if (negatives.empty()) return out;

  const auto sc = softmax_contrastive(logits);
  out.loss = sc.loss;

  for (const auto& f : passes) {
    for (const auto& e : f.x) g.columns.push_back(e.col);
  }
  std::sort(g.columns.begin(), g.columns.end());
  g.columns.erase(std::unique(g.columns.begin(), g.columns.end()), g.columns.end());
  g.w1.assign(g.columns.size() * h, 0.0);

  const std::size_t per = sym ? 2 : 1;
  const double scale = sym ? 0.5 : 1.0;
  std::vector<double> da(h);
  for (std::size_t k = 0; k < passes.size(); ++k) {
    const double gd = sc.dlogits[k / per] * scale;
    if (gd == 0.0) continue;
    const auto& f = passes[k];
    g.b2 += gd;
    for (std::size_t r = 0; r < h; ++r) {
      g.w2[r] += gd * f.h[r];
      da[r] = gd * view.w2[r] * sigmoid(f.a[r]);
      g.b1[r] += da[r];
    }
    for (const auto& e : f.x) {
      const auto slot = static_cast<std::size_t>(std::lower_bound(g.columns.begin(), g.columns.end(), e.col) -
                                                 g.columns.begin());
      double* dst = g.w1.data() + slot * h;
      for (std::size_t r = 0; r < h; ++r) dst[r] += da[r] * e.x;
    }
  }
  return out;
}

double rerank_loss_value(const PairScorer& scorer, const std::string& u, const std::string& positive,
                         std::span<const std::string> negatives) {
  if (negatives.empty()) return 0.0;
  std::vector<TextPair> pairs;
  pairs.reserve(negatives.size() + 1);
  pairs.emplace_back(u, positive);
  for (const auto& n : negatives) pairs.emplace_back(u, n);
  const auto scores = scorer.score_pairs(pairs);
  return softmax_contrastive(scores).loss;
}

RerankTrainingSet build_rerank_training_set(std::span<const CandidateSet> candidates,
                                            std::span<const EntityPair> train_pairs) {
  std::unordered_map<std::string, const CandidateSet*> by_source;
  for (const auto& s : candidates) by_source.emplace(s.source, &s);

  RerankTrainingSet out;
  std::size_t missing_sets = 0;
  std::size_t no_negatives = 0;
  for (const auto& p : train_pairs) {
    const auto it = by_source.find(p.source);
    if (it == by_source.end()) {
      ++missing_sets;
      continue;
    }
    RerankRecord rec{p.source, p.target, {}};
    bool found = false;
    for (const auto& c : it->second->candidates) {
      if (c.target == p.target) {
        found = true;
      } else {
        rec.negatives_pool.push_back(c.target);
      }
    }
    if (!found) ++out.injected_gold;
    if (rec.negatives_pool.empty()) {
      ++no_negatives;
      continue;
    }
    out.records.push_back(std::move(rec));
  }
  if (missing_sets > 0) logger()->warn("{} training sources have no candidate set and were skipped", missing_sets);
  if (no_negatives > 0) logger()->warn("{} training sources have no negative candidates and were skipped", no_negatives);
  if (out.injected_gold > 0) {
    logger()->info("gold target injected into {} of {} training candidate sets", out.injected_gold,
                   out.records.size());
  }
  return out;
}

RerankCurve train_reranker(MlpScorer& scorer, std::span<const CandidateSet> candidates,
                           std::span<const EntityPair> train_pairs, const EntityTexts& texts,
                           const RerankTrainingOptions& options, const RerankValidator& validate) {
  RerankCurve curve;
  if (options.epochs == 0) return curve;
  if (!(options.learning_rate > 0.0)) fail(ErrorCode::kConfigError, "learning rate must be positive");
  if (options.negatives == 0) fail(ErrorCode::kConfigError, "reranker needs at least one negative");
  const auto set = build_rerank_training_set(candidates, train_pairs);
  if (set.records.empty()) fail(ErrorCode::kEmptyTrainingSet, "no reranker training records");

  std::unordered_map<EntityId, TextFeatures> source_features;
  std::unordered_map<EntityId, TextFeatures> target_features;
  const auto target_of = [&](const EntityId& id) -> const TextFeatures& {
    auto it = target_features.find(id);
    if (it == target_features.end()) {
      it = target_features.emplace(id, scorer.features_of(lookup_text(texts.target, id, "target"))).first;
    }
    return it->second;
  };
  for (const auto& rec : set.records) {
    source_features.emplace(rec.source, scorer.features_of(lookup_text(texts.source, rec.source, "source")));
    target_of(rec.gold);
    for (const auto& n : rec.negatives_pool) target_of(n);
  }

  const std::size_t h = scorer.config().hidden;
  const std::size_t in = scorer.input_dim();
  const std::size_t batch_size = std::max<std::size_t>(1, options.batch_size);
  auto& w1 = MlpAccess::w1(scorer);
  auto& b1 = MlpAccess::b1(scorer);
  auto& w2 = MlpAccess::w2(scorer);
  auto& b2 = MlpAccess::b2(scorer);

  const bool adam = options.optimizer == Optimizer::kAdam;
  // Flat Adam state in storage order: W1 (input-major), b1, w2, b2.
  const std::size_t dense_offset = in * h;
  std::vector<float> m;
  std::vector<float> v;
  if (adam) {
    m.assign(dense_offset + 2 * h + 1, 0.0f);
    v.assign(dense_offset + 2 * h + 1, 0.0f);
  }
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  std::uint64_t step = 0;
  double bc1 = 1.0;
  double bc2 = 1.0;
  const auto apply = [&](float& param, std::size_t slot, double grad) {
    double update = grad;
    if (adam) {
      m[slot] = static_cast<float>(kBeta1 * m[slot] + (1.0 - kBeta1) * grad);
      v[slot] = static_cast<float>(kBeta2 * v[slot] + (1.0 - kBeta2) * grad * grad);
      update = (m[slot] / bc1) / (std::sqrt(v[slot] / bc2) + kEps);
    }
    param = static_cast<float>(param - options.learning_rate * update);
  };

  std::vector<double> g_w1(in * h, 0.0);
  std::vector<char> touched(in, 0);
  std::vector<std::uint32_t> touched_cols;
  std::vector<double> g_b1(h);
  std::vector<double> g_w2(h);
  double g_b2 = 0.0;

  double best_score = -std::numeric_limits<double>::infinity();
  MlpScorer best = scorer;
  std::size_t since_best = 0;
  if (validate) {
    best_score = validate(scorer);
    curve.validation.push_back(best_score);
  }

  std::vector<std::size_t> order(set.records.size());
  std::vector<TextFeatures> negs;
  std::vector<EntityId> sample;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(options.seed, epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(epoch_seed);
    rng.shuffle(std::span(order));

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(g_b1.begin(), g_b1.end(), 0.0);
      std::fill(g_w2.begin(), g_w2.end(), 0.0);
      g_b2 = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const auto& rec = set.records[order[b]];
        sample = rec.negatives_pool;
        if (sample.size() > options.negatives) {
          Rng pick(derive_seed(epoch_seed, rec.source));
          pick.partial_shuffle(std::span(sample), options.negatives);
          sample.resize(options.negatives);
        }
        negs.clear();
        for (const auto& n : sample) negs.push_back(target_features.at(n));
        const auto res = rerank_loss(scorer, source_features.at(rec.source), target_features.at(rec.gold), negs);
        epoch_loss += res.loss;
        const auto& g = res.gradient;
        for (std::size_t s = 0; s < g.columns.size(); ++s) {
          const auto c = g.columns[s];
          if (!touched[c]) {
            touched[c] = 1;
            touched_cols.push_back(c);
          }
          double* dst = g_w1.data() + static_cast<std::size_t>(c) * h;
          const double* src = g.w1.data() + s * h;
          for (std::size_t r = 0; r < h; ++r) dst[r] += src[r] * scale;
        }
        for (std::size_t r = 0; r < h; ++r) {
          g_b1[r] += g.b1[r] * scale;
          g_w2[r] += g.w2[r] * scale;
        }
        g_b2 += g.b2 * scale;
      }

      ++step;
      bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      std::sort(touched_cols.begin(), touched_cols.end());
      for (const auto c : touched_cols) {
        const std::size_t base = static_cast<std::size_t>(c) * h;
        for (std::size_t r = 0; r < h; ++r) {
          apply(w1[base + r], base + r, g_w1[base + r]);
          g_w1[base + r] = 0.0;
        }
        touched[c] = 0;
      }
      touched_cols.clear();
      for (std::size_t r = 0; r < h; ++r) {
        apply(b1[r], dense_offset + r, g_b1[r]);
        apply(w2[r], dense_offset + h + r, g_w2[r]);
      }
      apply(b2, dense_offset + 2 * h, g_b2);
    }

    const double mean_loss = epoch_loss / static_cast<double>(set.records.size());
    if (!std::isfinite(mean_loss)) fail(ErrorCode::kNonFiniteLoss, fmt::format("reranker epoch {} loss diverged", epoch));
    curve.epoch_loss.push_back(mean_loss);

    if (validate) {
      const double score = validate(scorer);
      curve.validation.push_back(score);
      logger()->info("reranker epoch {}: loss {:.6f}, validation {:.6f}", epoch, mean_loss, score);
      if (score > best_score) {
        best_score = score;
        best = scorer;
        curve.best_epoch = epoch;
        since_best = 0;
      } else if (options.patience > 0 && ++since_best >= options.patience) {
        break;
      }
    } else {
      logger()->info("reranker epoch {}: loss {:.6f}", epoch, mean_loss);
      curve.best_epoch = epoch;
    }
  }
  if (validate) scorer = std::move(best);
  return curve;
}

std::vector<CandidateSet> rerank(const PairScorer& scorer, std::span<const CandidateSet> candidates,
                                 const EntityTexts& texts, std::size_t max_text_chars, std::size_t threads) {
  std::vector<CandidateSet> out(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t i) {
    const auto& in = candidates[i];
    const auto u = capped(lookup_text(texts.source, in.source, "source"), max_text_chars);
    std::vector<TextPair> pairs;
    pairs.reserve(in.candidates.size());
    for (const auto& c : in.candidates) {
      pairs.emplace_back(u, capped(lookup_text(texts.target, c.target, "target"), max_text_chars));
    }
    const auto scores = pairs.empty() ? std::vector<double>{} : scorer.score_pairs(pairs);
    if (scores.size() != pairs.size()) fail(ErrorCode::kStageFailure, "scorer returned the wrong number of scores");
    auto& set = out[i];
    set.source = in.source;
    set.candidates.reserve(in.candidates.size());
    for (std::size_t k = 0; k < in.candidates.size(); ++k) {
      if (!std::isfinite(scores[k])) {
        fail(ErrorCode::kNonFiniteScore,
             fmt::format("non-finite score for ({}, {})", in.source, in.candidates[k].target));
      }
      set.candidates.push_back({in.candidates[k].target, scores[k]});
    }
    std::sort(set.candidates.begin(), set.candidates.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.target < b.target;
    });
  });
  return out;
}

}  // namespace kgalign
