#include <cmath>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "kgalign/binary_io.hpp"
#include "kgalign/error.hpp"
#include "kgalign/hash.hpp"
#include "kgalign/pipeline.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path, const fs::path& base) : j_(j), path_(std::move(path)), base_(base) {
    if (!j_.is_object()) bad_type("", "an object");
  }

  void get(const char* key, bool& out) { with(key, [&](const json& v) {
    if (!v.is_boolean()) bad_type(key, "a boolean");
    out = v.get<bool>();
  }); }

  void get(const char* key, std::size_t& out) { with(key, [&](const json& v) {
    if (!v.is_number_unsigned()) bad_type(key, "a non-negative integer");
    out = v.get<std::size_t>();
  }); }

  void get(const char* key, std::uint32_t& out) {
    std::size_t v = out;
    get(key, v);
    if (v > 0xFFFFFFFFu) fail(ErrorCode::kConfigError, fmt::format("{} is too large", field(key)));
    out = static_cast<std::uint32_t>(v);
  }

  void get_u64(const char* key, std::uint64_t& out) { with(key, [&](const json& v) {
    if (!v.is_number_unsigned()) bad_type(key, "a non-negative integer");
    out = v.get<std::uint64_t>();
  }); }

  void get(const char* key, int& out) { with(key, [&](const json& v) {
    if (!v.is_number_integer()) bad_type(key, "an integer");
    out = v.get<int>();
  }); }

  void get(const char* key, double& out) { with(key, [&](const json& v) {
    if (!v.is_number()) bad_type(key, "a number");
    out = v.get<double>();
  }); }

  void get(const char* key, std::string& out) { with(key, [&](const json& v) {
    if (!v.is_string()) bad_type(key, "a string");
    out = v.get<std::string>();
  }); }

  void get(const char* key, fs::path& out) {
    std::string s;
    if (!has(key)) return;
    get(key, s);
    out = s.empty() ? fs::path() : (fs::path(s).is_absolute() || base_.empty() ? fs::path(s) : base_ / s);
  }

  template <typename Parse, typename T>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    if (!has(key)) return;
    get(key, s);
    try {
      out = parse(s);
    } catch (const Error& e) {
      fail(ErrorCode::kConfigError, fmt::format("{}: {}", field(key), e.detail()));
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Section child(const char* key) {
    used_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key), base_);
  }

  const json* raw(const char* key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string field(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) fail(ErrorCode::kConfigError, fmt::format("unknown config field '{}'", field(k)));
    }
  }

  [[noreturn]] void bad_type(std::string_view key, std::string_view what) const {
    fail(ErrorCode::kConfigError, fmt::format("{} must be {}", key.empty() ? path_ : field(key), what));
  }

 private:
  template <typename Fn>
  void with(const char* key, Fn&& fn) {
    used_.insert(key);
    if (j_.contains(key)) fn(j_.at(key));
  }

  const json& j_;
  std::string path_;
  fs::path base_;
  std::set<std::string> used_;
};

void read_service(Section s, ServiceConfig& out) {
  s.get("url", out.url);
  s.get("retries", out.retries);
  s.get("timeout_ms", out.timeout_ms);
  s.finish();
}

json service_json(const ServiceConfig& s) {
  return {{"url", s.url}, {"retries", s.retries}, {"timeout_ms", s.timeout_ms}};
}

Optimizer parse_optimizer(std::string_view s) {
  if (s == "adam") return Optimizer::kAdam;
  if (s == "sgd") return Optimizer::kSgd;
  fail(ErrorCode::kConfigError, fmt::format("unknown optimizer '{}'", s));
}

std::string_view optimizer_name(Optimizer o) { return o == Optimizer::kAdam ? "adam" : "sgd"; }

void require(bool ok, std::string_view field, std::string_view what) {
  if (!ok) fail(ErrorCode::kConfigError, fmt::format("{} {}", field, what));
}

void require_file(const fs::path& p, std::string_view field) {
  if (p.empty()) fail(ErrorCode::kConfigError, fmt::format("{} is required", field));
  if (!fs::exists(p)) fail(ErrorCode::kMissingFile, fmt::format("{}: '{}' does not exist", field, p.string()));
}

}  // namespace

std::string_view side_information_name(SideInformation s) {
  switch (s) {
    case SideInformation::kAttributes:
      return "attributes";
    case SideInformation::kNames:
      return "names";
    case SideInformation::kNamesAndAttributes:
      return "names_and_attributes";
    case SideInformation::kTranslatedNames:
      return "translated_names";
  }
  return "names_and_attributes";
}

SideInformation parse_side_information(std::string_view name) {
  if (name == "attributes") return SideInformation::kAttributes;
  if (name == "names") return SideInformation::kNames;
  if (name == "names_and_attributes") return SideInformation::kNamesAndAttributes;
  if (name == "translated_names") return SideInformation::kTranslatedNames;
  fail(ErrorCode::kConfigError, fmt::format("unknown side information mode '{}'", name));
}

PipelineConfig PipelineConfig::from_json(std::string_view text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfigError, fmt::format("config is not valid JSON: {}", e.what()));
  }
  PipelineConfig c;
  Section root(j, "", base_dir);

  {
    auto s = root.child("dataset");
    s.get("path", c.dataset.path);
    s.get_enum("format", c.dataset.format, parse_dataset_format);
    s.get("source_names", c.dataset.source_names);
    s.get("target_names", c.dataset.target_names);
    s.finish();
  }
  root.get_enum("side_information", c.side_information, parse_side_information);
  {
    auto s = root.child("split");
    std::string mode = c.split.hard ? "hard" : "regular";
    s.get("mode", mode);
    require(mode == "regular" || mode == "hard", "split.mode", "must be 'regular' or 'hard'");
    c.split.hard = mode == "hard";
    if (const auto* r = s.raw("ratios")) {
      if (!r->is_array() || r->size() != 3 || !std::all_of(r->begin(), r->end(), [](const json& x) { return x.is_number(); })) {
        fail(ErrorCode::kConfigError, "split.ratios must be three numbers (train, validation, test)");
      }
      for (std::size_t i = 0; i < 3; ++i) c.split.ratios[i] = (*r)[i].get<double>();
    }
    s.get("file", c.split.file);
    s.finish();
  }
  {
    auto s = root.child("verbalizer");
    s.get("enabled", c.verbalizer.enabled);
    s.get("kind", c.verbalizer.kind);
    s.get("budget", c.verbalizer.budget);
    s.get("max_value_chars", c.verbalizer.max_value_chars);
    s.get("entity_type", c.verbalizer.entity_type);
    s.get("max_tokens", c.verbalizer.max_tokens);
    s.get("parallelism", c.verbalizer.parallelism);
    read_service(s.child("service"), c.verbalizer.service);
    s.finish();
  }
  {
    auto s = root.child("embedder");
    auto& e = c.embedder;
    s.get("provider", e.provider);
    s.get("dim", e.dim);
    s.get("ngram", e.ngram);
    s.get("feature_dim", e.feature_dim);
    s.get("normalize", e.normalize);
    const bool has_tau = s.has("temperature");
    s.get("temperature", e.temperature);
    if (!has_tau && !e.normalize) e.temperature = 1.0;
    s.get("train", e.train);
    s.get("epochs", e.epochs);
    s.get("learning_rate", e.learning_rate);
    s.get("batch_size", e.batch_size);
    s.get_enum("optimizer", e.optimizer, parse_optimizer);
    s.get("patience", e.patience);
    s.get("negatives", e.negatives);
    s.get("pool", e.pool);
    s.get("request_batch", e.request_batch);
    read_service(s.child("service"), e.service);
    s.finish();
  }
  {
    auto s = root.child("retrieval");
    s.get("k", c.retrieval.k);
    s.get_enum("index", c.retrieval.index, parse_index_kind);
    auto h = s.child("hnsw");
    h.get("m", c.retrieval.hnsw.m);
    h.get("ef_construction", c.retrieval.hnsw.ef_construction);
    h.get("ef_search", c.retrieval.hnsw.ef_search);
    h.finish();
    s.finish();
  }
  {
    auto s = root.child("reranker");
    auto& r = c.reranker;
    s.get("enabled", r.enabled);
    s.get("kind", r.kind);
    s.get("negatives", r.negatives);
    s.get("pool", r.pool);
    s.get("max_text_chars", r.max_text_chars);
    s.get("hidden", r.hidden);
    s.get("ngram", r.ngram);
    s.get("feature_dim", r.feature_dim);
    s.get("symmetrize", r.symmetrize);
    s.get("use_embeddings", r.use_embeddings);
    s.get("epochs", r.epochs);
    s.get("learning_rate", r.learning_rate);
    s.get("batch_size", r.batch_size);
    s.get("patience", r.patience);
    s.get("request_batch", r.request_batch);
    read_service(s.child("service"), r.service);
    s.finish();
  }
  {
    auto s = root.child("alignment");
    s.get_enum("method", c.alignment.method, parse_alignment_method);
    const bool sinkhorn = c.alignment.method == AlignmentMethod::kSinkhorn;
    for (const char* key : {"epsilon", "max_iterations", "tolerance"}) {
      if (s.has(key) && !sinkhorn) {
        fail(ErrorCode::kConfigError, fmt::format("alignment.{} only applies to method 'sinkhorn'", key));
      }
    }
    s.get("epsilon", c.alignment.epsilon);
    s.get("max_iterations", c.alignment.max_iterations);
    s.get("tolerance", c.alignment.tolerance);
    s.finish();
  }
  {
    auto s = root.child("eval");
    if (const auto* h = s.raw("hits_at")) {
      if (!h->is_array() || h->empty() ||
          !std::all_of(h->begin(), h->end(), [](const json& x) { return x.is_number_unsigned() && x.get<std::size_t>() > 0; })) {
        fail(ErrorCode::kConfigError, "eval.hits_at must be a non-empty list of positive integers");
      }
      c.eval.hits_at.clear();
      for (const auto& x : *h) c.eval.hits_at.push_back(x.get<std::size_t>());
    }
    s.get("ranks_csv", c.eval.ranks_csv);
    s.finish();
  }
  root.get_u64("seed", c.seed);
  root.get("threads", c.threads);
  root.get("output", c.output);
  root.finish();
  c.retrieval.hnsw.seed = c.seed;
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& file) {
  if (!fs::exists(file)) fail(ErrorCode::kMissingFile, fmt::format("config file '{}' does not exist", file.string()));
  return from_json(read_file(file), file.parent_path());
}

std::string PipelineConfig::to_json() const {
  json j;
  j["dataset"] = {{"path", dataset.path.string()},
                  {"format", dataset_format_name(dataset.format)},
                  {"source_names", dataset.source_names.string()},
                  {"target_names", dataset.target_names.string()}};
  j["side_information"] = side_information_name(side_information);
  j["split"] = {{"mode", split.hard ? "hard" : "regular"},
                {"ratios", split.ratios},
                {"file", split.file.string()}};
  j["verbalizer"] = {{"enabled", verbalizer.enabled},         {"kind", verbalizer.kind},
                     {"budget", verbalizer.budget},           {"max_value_chars", verbalizer.max_value_chars},
                     {"entity_type", verbalizer.entity_type}, {"max_tokens", verbalizer.max_tokens},
                     {"parallelism", verbalizer.parallelism}, {"service", service_json(verbalizer.service)}};
  j["embedder"] = {{"provider", embedder.provider},
                   {"dim", embedder.dim},
                   {"ngram", embedder.ngram},
                   {"feature_dim", embedder.feature_dim},
                   {"normalize", embedder.normalize},
                   {"temperature", embedder.temperature},
                   {"train", embedder.train},
                   {"epochs", embedder.epochs},
                   {"learning_rate", embedder.learning_rate},
                   {"batch_size", embedder.batch_size},
                   {"optimizer", optimizer_name(embedder.optimizer)},
                   {"patience", embedder.patience},
                   {"negatives", embedder.negatives},
                   {"pool", embedder.pool},
                   {"request_batch", embedder.request_batch},
                   {"service", service_json(embedder.service)}};
  j["retrieval"] = {{"k", retrieval.k},
                    {"index", index_kind_name(retrieval.index)},
                    {"hnsw",
                     {{"m", retrieval.hnsw.m},
                      {"ef_construction", retrieval.hnsw.ef_construction},
                      {"ef_search", retrieval.hnsw.ef_search}}}};
  j["reranker"] = {{"enabled", reranker.enabled},
                   {"kind", reranker.kind},
                   {"negatives", reranker.negatives},
                   {"pool", reranker.pool},
                   {"max_text_chars", reranker.max_text_chars},
                   {"hidden", reranker.hidden},
                   {"ngram", reranker.ngram},
                   {"feature_dim", reranker.feature_dim},
                   {"use_embeddings", reranker.use_embeddings},
                   {"symmetrize", reranker.symmetrize},
                   {"epochs", reranker.epochs},
                   {"learning_rate", reranker.learning_rate},
                   {"batch_size", reranker.batch_size},
                   {"patience", reranker.patience},
                   {"request_batch", reranker.request_batch},
                   {"service", service_json(reranker.service)}};
  j["alignment"] = {{"method", alignment_method_name(alignment.method)}};
  if (alignment.method == AlignmentMethod::kSinkhorn) {
    j["alignment"]["epsilon"] = alignment.epsilon;
    j["alignment"]["max_iterations"] = alignment.max_iterations;
    j["alignment"]["tolerance"] = alignment.tolerance;
  }
  j["eval"] = {{"hits_at", eval.hits_at}, {"ranks_csv", eval.ranks_csv}};
  j["seed"] = seed;
  j["threads"] = threads;
  j["output"] = output.string();
  return j.dump(2) + "\n";
}

void PipelineConfig::validate() const {
  require_file(dataset.path, "dataset.path");
  if (!fs::is_directory(dataset.path)) {
    fail(ErrorCode::kMissingFile, fmt::format("dataset.path: '{}' is not a directory", dataset.path.string()));
  }
  if (side_information == SideInformation::kTranslatedNames) {
    if (dataset.source_names.empty() && dataset.target_names.empty()) {
      fail(ErrorCode::kConfigError, "side_information 'translated_names' needs dataset.source_names or dataset.target_names");
    }
  }
  if (!dataset.source_names.empty()) require_file(dataset.source_names, "dataset.source_names");
  if (!dataset.target_names.empty()) require_file(dataset.target_names, "dataset.target_names");
  if (!split.file.empty()) require_file(split.file, "split.file");

  double sum = 0.0;
  for (const double r : split.ratios) {
    require(std::isfinite(r) && r >= 0.0, "split.ratios", "must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail(ErrorCode::kRatioSumError, fmt::format("split.ratios sum to {}, not 1", sum));

  require(verbalizer.kind == "template" || verbalizer.kind == "external", "verbalizer.kind",
          "must be 'template' or 'external'");
  require(verbalizer.budget > 0, "verbalizer.budget", "must be positive");
  require(verbalizer.parallelism > 0, "verbalizer.parallelism", "must be positive");
  require(embedder.provider == "hash" || embedder.provider == "external", "embedder.provider",
          "must be 'hash' or 'external'");
  require(embedder.dim > 0, "embedder.dim", "must be positive");
  require(embedder.ngram > 0, "embedder.ngram", "must be positive");
  require(embedder.feature_dim > 0, "embedder.feature_dim", "must be positive");
  require(embedder.temperature > 0.0, "embedder.temperature", "must be positive");
  require(embedder.learning_rate > 0.0, "embedder.learning_rate", "must be positive");
  require(embedder.pool >= embedder.negatives, "embedder.pool", "must be at least embedder.negatives");
  require(!embedder.train || embedder.provider == "hash", "embedder.train", "is only supported for the hash provider");
  require(retrieval.k > 0, "retrieval.k", "must be positive");
  require(retrieval.hnsw.m >= 2, "retrieval.hnsw.m", "must be at least 2");
  require(reranker.kind == "mlp" || reranker.kind == "external", "reranker.kind", "must be 'mlp' or 'external'");
  require(reranker.negatives > 0, "reranker.negatives", "must be positive");
  require(reranker.pool >= reranker.negatives, "reranker.pool", "must be at least reranker.negatives");
  require(reranker.max_text_chars > 0, "reranker.max_text_chars", "must be positive");
  require(reranker.hidden > 0, "reranker.hidden", "must be positive");
  require(reranker.feature_dim > 0 && reranker.ngram > 0, "reranker features", "need positive ngram and feature_dim");
  require(reranker.learning_rate > 0.0, "reranker.learning_rate", "must be positive");
  require(alignment.epsilon > 0.0, "alignment.epsilon", "must be positive");
  require(alignment.max_iterations >= 1, "alignment.max_iterations", "must be at least 1");
  require(!output.empty(), "output", "is required");
}

std::string PipelineConfig::fingerprint() const {
  auto j = json::parse(to_json());
  j.erase("output");
  j.erase("threads");
  return sha256_hex(j.dump());
}

}  // namespace kgalign
