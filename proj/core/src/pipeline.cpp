#include "kgalign/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <unistd.h>

#include <fmt/format.h>
#include <json.hpp>

#include "kgalign/binary_io.hpp"
#include "kgalign/error.hpp"
#include "kgalign/hash.hpp"
#include "kgalign/log.hpp"
#include "kgalign/reranker.hpp"
#include "kgalign/rng.hpp"
#include "kgalign/service_client.hpp"
#include "kgalign/verbalizer.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using Artifacts = std::map<std::string, std::string>;

constexpr std::string_view kSplitFiles[] = {"train", "val", "test"};

// Exclusive ownership of an output directory for the duration of a run.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      fail(ErrorCode::kLockHeld,
           fmt::format("'{}' exists; another run owns this output directory (delete the file if it is stale)",
                       path_.string()));
    }
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

std::string dataset_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += f.filename().string() + '\0' + sha256_file(f) + '\n';
  return sha256_hex(acc);
}

std::string curve_json(const std::vector<double>& loss, const std::vector<double>& validation, std::size_t best) {
  json j;
  j["epoch_loss"] = loss;
  j["validation"] = validation;
  j["best_epoch"] = best;
  return j.dump(2) + "\n";
}

template <typename Curve>
Curve parse_curve(const std::string& text) {
  const auto j = json::parse(text);
  Curve c;
  c.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
  c.validation = j.at("validation").get<std::vector<double>>();
  c.best_epoch = j.at("best_epoch").get<std::size_t>();
  return c;
}

std::shared_ptr<Transport> service_transport(const ServiceConfig& s, const char* env_var) {
  std::string url = s.url;
  if (url.empty()) {
    if (const char* v = std::getenv(env_var)) url = v;
  }
  if (url.empty()) {
    fail(ErrorCode::kConfigError, fmt::format("no service url configured; set the config field or {}", env_var));
  }
  std::string token;
  if (const char* v = std::getenv("KGALIGN_API_KEY")) token = v;
  return make_http_transport(url, std::chrono::milliseconds(s.timeout_ms), token);
}

class Runner {
 public:
  Runner(const PipelineConfig& config, Stage until) : c_(config), until_(until), out_(config.output) {}

  PipelineResult run() {
    c_.validate();
    fs::create_directories(out_);
    RunLock lock(out_);
    manifest_.fingerprint = c_.fingerprint();
    manifest_.config = c_.to_json();

    try {
      run_stages();
    } catch (...) {
      write_manifest();
      throw;
    }
    write_manifest();
    result_.manifest = manifest_;
    return std::move(result_);
  }

 private:
  // ---- stage plumbing ----

  bool wanted(Stage s) const { return static_cast<int>(s) <= static_cast<int>(until_); }

  static std::string hash_of(const Artifacts& a, const std::string& name) { return sha256_hex(a.at(name)); }

  void skip(Stage s) {
    StageRecord r;
    r.name = std::string(stage_name(s));
    r.skipped = true;
    manifest_.stages.push_back(std::move(r));
  }

  Artifacts stage(Stage s, const json& settings, const std::vector<std::string>& inputs,
                  const std::function<Artifacts()>& compute) {
    const std::string name(stage_name(s));
    std::string key_src = name + "\n" + settings.dump() + "\n";
    for (const auto& in : inputs) key_src += in + "\n";
    StageRecord rec;
    rec.name = name;
    rec.key = sha256_hex(key_src);
    const auto started = std::chrono::steady_clock::now();
    const fs::path dir = out_ / name;
    const fs::path meta_file = dir / "stage.json";

    Artifacts artifacts;
    bool hit = false;
    if (fs::exists(meta_file)) {
      try {
        const auto meta = json::parse(read_file(meta_file));
        if (meta.at("key").get<std::string>() == rec.key) {
          hit = true;
          for (const auto& [file, sha] : meta.at("artifacts").items()) {
            const auto path = dir / file;
            if (!fs::exists(path)) {
              hit = false;
              break;
            }
            auto bytes = read_file(path);
            if (sha256_hex(bytes) != sha.get<std::string>()) {
              hit = false;
              break;
            }
            artifacts.emplace(file, std::move(bytes));
          }
        }
      } catch (const std::exception&) {
        hit = false;
      }
    }

    if (!hit) {
      artifacts.clear();
      try {
        artifacts = compute();
      } catch (const Error& e) {
        throw Error(e.code(), fmt::format("stage {}: {}", name, e.detail()));
      } catch (const std::exception& e) {
        throw Error(ErrorCode::kStageFailure, fmt::format("stage {}: {}", name, e.what()));
      }
      fs::create_directories(dir);
      json meta;
      meta["key"] = rec.key;
      meta["artifacts"] = json::object();
      for (const auto& [file, bytes] : artifacts) {
        write_file_atomic(dir / file, bytes);
        meta["artifacts"][file] = sha256_hex(bytes);
      }
      write_file_atomic(meta_file, meta.dump(2) + "\n");
    }

    for (const auto& [file, bytes] : artifacts) rec.artifacts[name + "/" + file] = sha256_hex(bytes);
    rec.cache_hit = hit;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    logger()->info("stage {}: {} in {:.2f}s", name, hit ? "cached" : "done", rec.seconds);
    manifest_.stages.push_back(std::move(rec));
    return artifacts;
  }

  void write_manifest() {
    manifest_.config = c_.to_json();
    write_file_atomic(out_ / "manifest.json", manifest_.to_json());
  }

  // ---- lazily loaded inputs ----

  const DatasetBundle& bundle() {
    if (!bundle_) {
      auto b = load_bundle(c_.dataset.path, c_.dataset.format);
      if (!c_.dataset.source_names.empty()) b.source = b.source.with_names(load_names(c_.dataset.source_names));
      if (!c_.dataset.target_names.empty()) b.target = b.target.with_names(load_names(c_.dataset.target_names));
      bundle_ = std::move(b);
    }
    return *bundle_;
  }

  FeaturizerOptions features() const { return {c_.embedder.ngram, c_.embedder.feature_dim}; }

  ProjectionModel initial_projection() const {
    return ProjectionModel(c_.embedder.dim, features(), c_.embedder.normalize, c_.embedder.temperature,
                           derive_seed(c_.seed, "projection"));
  }

  json embedder_settings() const {
    const auto& e = c_.embedder;
    return {{"provider", e.provider}, {"dim", e.dim},           {"ngram", e.ngram},
            {"feature_dim", e.feature_dim}, {"normalize", e.normalize}, {"temperature", e.temperature}};
  }

  // ---- the stages ----

  void run_stages() {
    const std::string data_hash = dataset_hash(c_.dataset.path);
    std::string names_hash;
    for (const auto* p : {&c_.dataset.source_names, &c_.dataset.target_names}) {
      names_hash += p->empty() ? std::string("-") : sha256_file(*p);
      names_hash += ',';
    }

    // ingest
    const auto ingest = stage(Stage::kIngest, {{"format", dataset_format_name(c_.dataset.format)}},
                              {data_hash, names_hash}, [&] {
                                const auto& b = bundle();
                                const auto stats = [](const KgStats& s) {
                                  return json{{"entities", s.entities},
                                              {"relations", s.relations},
                                              {"attributes", s.attributes},
                                              {"rel_triples", s.rel_triples},
                                              {"attr_triples", s.attr_triples}};
                                };
                                json j;
                                j["source"] = stats(b.source.stats());
                                j["target"] = stats(b.target.stats());
                                j["gold_pairs"] = b.gold.size();
                                j["name"] = b.meta.name;
                                j["source_language"] = b.meta.source_language;
                                j["target_language"] = b.meta.target_language;
                                return Artifacts{{"stats.json", j.dump(2) + "\n"}};
                              });
    const std::string ingest_hash = hash_of(ingest, "stats.json");
    if (!wanted(Stage::kSplit)) return;

    // split
    json split_settings = {{"hard", c_.split.hard}, {"ratios", c_.split.ratios}, {"seed", c_.seed}};
    if (!c_.split.file.empty()) split_settings = {{"file", sha256_file(c_.split.file)}};
    if (c_.split.hard && c_.split.file.empty()) split_settings["names"] = embedder_settings();
    const auto split = stage(Stage::kSplit, split_settings, {data_hash, names_hash}, [&] {
      SeedAlignments seeds;
      if (!c_.split.file.empty()) {
        seeds = parse_split_tsv(read_file(c_.split.file), c_.split.file.string());
        check_seeds_against(seeds, bundle());
      } else if (c_.split.hard) {
        const auto model = std::make_shared<const ProjectionModel>(initial_projection());
        ProjectionEmbedder names(model, c_.threads);
        seeds = make_hard_split(
            bundle(),
            [&](std::span<const std::string> batch) {
              const auto m = names.embed_batch(batch);
              std::vector<std::vector<float>> rows(m.rows);
              for (std::size_t i = 0; i < m.rows; ++i) rows[i].assign(m.row(i).begin(), m.row(i).end());
              return rows;
            },
            c_.seed);
      } else {
        seeds = make_split(bundle().gold, c_.split.ratios, c_.seed);
      }
      return Artifacts{{"seeds.tsv", format_split_tsv(seeds)}};
    });
    const std::string split_hash = hash_of(split, "seeds.tsv");
    seeds_ = parse_split_tsv(split.at("seeds.tsv"));
    if (!c_.split.file.empty() && wanted(Stage::kEvaluate)) check_seeds_against(seeds_, bundle());
    if (!wanted(Stage::kVerbalize)) return;

    // verbalize
    const auto& v = c_.verbalizer;
    json verbalize_settings = {{"side_information", side_information_name(c_.side_information)},
                               {"enabled", v.enabled},
                               {"kind", v.kind},
                               {"budget", v.budget},
                               {"max_value_chars", v.max_value_chars}};
    if (v.enabled && v.kind == "external") {
      verbalize_settings["entity_type"] = v.entity_type;
      verbalize_settings["max_tokens"] = v.max_tokens;
    }
    const auto texts = stage(Stage::kVerbalize, verbalize_settings, {data_hash, names_hash}, [&] {
      return Artifacts{{"source.tsv", format_texts_tsv(verbalize(bundle().source))},
                       {"target.tsv", format_texts_tsv(verbalize(bundle().target))}};
    });
    const std::string texts_hash = hash_of(texts, "source.tsv") + hash_of(texts, "target.tsv");
    source_texts_ = parse_texts_tsv(texts.at("source.tsv"));
    target_texts_ = parse_texts_tsv(texts.at("target.tsv"));
    for (const auto& t : source_texts_) entity_texts_.source.emplace(t.entity_id, t.text);
    for (const auto& t : target_texts_) entity_texts_.target.emplace(t.entity_id, t.text);
    if (!wanted(Stage::kTrainEmbedder)) return;

    // train-embedder
    std::string model_hash;
    std::optional<Artifacts> projection;
    if (c_.embedder.provider == "hash") {
      json s = embedder_settings();
      s["seed"] = c_.seed;
      if (c_.embedder.train) {
        const auto& e = c_.embedder;
        s["train"] = {{"epochs", e.epochs},         {"learning_rate", e.learning_rate},
                      {"batch_size", e.batch_size}, {"optimizer", e.optimizer == Optimizer::kAdam ? "adam" : "sgd"},
                      {"patience", e.patience},     {"negatives", e.negatives},
                      {"pool", e.pool},             {"k", c_.retrieval.k}};
      }
      projection = stage(Stage::kTrainEmbedder, s, {texts_hash, split_hash}, [&] { return train_embedder(); });
      model_hash = hash_of(*projection, "projection.bin");
      if (projection->count("curve.json")) {
        result_.embedder_curve = parse_curve<TrainingCurve>(projection->at("curve.json"));
      }
    } else {
      skip(Stage::kTrainEmbedder);
    }
    if (!wanted(Stage::kEmbed)) return;

    // embed
    json embed_settings = embedder_settings();
    if (c_.embedder.provider == "external") {
      embed_settings["service_batch"] = c_.embedder.request_batch;
    }
    const auto embedded = stage(Stage::kEmbed, embed_settings, {texts_hash, model_hash}, [&] {
      std::shared_ptr<const EmbeddingProvider> provider;
      if (projection) {
        provider = std::make_shared<ProjectionEmbedder>(
            std::make_shared<const ProjectionModel>(ProjectionModel::deserialize(projection->at("projection.bin"))),
            c_.threads);
      } else {
        ExternalEmbedderOptions o;
        o.dim = c_.embedder.dim;
        o.batch_size = c_.embedder.request_batch;
        o.normalize = c_.embedder.normalize;
        provider = std::make_shared<ExternalEmbedder>(
            ServiceClient(service_transport(c_.embedder.service, "KGALIGN_EMBED_URL"), c_.embedder.service.retries),
            ResponseCache(out_ / "cache" / "embed"), o);
      }
      return Artifacts{{"source.emb", embed_table(*provider, source_texts_).serialize()},
                       {"target.emb", embed_table(*provider, target_texts_).serialize()}};
    });
    const auto source_table = EmbeddingTable::deserialize(embedded.at("source.emb"));
    if (!wanted(Stage::kIndex)) return;

    // index
    const auto& r = c_.retrieval;
    json index_settings = {{"kind", index_kind_name(r.index)}};
    if (r.index == IndexKind::kApproximate) {
      index_settings["hnsw"] = {{"m", r.hnsw.m}, {"ef_construction", r.hnsw.ef_construction},
                                {"ef_search", r.hnsw.ef_search}, {"seed", c_.seed}};
    }
    const auto indexed = stage(Stage::kIndex, index_settings, {hash_of(embedded, "target.emb")}, [&] {
      auto t = EmbeddingTable::deserialize(embedded.at("target.emb"));
      auto params = r.hnsw;
      params.seed = derive_seed(c_.seed, "hnsw");
      return Artifacts{{"target.idx", VectorIndex::build(std::move(t.ids), std::move(t.vectors), r.index, params).serialize()}};
    });
    if (!wanted(Stage::kRetrieve)) return;

    // retrieve
    const bool train_reranker_needed = c_.reranker.enabled && c_.reranker.kind == "mlp";
    const std::size_t train_k = std::max(r.k, c_.reranker.pool);
    json retrieve_settings = {{"k", r.k}};
    if (train_reranker_needed) retrieve_settings["train_k"] = train_k;
    const auto retrieved =
        stage(Stage::kRetrieve, retrieve_settings,
              {hash_of(indexed, "target.idx"), hash_of(embedded, "source.emb"), split_hash}, [&] {
                const auto index = VectorIndex::deserialize(indexed.at("target.idx"));
                Artifacts a;
                for (const auto split : {Split::kTrain, Split::kValidation, Split::kTest}) {
                  if (split == Split::kTrain && !train_reranker_needed) continue;
                  const std::size_t k = split == Split::kTrain ? train_k : r.k;
                  a.emplace(fmt::format("{}.jsonl", split_name(split)),
                            format_candidates_jsonl(retrieve(index, source_table, seeds_.pairs_in(split), k)));
                }
                return a;
              });
    if (!wanted(Stage::kTrainReranker)) return;

    // train-reranker
    std::optional<Artifacts> scorer;
    const auto& rr = c_.reranker;
    if (train_reranker_needed) {
      json s = {{"negatives", rr.negatives},   {"pool", rr.pool},
                {"max_text_chars", rr.max_text_chars}, {"hidden", rr.hidden},
                {"ngram", rr.ngram},           {"feature_dim", rr.feature_dim},
                {"symmetrize", rr.symmetrize}, {"epochs", rr.epochs},
                {"use_embeddings", rr.use_embeddings && projection.has_value()},
                {"learning_rate", rr.learning_rate}, {"batch_size", rr.batch_size},
                {"patience", rr.patience},     {"seed", c_.seed}};
      std::shared_ptr<const ProjectionModel> encoder;
      if (rr.use_embeddings && projection) {
        encoder = std::make_shared<const ProjectionModel>(ProjectionModel::deserialize(projection->at("projection.bin")));
      }
      scorer = stage(Stage::kTrainReranker, s,
                     {hash_of(retrieved, "train.jsonl"), hash_of(retrieved, "val.jsonl"), texts_hash, split_hash,
                      encoder ? model_hash : std::string("-")},
                     [&] { return train_scorer(retrieved, encoder); });
      result_.reranker_curve = parse_curve<RerankCurve>(scorer->at("curve.json"));
    } else {
      skip(Stage::kTrainReranker);
    }
    if (!wanted(Stage::kRerank)) return;

    // rerank
    Artifacts final_candidates = retrieved;
    if (rr.enabled) {
      json s = {{"kind", rr.kind}, {"max_text_chars", rr.max_text_chars}};
      std::vector<std::string> inputs{hash_of(retrieved, "val.jsonl"), hash_of(retrieved, "test.jsonl"), texts_hash};
      if (scorer) inputs.push_back(hash_of(*scorer, "scorer.bin"));
      final_candidates = stage(Stage::kRerank, s, inputs, [&] {
        std::shared_ptr<const PairScorer> pair_scorer;
        if (scorer) {
          pair_scorer = std::make_shared<MlpScorer>(MlpScorer::deserialize(scorer->at("scorer.bin")));
        } else {
          pair_scorer = std::make_shared<ExternalScorer>(
              ServiceClient(service_transport(rr.service, "KGALIGN_SCORE_URL"), rr.service.retries),
              ResponseCache(out_ / "cache" / "score"), rr.request_batch);
        }
        Artifacts a;
        for (const char* file : {"val.jsonl", "test.jsonl"}) {
          const auto sets = parse_candidates_jsonl(retrieved.at(file));
          a.emplace(file, format_candidates_jsonl(rerank(*pair_scorer, sets, entity_texts_, rr.max_text_chars,
                                                         c_.threads)));
        }
        return a;
      });
    } else {
      skip(Stage::kRerank);
    }
    if (!wanted(Stage::kAlign)) return;

    // align
    const auto& al = c_.alignment;
    json align_settings = {{"method", alignment_method_name(al.method)}};
    if (al.method == AlignmentMethod::kSinkhorn) {
      align_settings["epsilon"] = al.epsilon;
      align_settings["max_iterations"] = al.max_iterations;
      align_settings["tolerance"] = al.tolerance;
    }
    const auto aligned = stage(Stage::kAlign, align_settings, {hash_of(final_candidates, "test.jsonl")}, [&] {
      const auto sets = parse_candidates_jsonl(final_candidates.at("test.jsonl"));
      SinkhornOptions so{al.epsilon, al.max_iterations, al.tolerance};
      const auto decision = decide(al.method, sets, so);
      return Artifacts{{"alignment.tsv", format_alignment_tsv(decision)},
                       {"alignment.json", alignment_metadata_json(decision)}};
    });
    if (!wanted(Stage::kEvaluate)) return;

    // evaluate
    json eval_settings = {{"hits_at", c_.eval.hits_at},
                          {"ranks_csv", c_.eval.ranks_csv},
                          {"fingerprint", manifest_.fingerprint},
                          {"method", alignment_method_name(al.method)}};
    std::vector<std::string> eval_inputs{hash_of(final_candidates, "test.jsonl"), hash_of(aligned, "alignment.tsv"),
                                         split_hash, hash_of(retrieved, "test.jsonl")};
    const auto evaluated = stage(Stage::kEvaluate, eval_settings, eval_inputs, [&] {
      const auto gold = seeds_.pairs_in(Split::kTest);
      const std::string setting = c_.split.hard ? "hard" : "regular";
      const auto sets = parse_candidates_jsonl(final_candidates.at("test.jsonl"));
      AlignmentResult decision;
      decision.method = al.method;
      decision.one_to_one = al.method != AlignmentMethod::kGreedy;
      decision.pairs = parse_alignment_tsv(aligned.at("alignment.tsv"));
      const auto report = make_report(sets, gold, c_.eval.hits_at, &decision, setting, manifest_.fingerprint);
      Artifacts a{{"report.json", report.to_json()}, {"report.txt", report.to_text()}};
      if (c_.eval.ranks_csv) a.emplace("ranks.csv", format_ranks_csv(gold_ranks(sets, gold)));
      if (rr.enabled) {
        const auto er = parse_candidates_jsonl(retrieved.at("test.jsonl"));
        a.emplace("retrieval_report.json",
                  make_report(er, gold, c_.eval.hits_at, nullptr, setting, manifest_.fingerprint).to_json());
      }
      return a;
    });
    result_.report = MetricsReport::from_json(evaluated.at("report.json"));
    if (evaluated.count("retrieval_report.json")) {
      result_.retrieval_report = MetricsReport::from_json(evaluated.at("retrieval_report.json"));
    }
  }

  std::vector<VerbalizedEntity> verbalize(const KnowledgeGraph& kg) {
    SerializeOptions o;
    o.budget = c_.verbalizer.budget;
    o.max_value_chars = c_.verbalizer.max_value_chars;
    switch (c_.side_information) {
      case SideInformation::kAttributes:
        o.use_names = false;
        break;
      case SideInformation::kNames:
      case SideInformation::kTranslatedNames:
        o.include_attributes = false;
        break;
      case SideInformation::kNamesAndAttributes:
        break;
    }
    std::vector<TripleSequence> seqs;
    seqs.reserve(kg.entities().size());
    for (const auto& e : kg.entities()) seqs.push_back(serialize_triples(kg, e, o));

    std::vector<VerbalizedEntity> out;
    out.reserve(seqs.size());
    if (!c_.verbalizer.enabled) {
      // Raw serialization: the triple tokens joined by spaces.
      for (const auto& s : seqs) {
        std::string raw;
        for (const auto& t : s.tokens()) {
          if (!raw.empty()) raw += ' ';
          raw += t;
        }
        out.push_back({s.entity_id, std::move(raw), Provenance::kTemplate, s.truncated});
      }
    } else if (c_.verbalizer.kind == "template") {
      for (const auto& s : seqs) out.push_back(render_template(s));
    } else {
      ExternalVerbalizerOptions vo{c_.verbalizer.entity_type, c_.verbalizer.max_tokens, c_.verbalizer.parallelism};
      ExternalVerbalizer ev(
          ServiceClient(service_transport(c_.verbalizer.service, "KGALIGN_GENERATE_URL"), c_.verbalizer.service.retries),
          ResponseCache(out_ / "cache" / "generate"), vo);
      out = ev.verbalize_all(seqs);
    }
    return out;
  }

  static std::vector<std::string> texts_of(const std::vector<VerbalizedEntity>& v) {
    std::vector<std::string> out;
    out.reserve(v.size());
    for (const auto& e : v) out.push_back(e.text);
    return out;
  }

  EmbeddingTable embed_table(const EmbeddingProvider& provider, const std::vector<VerbalizedEntity>& v) const {
    EmbeddingTable t;
    for (const auto& e : v) t.ids.push_back(e.entity_id);
    t.vectors = provider.embed_batch(texts_of(v));
    return t;
  }

  std::vector<CandidateSet> retrieve(const VectorIndex& index, const EmbeddingTable& sources,
                                     const std::vector<EntityPair>& pairs, std::size_t k) const {
    std::unordered_map<std::string, std::size_t> row;
    for (std::size_t i = 0; i < sources.ids.size(); ++i) row.emplace(sources.ids[i], i);
    std::vector<EntityId> ids;
    DenseMatrix queries(pairs.size(), sources.vectors.cols);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto it = row.find(pairs[i].source);
      if (it == row.end()) fail(ErrorCode::kUnknownEntity, fmt::format("no embedding for '{}'", pairs[i].source));
      ids.push_back(pairs[i].source);
      const auto src = sources.vectors.row(it->second);
      std::copy(src.begin(), src.end(), queries.row(i).begin());
    }
    if (ids.empty()) return {};
    return topk_all(index, ids, queries, k, c_.threads);
  }

  Artifacts train_embedder() {
    auto model = initial_projection();
    Artifacts a;
    if (c_.embedder.train) {
      const auto& e = c_.embedder;
      const auto feats = features();
      const auto target_features = featurize_all(texts_of(target_texts_), feats, c_.threads);
      std::unordered_map<std::string, std::size_t> target_row;
      for (std::size_t i = 0; i < target_texts_.size(); ++i) target_row.emplace(target_texts_[i].entity_id, i);
      std::unordered_map<std::string, std::size_t> source_row;
      for (std::size_t i = 0; i < source_texts_.size(); ++i) source_row.emplace(source_texts_[i].entity_id, i);
      const auto source_features = featurize_all(texts_of(source_texts_), feats, c_.threads);
      std::vector<EntityId> target_ids;
      for (const auto& t : target_texts_) target_ids.push_back(t.entity_id);

      const auto lookup = [](const std::unordered_map<std::string, std::size_t>& m, const EntityId& id) {
        const auto it = m.find(id);
        if (it == m.end()) fail(ErrorCode::kMissingText, fmt::format("no text for '{}'", id));
        return it->second;
      };

      // Negatives come from the pool_size nearest targets under the initial model.
      const auto train = seeds_.pairs_in(Split::kTrain);
      const auto model_ptr = std::make_shared<const ProjectionModel>(model);
      ProjectionEmbedder initial(model_ptr, c_.threads);
      const auto index = VectorIndex::build(target_ids, initial.embed_features(target_features));
      std::vector<EntityId> train_sources;
      std::vector<FeatureVector> train_features;
      for (const auto& p : train) {
        train_sources.push_back(p.source);
        train_features.push_back(source_features[lookup(source_row, p.source)]);
      }
      const auto pools = topk_all(index, train_sources, initial.embed_features(train_features), e.pool, c_.threads);
      std::vector<ContrastiveRecord> records;
      for (std::size_t i = 0; i < train.size(); ++i) {
        ContrastiveRecord rec;
        rec.source = lookup(source_row, train[i].source);
        rec.positive = lookup(target_row, train[i].target);
        const auto negs = sample_negatives(pools[i].candidates, train[i].target, e.negatives,
                                           derive_seed(c_.seed, "negatives:" + train[i].source));
        for (const auto& n : negs) rec.negatives.push_back(lookup(target_row, n));
        records.push_back(std::move(rec));
      }

      const auto val = seeds_.pairs_in(Split::kValidation);
      ProjectionValidator validator;
      if (!val.empty()) {
        std::vector<EntityId> val_sources;
        std::vector<FeatureVector> val_features;
        for (const auto& p : val) {
          val_sources.push_back(p.source);
          val_features.push_back(source_features[lookup(source_row, p.source)]);
        }
        validator = [&, val_sources, val_features, val](const ProjectionModel& m) {
          ProjectionEmbedder emb(std::make_shared<const ProjectionModel>(m), c_.threads);
          const auto idx = VectorIndex::build(target_ids, emb.embed_features(target_features));
          const auto sets = topk_all(idx, val_sources, emb.embed_features(val_features), c_.retrieval.k, c_.threads);
          return mrr(sets, val);
        };
      }
      ProjectionTrainingOptions o;
      o.epochs = e.epochs;
      o.learning_rate = e.learning_rate;
      o.batch_size = e.batch_size;
      o.optimizer = e.optimizer;
      o.seed = derive_seed(c_.seed, "embedder-training");
      o.patience = e.patience;
      const auto curve = train_projection(model, source_features, target_features, records, o, validator);
      a.emplace("curve.json", curve_json(curve.epoch_loss, curve.validation, curve.best_epoch));
    }
    a.emplace("projection.bin", model.serialize());
    return a;
  }

  Artifacts train_scorer(const Artifacts& retrieved, std::shared_ptr<const ProjectionModel> encoder) {
    const auto& rr = c_.reranker;
    MlpScorerConfig sc;
    sc.features = {rr.ngram, rr.feature_dim};
    sc.hidden = rr.hidden;
    sc.symmetrize = rr.symmetrize;
    sc.max_text_chars = rr.max_text_chars;
    sc.seed = derive_seed(c_.seed, "reranker");
    MlpScorer scorer(sc, std::move(encoder));

    // Training sets keep the full top-pool so negatives are drawn from it.
    auto train_sets = parse_candidates_jsonl(retrieved.at("train.jsonl"));
    for (auto& s : train_sets) {
      if (s.candidates.size() > rr.pool) s.candidates.resize(rr.pool);
    }
    const auto val_sets = parse_candidates_jsonl(retrieved.at("val.jsonl"));
    const auto val = seeds_.pairs_in(Split::kValidation);
    RerankValidator validator;
    if (!val.empty()) {
      validator = [&](const MlpScorer& s) {
        return hits_at_k(rerank(s, val_sets, entity_texts_, rr.max_text_chars, c_.threads), val, 1);
      };
    }
    RerankTrainingOptions o;
    o.negatives = rr.negatives;
    o.epochs = rr.epochs;
    o.learning_rate = rr.learning_rate;
    o.batch_size = rr.batch_size;
    o.seed = derive_seed(c_.seed, "reranker-training");
    o.patience = rr.patience;
    const auto curve =
        train_reranker(scorer, train_sets, seeds_.pairs_in(Split::kTrain), entity_texts_, o, validator);
    return Artifacts{{"scorer.bin", scorer.serialize()},
                     {"curve.json", curve_json(curve.epoch_loss, curve.validation, curve.best_epoch)}};
  }

  const PipelineConfig& c_;
  Stage until_;
  fs::path out_;
  RunManifest manifest_;
  PipelineResult result_;

  std::optional<DatasetBundle> bundle_;
  SeedAlignments seeds_;
  std::vector<VerbalizedEntity> source_texts_;
  std::vector<VerbalizedEntity> target_texts_;
  EntityTexts entity_texts_;
};

}  // namespace

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::kIngest:
      return "ingest";
    case Stage::kSplit:
      return "split";
    case Stage::kVerbalize:
      return "verbalize";
    case Stage::kTrainEmbedder:
      return "train-embedder";
    case Stage::kEmbed:
      return "embed";
    case Stage::kIndex:
      return "index";
    case Stage::kRetrieve:
      return "retrieve";
    case Stage::kTrainReranker:
      return "train-reranker";
    case Stage::kRerank:
      return "rerank";
    case Stage::kAlign:
      return "align";
    case Stage::kEvaluate:
      return "evaluate";
  }
  return "unknown";
}

std::string RunManifest::to_json() const {
  json j;
  j["fingerprint"] = fingerprint;
  j["config"] = config.empty() ? json::object() : json::parse(config);
  j["stages"] = json::array();
  for (const auto& s : stages) {
    json st = {{"name", s.name}, {"skipped", s.skipped}};
    if (!s.skipped) {
      st["key"] = s.key;
      st["cache_hit"] = s.cache_hit;
      st["seconds"] = s.seconds;
      st["artifacts"] = s.artifacts;
    }
    j["stages"].push_back(std::move(st));
  }
  return j.dump(2) + "\n";
}

PipelineResult run_pipeline(const PipelineConfig& config, Stage until) { return Runner(config, until).run(); }

}  // namespace kgalign
