#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kgalign/alignment.hpp"
#include "kgalign/embedder.hpp"
#include "kgalign/eval.hpp"
#include "kgalign/kg_store.hpp"
#include "kgalign/reranker.hpp"
#include "kgalign/retrieval.hpp"

namespace kgalign {

// Which side information reaches the text:
//   attributes            ids instead of names, relations and attributes
//   names                 names and relations
//   names_and_attributes  everything
//   translated_names      as names, with names from pre-translated files
enum class SideInformation { kAttributes, kNames, kNamesAndAttributes, kTranslatedNames };

std::string_view side_information_name(SideInformation s);
SideInformation parse_side_information(std::string_view name);

// An HTTP model service. An empty url falls back to the environment variable
// named by the owning section (for example KGALIGN_EMBED_URL); the bearer
// token always comes from KGALIGN_API_KEY.
struct ServiceConfig {
  std::string url;
  int retries = 1;
  int timeout_ms = 30000;
};

struct PipelineConfig {
  struct Dataset {
    std::filesystem::path path;
    DatasetFormat format = DatasetFormat::kOpenEA;
    std::filesystem::path source_names;  // translated_names only
    std::filesystem::path target_names;
  } dataset;

  SideInformation side_information = SideInformation::kNamesAndAttributes;

  struct SplitSettings {
    bool hard = false;
    std::array<double, 3> ratios{0.3, 0.1, 0.6};
    std::filesystem::path file;  // use a fixed split instead
  } split;

  struct Verbalizer {
    // false: raw triple serialization, the EV-off ablation.
    bool enabled = true;
    std::string kind = "template";  // template | external
    std::size_t budget = 2048;
    std::size_t max_value_chars = 100;
    std::string entity_type = "person";
    int max_tokens = 256;
    int parallelism = 4;
    ServiceConfig service;
  } verbalizer;

  struct Embedder {
    std::string provider = "hash";  // hash | external
    std::size_t dim = 256;
    std::size_t ngram = 3;
    std::uint32_t feature_dim = 1u << 14;
    bool normalize = true;
    double temperature = 0.05;
    bool train = false;
    std::size_t epochs = 5;
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    Optimizer optimizer = Optimizer::kAdam;
    std::size_t patience = 0;
    std::size_t negatives = 64;
    std::size_t pool = 200;
    std::size_t request_batch = 64;  // external only
    ServiceConfig service;
  } embedder;

  struct Retrieval {
    std::size_t k = 50;
    IndexKind index = IndexKind::kExact;
    HnswParams hnsw;
  } retrieval;

  struct Reranker {
    bool enabled = false;
    std::string kind = "mlp";  // mlp | external
    std::size_t negatives = 110;
    std::size_t pool = 200;
    std::size_t max_text_chars = 512;
    std::size_t hidden = 128;
    std::size_t ngram = 3;
    std::uint32_t feature_dim = 1u << 12;
    bool symmetrize = false;
    // Feed the trained projection's embeddings into the interaction (hash
    // provider only).
    bool use_embeddings = true;
    std::size_t epochs = 5;
    double learning_rate = 1e-3;
    std::size_t batch_size = 12;
    std::size_t patience = 0;
    std::size_t request_batch = 64;  // external only
    ServiceConfig service;
  } reranker;

  struct Alignment {
    AlignmentMethod method = AlignmentMethod::kGreedy;
    double epsilon = 0.05;
    std::size_t max_iterations = 1000;
    double tolerance = 1e-9;
  } alignment;

  struct Eval {
    std::vector<std::size_t> hits_at{1, 10};
    bool ranks_csv = true;
  } eval;

  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::filesystem::path output = "run";

  // Relative paths resolve against `base_dir`. Unknown keys and wrongly typed
  // values raise ConfigError naming the field.
  static PipelineConfig from_json(std::string_view text, const std::filesystem::path& base_dir = {});
  static PipelineConfig load(const std::filesystem::path& file);

  // Every field, defaults included.
  std::string to_json() const;
  // Throws MissingFile / ConfigError naming the offending field.
  void validate() const;
  // sha256 over every setting that can change a result (not output, threads).
  std::string fingerprint() const;
};

enum class Stage {
  kIngest,
  kSplit,
  kVerbalize,
  kTrainEmbedder,
  kEmbed,
  kIndex,
  kRetrieve,
  kTrainReranker,
  kRerank,
  kAlign,
  kEvaluate,
};

std::string_view stage_name(Stage s);

struct StageRecord {
  std::string name;
  std::string key;
  bool cache_hit = false;
  bool skipped = false;  // disabled by the config
  double seconds = 0.0;
  std::map<std::string, std::string> artifacts;  // relative path -> sha256
};

struct RunManifest {
  std::string fingerprint;
  std::string config;  // resolved config JSON
  std::vector<StageRecord> stages;

  std::string to_json() const;
};

struct PipelineResult {
  RunManifest manifest;
  std::optional<MetricsReport> report;            // final ranking + decision
  std::optional<MetricsReport> retrieval_report;  // ER ranking alone, when AR ran
  std::optional<TrainingCurve> embedder_curve;
  std::optional<RerankCurve> reranker_curve;
};

// Runs stages in order up to and including `until`, reusing cached stage
// outputs whose inputs are unchanged. Holds `<output>/.lock` while running.
PipelineResult run_pipeline(const PipelineConfig& config, Stage until = Stage::kEvaluate);

}  // namespace kgalign
