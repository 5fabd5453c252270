#include "kgalign_tools/cli.hpp"

#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "kgalign/error.hpp"
#include "kgalign/pipeline.hpp"
#include "kgalign/synth.hpp"

namespace kgalign {
namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::optional<std::size_t> threads;
};

struct StageCommand {
  const char* name;
  Stage until;
  const char* help;
};

constexpr StageCommand kStageCommands[] = {
    {"ingest", Stage::kIngest, "Load and check both KGs and the gold links"},
    {"split", Stage::kSplit, "Split gold links into train/val/test"},
    {"verbalize", Stage::kVerbalize, "Turn every entity into a text"},
    {"train-embedder", Stage::kTrainEmbedder, "Train the hashed n-gram projection"},
    {"embed", Stage::kEmbed, "Embed every entity text"},
    {"index", Stage::kIndex, "Build the target vector index"},
    {"retrieve", Stage::kRetrieve, "Retrieve top-k target candidates"},
    {"train-reranker", Stage::kTrainReranker, "Train the pair reranker"},
    {"rerank", Stage::kRerank, "Rerank retrieved candidates"},
    {"align", Stage::kAlign, "Decide the final alignment"},
    {"evaluate", Stage::kEvaluate, "Score the ranking and decision against gold"},
    {"run", Stage::kEvaluate, "Run every stage"},
};

void add_common(CLI::App& app, CommonFlags& f) {
  app.add_option("--config", f.config, "Pipeline config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "Override the config seed");
  app.add_option("--out", f.out, "Override the output directory");
  app.add_option("--data", f.data, "Override the dataset directory");
  app.add_option("--threads", f.threads, "Worker threads (0 = hardware)");
}

PipelineConfig resolve_config(const CommonFlags& f) {
  PipelineConfig c = f.config.empty() ? PipelineConfig{} : PipelineConfig::load(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.out.empty()) c.output = f.out;
  if (!f.data.empty()) c.dataset.path = f.data;
  if (f.threads) c.threads = *f.threads;
  if (c.dataset.path.empty()) fail(ErrorCode::kConfigError, "dataset.path is not set; pass --config or --data");
  return c;
}

void print_summary(std::ostream& out, const PipelineResult& r, bool full) {
  for (const auto& s : r.manifest.stages) {
    if (s.skipped) {
      fmt::print(out, "{:<15} skipped\n", s.name);
    } else {
      fmt::print(out, "{:<15} {:<6} {:8.2f}s\n", s.name, s.cache_hit ? "cached" : "ran", s.seconds);
    }
  }
  if (full && r.report) {
    if (r.retrieval_report) {
      out << "\nretrieval only\n" << r.retrieval_report->to_text() << "\nafter reranking\n";
    } else {
      out << '\n';
    }
    out << r.report->to_text();
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Entity alignment by retrieval and reranking over verbalized knowledge graphs", "kgalign"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string split_file;
  std::vector<std::pair<CLI::App*, const StageCommand*>> stage_apps;
  for (const auto& cmd : kStageCommands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    add_common(*sub, flags);
    if (cmd.until == Stage::kSplit) {
      sub->add_flag("--hard", "Use the hard (low name similarity) test split");
    }
    if (std::string_view(cmd.name) == "evaluate") {
      sub->add_option("--split", split_file, "Evaluate against a fixed split file")->check(CLI::ExistingFile);
    }
    stage_apps.emplace_back(sub, &cmd);
  }

  SynthOptions synth;
  std::string synth_out;
  std::string lexicon_file;
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic KG pair with a perturbed clone");
  gen->add_option("--out", synth_out, "Output directory")->required();
  gen->add_option("--entities", synth.entities, "Entities per KG")->check(CLI::PositiveNumber);
  gen->add_option("--seed", synth.seed, "Generator seed");
  gen->add_option("--attr-dropout", synth.attribute_dropout, "Chance to drop a target attribute")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--synonym-rate", synth.synonym_rate, "Chance to substitute a token in the target")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--triple-dropout", synth.triple_dropout, "Chance to drop a target relation triple")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--lexicon", lexicon_file, "Synonym groups, one per line")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 1;
  }

  try {
    if (gen->parsed()) {
      const auto bundle = lexicon_file.empty() ? generate_synthetic(synth)
                                               : generate_synthetic(synth, Lexicon::load(lexicon_file));
      write_synthetic(bundle, synth_out);
      fmt::print(out, "wrote {} entities per side and {} gold links to {}\n", bundle.source.entities().size(),
                 bundle.gold.size(), synth_out);
      return 0;
    }
    for (const auto& [sub, cmd] : stage_apps) {
      if (!sub->parsed()) continue;
      auto config = resolve_config(flags);
      if (cmd->until == Stage::kSplit && sub->count("--hard") > 0) config.split.hard = true;
      if (!split_file.empty()) config.split.file = split_file;
      const auto result = run_pipeline(config, cmd->until);
      print_summary(out, result, cmd->until == Stage::kEvaluate);
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return is_validation_error(e.code()) ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace kgalign
