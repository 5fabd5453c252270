#include "kgalign/eval.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>

#include <fmt/format.h>
#include <json.hpp>

#include "kgalign/error.hpp"
#include "kgalign/log.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<GoldRank> gold_ranks(std::span<const CandidateSet> ranked, std::span<const EntityPair> gold) {
  if (gold.empty()) fail(ErrorCode::kEmptyGold, "no gold pairs to evaluate");
  std::unordered_map<std::string, const CandidateSet*> by_source;
  for (const auto& s : ranked) by_source.emplace(s.source, &s);
  std::vector<GoldRank> out;
  out.reserve(gold.size());
  std::size_t missing = 0;
  for (const auto& p : gold) {
    GoldRank r{p.source, p.target, std::nullopt};
    const auto it = by_source.find(p.source);
    if (it == by_source.end()) {
      ++missing;
    } else {
      const auto& c = it->second->candidates;
      for (std::size_t i = 0; i < c.size(); ++i) {
        if (c[i].target == p.target) {
          r.rank = i + 1;
          break;
        }
      }
    }
    out.push_back(std::move(r));
  }
  if (missing > 0) logger()->warn("{} gold sources have no candidate set and count as misses", missing);
  return out;
}

double hits_at_k(std::span<const GoldRank> ranks, std::size_t k) {
  if (ranks.empty()) fail(ErrorCode::kEmptyGold, "no gold pairs to evaluate");
  std::size_t hits = 0;
  for (const auto& r : ranks) hits += (r.rank && *r.rank <= k) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double mrr(std::span<const GoldRank> ranks) {
  if (ranks.empty()) fail(ErrorCode::kEmptyGold, "no gold pairs to evaluate");
  double sum = 0.0;
  for (const auto& r : ranks) sum += r.rank ? 1.0 / static_cast<double>(*r.rank) : 0.0;
  return sum / static_cast<double>(ranks.size());
}

double hits_at_k(std::span<const CandidateSet> ranked, std::span<const EntityPair> gold, std::size_t k) {
  return hits_at_k(gold_ranks(ranked, gold), k);
}

double mrr(std::span<const CandidateSet> ranked, std::span<const EntityPair> gold) {
  return mrr(gold_ranks(ranked, gold));
}

Prf1 prf1(std::span<const AlignedPair> predicted, std::span<const EntityPair> gold) {
  std::set<std::pair<std::string, std::string>> gold_set;
  for (const auto& p : gold) gold_set.emplace(p.source, p.target);
  std::set<std::pair<std::string, std::string>> seen;
  Prf1 out;
  for (const auto& p : predicted) {
    if (!seen.emplace(p.source, p.target).second) continue;
    ++out.predicted;
    if (gold_set.count({p.source, p.target})) ++out.correct;
  }
  out.gold = gold_set.size();
  out.precision = out.predicted ? static_cast<double>(out.correct) / static_cast<double>(out.predicted) : 0.0;
  out.recall = out.gold ? static_cast<double>(out.correct) / static_cast<double>(out.gold) : 0.0;
  const double s = out.precision + out.recall;
  out.f1 = s > 0.0 ? 2.0 * out.precision * out.recall / s : 0.0;
  return out;
}

std::map<std::string, double> MetricsReport::metrics() const {
  std::map<std::string, double> out;
  for (const auto& [k, v] : hits_at) out[k == kUnboundedK ? "hits@inf" : fmt::format("hits@{}", k)] = v;
  out["mrr"] = mrr;
  if (decision) {
    out["precision"] = decision->precision;
    out["recall"] = decision->recall;
    out["f1"] = decision->f1;
  }
  return out;
}

std::string MetricsReport::to_json() const {
  json j;
  j["setting"] = setting;
  j["test_pairs"] = test_pairs;
  j["fingerprint"] = fingerprint;
  json hits = json::object();
  for (const auto& [k, v] : hits_at) hits[k == kUnboundedK ? "inf" : std::to_string(k)] = v;
  j["hits_at"] = hits;
  j["mrr"] = mrr;
  if (decision) {
    j["decision"] = {{"method", decision_method},
                     {"convention", "pairs predicted per source by the decision strategy"},
                     {"precision", decision->precision},
                     {"recall", decision->recall},
                     {"f1", decision->f1},
                     {"correct", decision->correct},
                     {"predicted", decision->predicted},
                     {"gold", decision->gold}};
  }
  return j.dump(2) + "\n";
}

MetricsReport MetricsReport::from_json(std::string_view text) {
  MetricsReport r;
  try {
    const auto j = json::parse(text);
    r.setting = j.at("setting").get<std::string>();
    r.test_pairs = j.at("test_pairs").get<std::size_t>();
    r.fingerprint = j.value("fingerprint", "");
    for (const auto& [k, v] : j.at("hits_at").items()) {
      r.hits_at[k == "inf" ? kUnboundedK : std::stoul(k)] = v.get<double>();
    }
    r.mrr = j.at("mrr").get<double>();
    if (j.contains("decision")) {
      const auto& d = j["decision"];
      Prf1 p;
      p.precision = d.at("precision").get<double>();
      p.recall = d.at("recall").get<double>();
      p.f1 = d.at("f1").get<double>();
      p.correct = d.at("correct").get<std::size_t>();
      p.predicted = d.at("predicted").get<std::size_t>();
      p.gold = d.at("gold").get<std::size_t>();
      r.decision = p;
      r.decision_method = d.value("method", "");
    }
  } catch (const std::exception& e) {
    fail(ErrorCode::kFormatError, fmt::format("invalid metrics report: {}", e.what()));
  }
  return r;
}

std::string MetricsReport::to_text() const {
  std::string out = fmt::format("setting      {}\ntest pairs   {}\n", setting, test_pairs);
  if (!fingerprint.empty()) out += fmt::format("fingerprint  {}\n", fingerprint);
  if (decision) out += fmt::format("decision     {}\n", decision_method);
  out += fmt::format("{:<12} {:>8}\n", "metric", "value");
  for (const auto& [name, v] : metrics()) out += fmt::format("{:<12} {:>8.4f}\n", name, v);
  return out;
}

MetricsReport make_report(std::span<const CandidateSet> ranked, std::span<const EntityPair> gold,
                          std::span<const std::size_t> ks, const AlignmentResult* decision, std::string setting,
                          std::string fingerprint) {
  const auto ranks = gold_ranks(ranked, gold);
  MetricsReport r;
  r.setting = std::move(setting);
  r.fingerprint = std::move(fingerprint);
  r.test_pairs = gold.size();
  for (const auto k : ks) r.hits_at[k] = hits_at_k(ranks, k);
  r.mrr = mrr(ranks);
  if (decision) {
    // Only decisions about evaluated sources count.
    std::set<std::string> sources;
    for (const auto& p : gold) sources.insert(p.source);
    std::vector<AlignedPair> scoped;
    for (const auto& p : decision->pairs) {
      if (sources.count(p.source)) scoped.push_back(p);
    }
    r.decision = prf1(scoped, gold);
    r.decision_method = std::string(alignment_method_name(decision->method));
  }
  return r;
}

std::vector<MetricDelta> compare_settings(const MetricsReport& regular, const MetricsReport& hard) {
  const auto a = regular.metrics();
  const auto b = hard.metrics();
  for (const auto& [k, v] : a) {
    if (!b.count(k)) fail(ErrorCode::kKeyMismatch, fmt::format("metric '{}' is missing from the hard report", k));
  }
  for (const auto& [k, v] : b) {
    if (!a.count(k)) fail(ErrorCode::kKeyMismatch, fmt::format("metric '{}' is missing from the regular report", k));
  }
  std::vector<MetricDelta> out;
  for (const auto& [k, v] : a) out.push_back({k, v, b.at(k), b.at(k) - v});
  return out;
}

std::string format_comparison(std::span<const MetricDelta> deltas) {
  std::string out = fmt::format("{:<12} {:>8} {:>8} {:>9}\n", "metric", "regular", "hard", "delta");
  for (const auto& d : deltas) {
    out += fmt::format("{:<12} {:>8.4f} {:>8.4f} {:>+9.4f}\n", d.metric, d.regular, d.hard, d.delta);
  }
  return out;
}

std::string format_ranks_csv(std::span<const GoldRank> ranks) {
  std::string out = "source,target,rank\n";
  for (const auto& r : ranks) {
    out += fmt::format("{},{},{}\n", csv_field(r.source), csv_field(r.target), r.rank ? std::to_string(*r.rank) : "");
  }
  return out;
}

}  // namespace kgalign
