#include "kgalign/synth.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "kgalign/binary_io.hpp"
#include "kgalign/error.hpp"
#include "kgalign/rng.hpp"
#include "kgalign/text.hpp"

namespace kgalign {
namespace {

// Words for names and categorical values; the first member of each group is
// the one the generator emits.
const char* const kWordGroups[] = {
    "red,crimson,scarlet",         "blue,azure,cobalt",          "green,emerald,verdant",
    "black,ebony,sable",           "white,ivory,snowy",          "gold,golden,gilded",
    "silver,argent,silvery",       "gray,ashen,slate",           "big,large,great",
    "small,little,tiny",           "old,ancient,elder",          "new,modern,fresh",
    "bright,shining,radiant",      "dark,shadowy,dim",           "quick,swift,rapid",
    "quiet,silent,hushed",         "brave,bold,valiant",         "wise,sage,learned",
    "high,tall,lofty",             "deep,profound,bottomless",   "cold,frozen,icy",
    "warm,heated,balmy",           "wild,untamed,feral",         "calm,serene,tranquil",
    "strong,mighty,powerful",      "noble,regal,royal",          "holy,sacred,blessed",
    "hidden,secret,concealed",     "lonely,solitary,isolated",   "rich,wealthy,prosperous",
    "river,stream,brook",          "mountain,peak,summit",       "hill,mound,knoll",
    "lake,pond,mere",              "sea,ocean,deep blue",        "forest,woods,timberland",
    "valley,dale,vale",            "city,town,borough",          "harbor,port,haven",
    "bridge,span,crossing",        "tower,spire,turret",         "castle,fortress,citadel",
    "house,home,dwelling",         "hall,chamber,salon",         "road,street,avenue",
    "path,trail,track",            "gate,portal,entrance",       "garden,park,orchard",
    "field,meadow,pasture",        "island,isle,atoll",          "stone,rock,boulder",
    "fire,flame,blaze",            "star,astral,stellar",        "moon,lunar,crescent",
    "sky,heaven,firmament",        "storm,tempest,gale",         "rain,shower,drizzle",
    "snow,frost,sleet",            "wind,breeze,gust",           "wolf,lupine,canine",
    "bear,ursine,grizzly",         "eagle,raptor,aquila",        "hawk,falcon,kestrel",
    "lion,leonine,panthera",       "horse,steed,stallion",       "fox,vixen,reynard",
    "crow,raven,rook",             "owl,strix,hooter",           "deer,stag,hart",
    "fish,trout,salmon",           "oak,quercus,acorn tree",     "pine,conifer,fir",
    "rose,bloom,blossom",          "lily,lotus,iris",            "iron,steel,ferrous",
    "copper,bronze,brass",         "glass,crystal,pane",         "wood,timber,lumber",
    "clay,earthen,terracotta",     "salt,saline,brine",          "honey,nectar,mead",
    "bread,loaf,bun",              "wine,vintage,claret",        "king,monarch,sovereign",
    "queen,empress,consort",       "knight,cavalier,paladin",    "saint,hallow,martyr",
    "merchant,trader,dealer",      "sailor,mariner,seaman",      "hunter,tracker,stalker",
    "smith,forger,metalworker",    "singer,vocalist,chanter",    "poet,bard,rhymer",
    "north,northern,boreal",       "south,southern,austral",     "east,eastern,oriental",
    "west,western,occidental",     "upper,higher,superior",      "lower,nether,inferior",
    "first,prime,premier",         "last,final,ultimate",        "twin,double,paired",
    "hundred,centum,century",      "crown,diadem,coronet",       "shield,buckler,aegis",
    "sword,blade,saber",           "arrow,bolt,dart",            "ship,vessel,craft",
    "wheel,disc,ring",             "mill,factory,works",         "market,bazaar,fair",
    "temple,shrine,sanctum",       "school,academy,institute",   "library,archive,athenaeum",
    "song,ballad,hymn",            "dream,vision,reverie",       "hope,wish,aspiration",
    "peace,harmony,concord",       "glory,honor,renown",         "dawn,sunrise,daybreak",
    "dusk,twilight,sundown",       "winter,midwinter,wintertide", "summer,midsummer,summertide",
    "spring,vernal,springtide",    "autumn,fall,harvest season", "silk,satin,velvet",
    "amber,topaz,ochre",           "jade,nephrite,greenstone",   "pearl,nacre,margarite",
};

const char* const kRelationGroups[] = {
    "locatedIn,situatedIn,placedIn",        "partOf,sectionOf,pieceOf",
    "memberOf,belongsTo,affiliatedWith",    "foundedBy,establishedBy,createdBy",
    "adjacentTo,borders,neighbours",        "twinnedWith,pairedWith,sisterOf",
    "ruledBy,governedBy,ledBy",             "namedAfter,honours,commemorates",
    "successorOf,follows,succeeds",         "alliedWith,friendsWith,partnerOf",
};

enum class ValueKind { kWord, kPhrase, kYear, kCount, kMeasure };

struct AttributeSpec {
  const char* group;
  ValueKind kind;
};

const AttributeSpec kAttributeSpecs[] = {
    {"color,colour,hue", ValueKind::kWord},
    {"material,substance,fabric", ValueKind::kWord},
    {"founded,established,inception", ValueKind::kYear},
    {"motto,slogan,watchword", ValueKind::kPhrase},
    {"terrain,landscape,topography", ValueKind::kWord},
    {"style,manner,fashion", ValueKind::kWord},
    {"population,inhabitants,residents", ValueKind::kCount},
    {"elevation,altitude,height", ValueKind::kMeasure},
    {"climate,weather,conditions", ValueKind::kWord},
    {"symbol,emblem,insignia", ValueKind::kWord},
    {"genre,category,kind", ValueKind::kWord},
    {"patron,protector,guardian", ValueKind::kPhrase},
};

std::vector<std::string> split_members(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',' || line[i] == '\t') {
      const auto member = text::trim(line.substr(start, i - start));
      if (!member.empty()) out.emplace_back(member);
      start = i + 1;
    }
  }
  return out;
}

std::string first_member(const char* group) { return split_members(group).front(); }

std::string title_case(std::string_view w) {
  std::string s(w);
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

bool is_upper_initial(std::string_view w) { return !w.empty() && w[0] >= 'A' && w[0] <= 'Z'; }

class Synthesizer {
 public:
  Synthesizer(const SynthOptions& options, const Lexicon& lexicon) : opt_(options), lex_(lexicon), rng_(options.seed) {
    for (const auto* g : kWordGroups) words_.push_back(first_member(g));
    for (const auto* g : kRelationGroups) relations_.push_back(first_member(g));
  }

  DatasetBundle run() {
    if (opt_.entities == 0) fail(ErrorCode::kConfigError, "synthetic dataset needs at least one entity");
    if (opt_.name_words == 0) fail(ErrorCode::kConfigError, "synthetic names need at least one word");
    if (opt_.min_attributes > opt_.max_attributes) fail(ErrorCode::kConfigError, "min_attributes > max_attributes");
    for (const double r : {opt_.attribute_dropout, opt_.synonym_rate, opt_.triple_dropout}) {
      if (!(r >= 0.0 && r <= 1.0)) fail(ErrorCode::kConfigError, "perturbation rates must lie in [0, 1]");
    }

    const std::size_t n = opt_.entities;
    std::vector<EntityId> src_ids(n);
    for (std::size_t i = 0; i < n; ++i) src_ids[i] = fmt::format("http://kg1.example/entity/e{:05d}", i);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng_.shuffle(std::span(perm));
    std::vector<EntityId> tgt_ids(n);
    for (std::size_t i = 0; i < n; ++i) tgt_ids[i] = fmt::format("http://kg2.example/entity/x{:05d}", perm[i]);

    // Source KG.
    std::vector<std::string> names(n);
    std::set<std::string> used_names;
    for (auto& name : names) {
      for (int attempt = 0;; ++attempt) {
        std::string candidate;
        for (std::size_t w = 0; w < opt_.name_words; ++w) {
          if (w) candidate += ' ';
          candidate += title_case(pick(words_));
        }
        if (used_names.insert(candidate).second) {
          name = std::move(candidate);
          break;
        }
        if (attempt > 1000) fail(ErrorCode::kConfigError, "cannot generate enough distinct names; add name words");
      }
    }

    std::vector<AttributeTriple> src_attr;
    std::vector<RelationTriple> src_rel;
    const std::size_t n_specs = std::size(kAttributeSpecs);
    for (std::size_t i = 0; i < n; ++i) {
      src_attr.push_back({src_ids[i], "name", names[i]});
      const std::size_t hi = std::min(opt_.max_attributes, n_specs);
      const std::size_t lo = std::min(opt_.min_attributes, hi);
      const std::size_t count = lo + static_cast<std::size_t>(rng_.uniform_below(hi - lo + 1));
      std::vector<std::size_t> specs(n_specs);
      std::iota(specs.begin(), specs.end(), 0);
      rng_.partial_shuffle(std::span(specs), count);
      for (std::size_t k = 0; k < count; ++k) {
        const auto& spec = kAttributeSpecs[specs[k]];
        src_attr.push_back({src_ids[i], first_member(spec.group), make_value(spec.kind)});
      }
      if (n > 1) {
        std::set<std::pair<std::string, std::size_t>> edges;
        for (std::size_t k = 0; k < opt_.relations_per_entity; ++k) {
          std::size_t j = static_cast<std::size_t>(rng_.uniform_below(n - 1));
          if (j >= i) ++j;
          const auto& r = pick(relations_);
          if (edges.emplace(r, j).second) src_rel.push_back({src_ids[i], r, src_ids[j]});
        }
      }
    }

    // Target clone. Predicate renames are decided once per label.
    std::map<std::string, std::string> label_map;
    const auto target_label = [&](const std::string& label) -> const std::string& {
      auto it = label_map.find(label);
      if (it == label_map.end()) {
        it = label_map.emplace(label, rng_.uniform01() < opt_.synonym_rate ? substitute(label) : label).first;
      }
      return it->second;
    };
    std::unordered_map<std::string, std::size_t> src_index;
    for (std::size_t i = 0; i < n; ++i) src_index.emplace(src_ids[i], i);

    std::vector<AttributeTriple> tgt_attr;
    for (const auto& t : src_attr) {
      const auto& id = tgt_ids[src_index.at(t.subject)];
      if (t.attribute == "name") {
        tgt_attr.push_back({id, "name", perturb_tokens(t.value)});
        continue;
      }
      if (rng_.uniform01() < opt_.attribute_dropout) continue;
      tgt_attr.push_back({id, target_label(t.attribute), perturb_tokens(t.value)});
    }
    std::vector<RelationTriple> tgt_rel;
    for (const auto& t : src_rel) {
      if (rng_.uniform01() < opt_.triple_dropout) continue;
      tgt_rel.push_back({tgt_ids[src_index.at(t.subject)], target_label(t.relation), tgt_ids[src_index.at(t.object)]});
    }

    DatasetBundle b;
    b.source = KnowledgeGraph(std::move(src_rel), std::move(src_attr), src_ids);
    b.target = KnowledgeGraph(std::move(tgt_rel), std::move(tgt_attr), tgt_ids);
    for (std::size_t i = 0; i < n; ++i) b.gold.push_back({src_ids[i], tgt_ids[i]});
    std::sort(b.gold.begin(), b.gold.end());
    b.meta.name = "synthetic";
    return b;
  }

 private:
  const std::string& pick(const std::vector<std::string>& from) {
    return from[static_cast<std::size_t>(rng_.uniform_below(from.size()))];
  }

  std::string make_value(ValueKind kind) {
    switch (kind) {
      case ValueKind::kWord:
        return pick(words_);
      case ValueKind::kPhrase:
        return pick(words_) + " " + pick(words_);
      case ValueKind::kYear:
        return std::to_string(1000 + rng_.uniform_below(1021));
      case ValueKind::kCount:
        return std::to_string(100 + rng_.uniform_below(999900));
      case ValueKind::kMeasure:
        return fmt::format("{} m", rng_.uniform_below(5000));
    }
    return {};
  }

  // Another member of the token's group, or the token itself.
  std::string substitute(const std::string& token) {
    const int g = lex_.group_of(token);
    if (g < 0) return token;
    const auto& members = lex_.groups()[static_cast<std::size_t>(g)];
    if (members.size() < 2) return token;
    const auto lower = text::ascii_lower(token);
    std::vector<const std::string*> others;
    for (const auto& m : members) {
      if (text::ascii_lower(m) != lower) others.push_back(&m);
    }
    if (others.empty()) return token;
    const auto& chosen = *others[static_cast<std::size_t>(rng_.uniform_below(others.size()))];
    return is_upper_initial(token) ? title_case(chosen) : chosen;
  }

  std::string perturb_tokens(const std::string& value) {
    if (opt_.synonym_rate <= 0.0) return value;
    std::string out;
    for (const auto token : text::split(value, ' ')) {
      if (!out.empty()) out += ' ';
      const std::string t(token);
      out += rng_.uniform01() < opt_.synonym_rate ? substitute(t) : t;
    }
    return out;
  }

  SynthOptions opt_;
  const Lexicon& lex_;
  Rng rng_;
  std::vector<std::string> words_;
  std::vector<std::string> relations_;
};

}  // namespace

Lexicon::Lexicon(std::vector<std::vector<std::string>> groups) : groups_(std::move(groups)) {
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (const auto& m : groups_[g]) index_.emplace(text::ascii_lower(m), static_cast<int>(g));
  }
}

const Lexicon& Lexicon::builtin() {
  static const Lexicon lex = [] {
    std::vector<std::vector<std::string>> groups;
    for (const auto* g : kWordGroups) groups.push_back(split_members(g));
    for (const auto* g : kRelationGroups) groups.push_back(split_members(g));
    for (const auto& s : kAttributeSpecs) groups.push_back(split_members(s.group));
    return Lexicon(std::move(groups));
  }();
  return lex;
}

Lexicon Lexicon::parse(std::string_view contents, const std::string& origin) {
  std::vector<std::vector<std::string>> groups;
  std::size_t line_no = 0;
  for (auto line : text::split(contents, '\n')) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (text::trim(line).empty()) continue;
    auto members = split_members(line);
    if (members.size() < 2) throw MalformedLineError(origin, line_no, "a synonym group needs at least two members");
    groups.push_back(std::move(members));
  }
  return Lexicon(std::move(groups));
}

Lexicon Lexicon::load(const std::filesystem::path& file) { return parse(read_file(file), file.string()); }

int Lexicon::group_of(std::string_view token) const {
  const auto it = index_.find(text::ascii_lower(token));
  return it == index_.end() ? -1 : it->second;
}

DatasetBundle generate_synthetic(const SynthOptions& options, const Lexicon& substitutions) {
  return Synthesizer(options, substitutions).run();
}

void write_synthetic(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_openea_side(dir, bundle.source, 1);
  write_openea_side(dir, bundle.target, 2);
  write_links(dir / "ent_links", bundle.gold);
}

}  // namespace kgalign
