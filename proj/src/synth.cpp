#include "mkd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mkd/cotlang.hpp"

namespace mkd {

// ---------------------------------------------------------------------------
// Seeding

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  // splitmix64 finalizer over a combined key
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ index);
}

std::uint64_t hash_string(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

namespace {

enum Stream : std::uint64_t {
  kCatalogStream = 1,
  kPairStream = 2,
  kIntentStream = 3,
  kNoiseStream = 4,
  kRouteStream = 5,
};

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read vocabulary file " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    std::string phrase = normalize_phrase(line);
    if (!phrase.empty()) out.push_back(std::move(phrase));
  }
  if (out.empty()) throw ConfigError("vocabulary file is empty: " + path.string());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::load(const std::filesystem::path& dir) {
  Vocabulary v;
  for (Aspect a : kAllAspects) {
    auto& values = v.values_[static_cast<std::size_t>(a)];
    values = read_lines(dir / (std::string(aspect_id(a)) + ".txt"));
    for (const auto& phrase : values) {
      if (!v.owner_.emplace(phrase, a).second) {
        throw ConfigError("vocabulary phrase listed twice: " + phrase);
      }
      v.max_phrase_tokens_ = std::max(v.max_phrase_tokens_, whitespace_tokenize(phrase).size());
    }
  }
  v.filler_ = read_lines(dir / "filler.txt");
  return v;
}

std::optional<Aspect> Vocabulary::aspect_of(std::string_view phrase) const {
  auto it = owner_.find(std::string(phrase));
  if (it == owner_.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------
// Config

void GenConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid generator config: " + what); };
  if (n_items < 1) fail("n_items must be >= 1");
  if (!(mismatch_rate >= 0.0 && mismatch_rate <= 1.0)) fail("mismatch_rate must lie in [0,1]");
  if (min_aspects_per_query < 1 || max_aspects_per_query < min_aspects_per_query) {
    fail("aspects_per_query must be a range [min,max] with 1 <= min <= max");
  }
  if (!(zipf_exponent > 0.0)) fail("zipf_exponent must be > 0");
  if (!(teacher_noise >= 0.0 && teacher_noise < 0.5)) fail("teacher_noise must lie in [0,0.5)");
  if (!(route_flip_rate >= 0.0 && route_flip_rate < 1.0)) fail("route_flip_rate must lie in [0,1)");
  if (routes < 1) fail("routes must be >= 1");
  if (!(missing_share >= 0.0 && missing_share <= 1.0)) fail("missing_share must lie in [0,1]");
  if (!(attribute_rate >= 0.0 && attribute_rate <= 1.0)) fail("attribute_rate must lie in [0,1]");
  if (intents_per_item < 1) fail("intents_per_item must be >= 1");
  for (double w : split) {
    if (!(w >= 0.0)) fail("split weights must be non-negative");
  }
  if (split[0] + split[1] + split[2] <= 0.0) fail("split weights must not all be zero");
}

// ---------------------------------------------------------------------------
// Catalog

std::vector<Token> render_title(const std::vector<TitleSlot>& layout,
                                const std::map<Aspect, std::string>& attributes) {
  std::vector<Token> title;
  for (const auto& slot : layout) {
    if (!slot.aspect) {
      title.emplace_back(slot.filler);
      continue;
    }
    auto it = attributes.find(*slot.aspect);
    if (it == attributes.end()) continue;
    for (auto& t : whitespace_tokenize(it->second)) title.push_back(std::move(t));
  }
  return title;
}

std::vector<CatalogItem> generate_catalog(const GenConfig& cfg, const Vocabulary& vocab) {
  cfg.validate();
  std::vector<CatalogItem> catalog;
  catalog.reserve(cfg.n_items);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    std::mt19937_64 rng(mix_seed(cfg.seed, kCatalogStream, i));
    CatalogItem item;
    item.item_id = "item-" + std::to_string(i);
    for (Aspect a : kAllAspects) {
      const bool required = a == Aspect::category || a == Aspect::product;
      if (!required && uniform01(rng) >= cfg.attribute_rate) continue;
      const auto& values = vocab.values(a);
      item.attributes[a] = values[uniform_index(rng, values.size())];
    }
    for (const auto& [aspect, value] : item.attributes) item.layout.push_back({aspect, {}});
    const std::size_t n_filler = uniform_index(rng, cfg.max_filler + 1);
    for (std::size_t f = 0; f < n_filler; ++f) {
      item.layout.push_back({std::nullopt, vocab.filler()[uniform_index(rng, vocab.filler().size())]});
    }
    // Fisher-Yates with our own index sampler keeps the layout platform-stable.
    for (std::size_t k = item.layout.size(); k > 1; --k) {
      std::swap(item.layout[k - 1], item.layout[uniform_index(rng, k)]);
    }
    item.title = render_title(item.layout, item.attributes);
    catalog.push_back(std::move(item));
  }
  return catalog;
}

// ---------------------------------------------------------------------------
// Pairs

namespace {

struct QueryIntent {
  std::vector<Aspect> aspects;  // in query order
};

QueryIntent make_intent(const CatalogItem& item, const GenConfig& cfg, std::size_t item_index,
                        std::size_t intent) {
  std::mt19937_64 rng(mix_seed(cfg.seed, kIntentStream, item_index * 1024 + intent));
  std::vector<Aspect> available;
  for (const auto& [aspect, value] : item.attributes) available.push_back(aspect);
  const std::size_t lo = std::min(cfg.min_aspects_per_query, available.size());
  const std::size_t hi = std::min(cfg.max_aspects_per_query, available.size());
  const std::size_t k = lo + uniform_index(rng, hi - lo + 1);
  for (std::size_t i = available.size(); i > 1; --i) std::swap(available[i - 1], available[uniform_index(rng, i)]);
  available.resize(k);
  return {available};
}

std::vector<double> zipf_cdf(std::size_t n, double exponent) {
  std::vector<double> cdf(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    total += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
    cdf[r] = total;
  }
  for (auto& c : cdf) c /= total;
  return cdf;
}

}  // namespace

std::vector<GeneratedPair> generate_pairs(const std::vector<CatalogItem>& catalog, const GenConfig& cfg,
                                          const Vocabulary& vocab, std::optional<std::size_t> count) {
  cfg.validate();
  if (catalog.empty()) throw std::invalid_argument("generate_pairs: catalog is empty");
  const std::size_t n = count.value_or(cfg.n_pairs);
  const std::vector<double> cdf = zipf_cdf(catalog.size(), cfg.zipf_exponent);

  // Intents are fixed per item so that popular items repeat query strings.
  std::vector<std::vector<QueryIntent>> intents(catalog.size());
  auto intent_for = [&](std::size_t item_index, std::size_t j) -> const QueryIntent& {
    auto& cache = intents[item_index];
    if (cache.empty()) {
      for (std::size_t k = 0; k < cfg.intents_per_item; ++k) {
        cache.push_back(make_intent(catalog[item_index], cfg, item_index, k));
      }
    }
    return cache[j];
  };

  std::vector<GeneratedPair> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::mt19937_64 rng(mix_seed(cfg.seed, kPairStream, k));
    const double u = uniform01(rng);
    const std::size_t item_index = std::min<std::size_t>(
        static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin()), catalog.size() - 1);
    const CatalogItem& item = catalog[item_index];
    const QueryIntent& intent = intent_for(item_index, uniform_index(rng, cfg.intents_per_item));

    std::map<Aspect, std::string> shown = item.attributes;
    std::optional<Aspect> failing;
    bool dropped = false;
    if (uniform01(rng) < cfg.mismatch_rate) {
      failing = intent.aspects[uniform_index(rng, intent.aspects.size())];
      const bool droppable = *failing != Aspect::category && *failing != Aspect::product;
      if (droppable && uniform01(rng) < cfg.missing_share) {
        shown.erase(*failing);
        dropped = true;
      } else {
        const auto& values = vocab.values(*failing);
        std::size_t pick = uniform_index(rng, values.size() - 1);
        if (values[pick] == item.attributes.at(*failing)) pick = values.size() - 1;
        shown[*failing] = values[pick];
      }
    }

    GeneratedPair gp;
    std::string query_text;
    for (Aspect a : intent.aspects) {
      const std::string& phrase = item.attributes.at(a);
      if (!query_text.empty()) query_text += ' ';
      query_text += phrase;
      gp.cot.requirements.push_back({a, phrase});
      if (failing && *failing == a) {
        if (dropped) {
          gp.cot.matches.push_back({a, phrase, std::nullopt, Verdict::missing});
        } else {
          gp.cot.matches.push_back({a, phrase, shown.at(a), Verdict::mismatch});
        }
      } else {
        gp.cot.matches.push_back({a, phrase, phrase, Verdict::match});
      }
    }
    gp.cot.judgment = conclude(gp.cot.requirements, gp.cot.matches);
    gp.label = gp.cot.judgment;
    gp.pair.pair_id = "p" + std::to_string(cfg.seed) + "-" + std::to_string(k);
    gp.pair.query = whitespace_tokenize(query_text);
    gp.pair.title = render_title(item.layout, shown);
    out.push_back(std::move(gp));
  }

  std::unordered_map<std::string, std::uint64_t> freq;
  for (const auto& gp : out) ++freq[join_tokens(gp.pair.query)];
  for (auto& gp : out) gp.query_frequency = freq[join_tokens(gp.pair.query)];
  return out;
}

// ---------------------------------------------------------------------------
// Oracle teacher

TeacherOutput oracle_predict(const QueryItemPair& pair, const RelevanceLabel& gold, const CotAnnotation& gold_cot,
                             double noise, std::uint64_t noise_seed) {
  if (!(noise >= 0.0 && noise < 0.5)) throw std::invalid_argument("oracle_predict: noise must lie in [0,0.5)");
  (void)pair;
  std::mt19937_64 rng(mix_seed(noise_seed, kNoiseStream, 0));
  const double delta = (uniform01(rng) - 0.5) * noise;
  // p_good = p_bad exactly at kJudgmentMass / (1 + kJudgmentMass); stay strictly on the gold side.
  const double boundary = kJudgmentMass / (1.0 + kJudgmentMass);
  constexpr double kMargin = 1e-6;
  double p_good;
  if (gold.is_good()) {
    p_good = std::clamp(1.0 - noise - delta, boundary + kMargin, 1.0);
  } else {
    p_good = std::clamp(noise + delta, 0.0, boundary - kMargin);
  }
  TeacherOutput out;
  out.p_good = p_good;
  out.p_bad = (1.0 - p_good) * kJudgmentMass;
  out.judgment = out.p_good > out.p_bad ? RelevanceLabel::good() : RelevanceLabel::bad(gold.reason);
  out.cot = gold_cot;
  return out;
}

std::vector<RuleAnnotator::Segment> RuleAnnotator::segment(const std::vector<Token>& tokens) const {
  std::vector<Segment> out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    bool found = false;
    for (std::size_t len = std::min(vocab_->max_phrase_tokens(), tokens.size() - i); len >= 1; --len) {
      std::string phrase;
      for (std::size_t j = i; j < i + len; ++j) {
        if (j > i) phrase.push_back(' ');
        phrase += tokens[j].text();
      }
      if (auto aspect = vocab_->aspect_of(phrase)) {
        out.push_back({*aspect, std::move(phrase)});
        i += len;
        found = true;
        break;
      }
    }
    if (!found) ++i;
  }
  return out;
}

std::optional<CotAnnotation> RuleAnnotator::annotate(const QueryItemPair& pair) const {
  const std::vector<Segment> query = segment(pair.query);
  const std::vector<Segment> title = segment(pair.title);
  CotAnnotation cot;
  for (const auto& seg : query) {
    const bool seen = std::any_of(cot.requirements.begin(), cot.requirements.end(),
                                  [&](const Requirement& r) { return r.aspect == seg.aspect; });
    if (!seen) cot.requirements.push_back({seg.aspect, seg.phrase});
  }
  if (cot.requirements.empty()) return std::nullopt;
  for (const auto& req : cot.requirements) {
    auto same = std::find_if(title.begin(), title.end(), [&](const Segment& s) { return s.phrase == req.phrase; });
    if (same != title.end()) {
      cot.matches.push_back({req.aspect, req.phrase, req.phrase, Verdict::match});
      continue;
    }
    auto other = std::find_if(title.begin(), title.end(), [&](const Segment& s) { return s.aspect == req.aspect; });
    if (other != title.end()) {
      cot.matches.push_back({req.aspect, req.phrase, other->phrase, Verdict::mismatch});
    } else {
      cot.matches.push_back({req.aspect, req.phrase, std::nullopt, Verdict::missing});
    }
  }
  cot.judgment = conclude(cot.requirements, cot.matches);
  return cot;
}

// ---------------------------------------------------------------------------
// Routes and self-consistency

std::vector<std::string> sample_cot_routes(const QueryItemPair& pair, const CotAnnotation& gold_cot,
                                           std::size_t k, double flip_rate, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("sample_cot_routes: k must be >= 1");
  std::mt19937_64 rng(mix_seed(seed, kRouteStream, hash_string(pair.pair_id)));
  std::vector<std::size_t> togglable;
  for (std::size_t i = 0; i < gold_cot.matches.size(); ++i) {
    if (gold_cot.matches[i].verdict != Verdict::missing) togglable.push_back(i);
  }
  const std::string clean = serialize_cot(gold_cot);
  std::vector<std::string> routes;
  routes.reserve(k);
  for (std::size_t r = 0; r < k; ++r) {
    if (uniform01(rng) >= flip_rate || togglable.empty()) {
      routes.push_back(clean);
      continue;
    }
    CotAnnotation corrupted = gold_cot;
    AspectMatch& m = corrupted.matches[togglable[uniform_index(rng, togglable.size())]];
    m.verdict = m.verdict == Verdict::match ? Verdict::mismatch : Verdict::match;
    corrupted.judgment = conclude(corrupted.requirements, corrupted.matches);
    routes.push_back(serialize_cot(corrupted));
  }
  return routes;
}

std::vector<std::string> NoisyOracleRoutes::sample(const QueryItemPair& pair, const CotAnnotation& reference,
                                                   std::size_t k) {
  return sample_cot_routes(pair, reference, k, flip_rate_, seed_);
}

Selection self_consistency_select(const std::vector<std::string>& routes, const RelevanceLabel& target) {
  if (routes.empty()) throw std::invalid_argument("self_consistency_select: no routes");
  Selection sel;
  for (std::size_t i = 0; i < routes.size(); ++i) {
    CotAnnotation cot;
    try {
      cot = parse_cot(routes[i]);
    } catch (const MalformedCot&) {
      ++sel.malformed;
      continue;
    } catch (const UnknownAspect&) {
      ++sel.malformed;
      continue;
    }
    if (!sel.cot && cot.judgment.value == target.value) {
      sel.cot = std::move(cot);
      sel.index = i;
    }
  }
  return sel;
}

}  // namespace mkd
