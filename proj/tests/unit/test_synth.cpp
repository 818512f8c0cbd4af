#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mkd/cotlang.hpp"
#include "mkd/synth.hpp"

namespace mkd {
namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::load(std::string(MKD_DATA_DIR) + "/vocab");
  return v;
}

GenConfig small_config() {
  GenConfig cfg;
  cfg.n_items = 50;
  cfg.n_pairs = 400;
  return cfg;
}

bool contains_phrase(const std::vector<Token>& tokens, const std::string& phrase) {
  return locate_span(phrase, tokens).has_value();
}

TEST(Seeding, UniformHelpersStayInRange) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = uniform01(rng);
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(uniform_index(rng, 7), 7u);
  }
  EXPECT_NE(mix_seed(1, 2, 3), mix_seed(1, 2, 4));
  EXPECT_NE(mix_seed(1, 2, 3), mix_seed(1, 3, 3));
  // FNV-1a reference value for "a".
  EXPECT_EQ(hash_string("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Vocabulary, EveryAspectHasValuesAndPhrasesAreUnique) {
  std::set<std::string> seen;
  for (Aspect a : kAllAspects) {
    ASSERT_FALSE(vocab().values(a).empty()) << aspect_id(a);
    for (const auto& v : vocab().values(a)) {
      EXPECT_TRUE(seen.insert(v).second) << v;
      EXPECT_EQ(vocab().aspect_of(v), a);
    }
  }
  EXPECT_FALSE(vocab().filler().empty());
}

TEST(GenConfig, RejectsOutOfRangeFields) {
  GenConfig cfg;
  cfg.teacher_noise = 0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = GenConfig{};
  cfg.min_aspects_per_query = 3;
  cfg.max_aspects_per_query = 2;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = GenConfig{};
  cfg.route_flip_rate = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Catalog, SingleItemHasCategory) {
  GenConfig cfg;
  cfg.seed = 7;
  cfg.n_items = 1;
  const auto catalog = generate_catalog(cfg, vocab());
  ASSERT_EQ(catalog.size(), 1u);
  EXPECT_TRUE(catalog[0].attributes.contains(Aspect::category));
  EXPECT_TRUE(catalog[0].attributes.contains(Aspect::product));
}

TEST(Catalog, DeterministicUnderSeed) {
  const auto a = generate_catalog(small_config(), vocab());
  const auto b = generate_catalog(small_config(), vocab());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].title, b[i].title);
    EXPECT_EQ(a[i].attributes, b[i].attributes);
  }
}

TEST(Catalog, TitlesContainTheirOwnAttributes) {
  GenConfig cfg;
  cfg.n_items = 1000;
  for (const auto& item : generate_catalog(cfg, vocab()))
    for (const auto& [aspect, value] : item.attributes)
      ASSERT_TRUE(contains_phrase(item.title, value)) << item.item_id << " " << value;
}

TEST(Pairs, DeterministicAndIdsFollowSeed) {
  const auto cfg = small_config();
  const auto catalog = generate_catalog(cfg, vocab());
  const auto a = generate_pairs(catalog, cfg, vocab());
  const auto b = generate_pairs(catalog, cfg, vocab());
  ASSERT_EQ(a.size(), cfg.n_pairs);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].pair, b[i].pair);
    EXPECT_EQ(a[i].cot, b[i].cot);
  }
  EXPECT_EQ(a[3].pair.pair_id, "p7-3");
}

TEST(Pairs, ZeroMismatchRateGivesOnlyGood) {
  auto cfg = small_config();
  cfg.mismatch_rate = 0.0;
  const auto catalog = generate_catalog(cfg, vocab());
  for (const auto& gp : generate_pairs(catalog, cfg, vocab())) EXPECT_TRUE(gp.label.is_good());
}

TEST(Pairs, FullMismatchRateGivesOneMismatchEach) {
  auto cfg = small_config();
  cfg.mismatch_rate = 1.0;
  const auto catalog = generate_catalog(cfg, vocab());
  for (const auto& gp : generate_pairs(catalog, cfg, vocab())) {
    EXPECT_FALSE(gp.label.is_good());
    std::size_t mismatches = 0;
    for (const auto& m : gp.cot.matches) mismatches += m.verdict == Verdict::mismatch;
    EXPECT_EQ(mismatches, 1u);
  }
}

TEST(Pairs, BadFractionWithinThreeSigma) {
  GenConfig cfg;
  cfg.n_pairs = 10000;
  const auto catalog = generate_catalog(cfg, vocab());
  std::size_t bad = 0;
  for (const auto& gp : generate_pairs(catalog, cfg, vocab())) bad += !gp.label.is_good();
  const double sigma = std::sqrt(0.3 * 0.7 / 10000.0);
  EXPECT_NEAR(static_cast<double>(bad) / 10000.0, 0.3, 3.0 * sigma);
}

TEST(Pairs, RecordsAreValidAndGrounded) {
  auto cfg = small_config();
  cfg.missing_share = 0.5;
  const auto catalog = generate_catalog(cfg, vocab());
  for (const auto& gp : generate_pairs(catalog, cfg, vocab())) {
    TrainRecord r;
    r.pair = gp.pair;
    r.gold = gp.label;
    r.cot = gp.cot;
    ASSERT_TRUE(validate_record(r).empty()) << gp.pair.pair_id;
    // Every phrase the CoT cites occurs verbatim on its side.
    const auto derived = derive_bio_tags(gp.cot, gp.pair);
    EXPECT_TRUE(derived.warnings.empty()) << gp.pair.pair_id;
  }
}

TEST(Pairs, QueryFrequencyCountsRepeats) {
  const auto cfg = small_config();
  const auto pairs = generate_pairs(generate_catalog(cfg, vocab()), cfg, vocab());
  std::map<std::string, std::uint64_t> counts;
  for (const auto& gp : pairs) ++counts[join_tokens(gp.pair.query)];
  for (const auto& gp : pairs) EXPECT_EQ(gp.query_frequency, counts[join_tokens(gp.pair.query)]);
  // The Zipf item draw must produce both head and tail queries.
  EXPECT_GT(std::count_if(pairs.begin(), pairs.end(), [](const auto& g) { return g.query_frequency > 10; }), 0);
  EXPECT_GT(std::count_if(pairs.begin(), pairs.end(), [](const auto& g) { return g.query_frequency <= 10; }), 0);
}

TEST(Oracle, NoiselessTeacherIsCertain) {
  const auto pair = make_pair("x", "red coat", "red coat");
  const TeacherOutput out = oracle_predict(pair, RelevanceLabel::good(), {}, 0.0, 1);
  EXPECT_DOUBLE_EQ(out.p_good, 1.0);
  EXPECT_DOUBLE_EQ(out.p_bad, 0.0);
  EXPECT_TRUE(out.judgment.is_good());
}

TEST(Oracle, NoisyBadStaysInBand) {
  const auto pair = make_pair("x", "red coat", "blue coat");
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const TeacherOutput out = oracle_predict(pair, RelevanceLabel::bad(Aspect::color), {}, 0.1, seed);
    EXPECT_GE(out.p_good, 0.05);
    EXPECT_LE(out.p_good, 0.15);
    EXPECT_FALSE(out.judgment.is_good());
    EXPECT_LE(out.p_good + out.p_bad, 1.0);
    EXPECT_NEAR(out.p_bad, (1.0 - out.p_good) * kJudgmentMass, 1e-15);
  }
}

TEST(Oracle, NoiselessJudgmentAlwaysEqualsGold) {
  const auto cfg = small_config();
  const auto pairs = generate_pairs(generate_catalog(cfg, vocab()), cfg, vocab());
  for (const auto& gp : pairs) {
    const auto out = oracle_predict(gp.pair, gp.label, gp.cot, 0.0, 3);
    EXPECT_EQ(out.judgment, gp.label);
  }
}

TEST(RuleAnnotator, RecoversGoldCotOnGeneratedPairs) {
  const auto cfg = small_config();
  const auto pairs = generate_pairs(generate_catalog(cfg, vocab()), cfg, vocab());
  const RuleAnnotator annotator(vocab());
  std::size_t agree = 0;
  for (const auto& gp : pairs) {
    const auto cot = annotator.annotate(gp.pair);
    ASSERT_TRUE(cot);
    agree += cot->judgment == gp.label;
  }
  // Filler words never collide with attribute values, so reading is exact.
  EXPECT_EQ(agree, pairs.size());
}

TEST(RuleAnnotator, NoKnownPhraseGivesNothing) {
  const RuleAnnotator annotator(vocab());
  EXPECT_FALSE(annotator.annotate(make_pair("n", "qqqq zzzz", "whatever")));
}

CotAnnotation good_cot() {
  CotAnnotation cot;
  cot.requirements = {{Aspect::color, "red"}, {Aspect::material, "wool"}};
  cot.matches = {{Aspect::color, "red", "red", Verdict::match}, {Aspect::material, "wool", "wool", Verdict::match}};
  cot.judgment = RelevanceLabel::good();
  return cot;
}

TEST(Routes, NoFlipsGiveIdenticalRoutes) {
  const auto pair = make_pair("r", "red wool", "red wool coat");
  const auto routes = sample_cot_routes(pair, good_cot(), 10, 0.0, 1);
  ASSERT_EQ(routes.size(), 10u);
  for (const auto& r : routes) EXPECT_EQ(r, serialize_cot(good_cot()));
}

TEST(Routes, AlwaysFlippingTurnsGoodIntoBad) {
  const auto pair = make_pair("r", "red wool", "red wool coat");
  for (const auto& r : sample_cot_routes(pair, good_cot(), 10, 0.999999, 1))
    EXPECT_FALSE(parse_cot(r).judgment.is_good());
}

TEST(Routes, CorruptedShareWithinThreeSigma) {
  const auto clean = serialize_cot(good_cot());
  std::size_t corrupted = 0, total = 0;
  for (int p = 0; p < 1000; ++p) {
    const auto pair = make_pair("r" + std::to_string(p), "red wool", "red wool coat");
    for (const auto& r : sample_cot_routes(pair, good_cot(), 10, 0.3, 9)) {
      corrupted += r != clean;
      ++total;
    }
  }
  const double sigma = std::sqrt(0.3 * 0.7 / static_cast<double>(total));
  EXPECT_NEAR(static_cast<double>(corrupted) / static_cast<double>(total), 0.3, 3.0 * sigma);
}

TEST(SelfConsistency, FirstAlignedRouteIsChosen) {
  auto bad = good_cot();
  bad.matches[1].verdict = Verdict::mismatch;
  bad.judgment = conclude(bad.requirements, bad.matches);
  const std::string g = serialize_cot(good_cot()), b = serialize_cot(bad);
  const std::vector<std::string> routes = {g, g, b, g, b, g, g, b, g, g};
  const Selection sel = self_consistency_select(routes, RelevanceLabel::bad());
  ASSERT_TRUE(sel.cot);
  EXPECT_EQ(sel.index, 2u);
  EXPECT_EQ(*sel.cot, bad);
}

TEST(SelfConsistency, NoAlignedOrAllMalformed) {
  const std::string g = serialize_cot(good_cot());
  const Selection none = self_consistency_select({g, g}, RelevanceLabel::bad());
  EXPECT_FALSE(none.cot);
  EXPECT_EQ(none.malformed, 0u);
  const Selection junk = self_consistency_select(std::vector<std::string>(10, "nonsense"), RelevanceLabel::good());
  EXPECT_FALSE(junk.cot);
  EXPECT_EQ(junk.malformed, 10u);
}

// A Good pair is dropped only when every route flips, so the drop rate is
// flip_rate^K. A high flip rate and small K make that measurable.
TEST(SelfConsistency, DropRateMatchesBinomialExpectation) {
  const double flip = 0.8;
  const std::size_t k = 3, n = 20000;
  std::size_t dropped = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const auto pair = make_pair("d" + std::to_string(p), "red wool", "red wool coat");
    dropped += !self_consistency_select(sample_cot_routes(pair, good_cot(), k, flip, 4), RelevanceLabel::good()).cot;
  }
  const double expected = std::pow(flip, static_cast<double>(k));
  const double se = std::sqrt(expected * (1.0 - expected) / static_cast<double>(n));
  EXPECT_NEAR(static_cast<double>(dropped) / static_cast<double>(n), expected, 5.0 * se);
}

}  // namespace
}  // namespace mkd
