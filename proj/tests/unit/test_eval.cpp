#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "mkd/eval.hpp"
#include "mkd/synth.hpp"
#include "oracles.hpp"

namespace mkd {
namespace {

const RelevanceLabel G = RelevanceLabel::good();
const RelevanceLabel B = RelevanceLabel::bad(Aspect::color);

ScoredSet make_set(std::vector<double> scores, std::vector<RelevanceLabel> labels,
                   std::vector<std::uint64_t> freq = {}) {
  ScoredSet s;
  for (std::size_t i = 0; i < scores.size(); ++i) s.push_back(scores[i], labels[i], freq.empty() ? 0 : freq[i]);
  return s;
}

TEST(RocAuc, HandExamples) {
  EXPECT_EQ(roc_auc(make_set({0.9, 0.8, 0.3}, {G, B, B})), 1.0);
  EXPECT_EQ(roc_auc(make_set({0.1, 0.9}, {G, B})), 0.0);
  EXPECT_EQ(roc_auc(make_set({0.9, 0.5, 0.5, 0.2}, {G, G, B, B})), 0.875);
  EXPECT_EQ(roc_auc(make_set({0.4, 0.4}, {G, B})), 0.5);
}

TEST(RocAuc, RequiresBothClasses) {
  EXPECT_THROW(roc_auc(make_set({0.1, 0.2}, {G, G})), SingleClass);
  EXPECT_THROW(roc_auc(make_set({0.1, 0.2}, {B, B})), SingleClass);
  EXPECT_THROW(roc_auc(ScoredSet{}), SingleClass);
  ScoredSet ragged = make_set({0.1, 0.2}, {G, B});
  ragged.query_frequency.pop_back();
  EXPECT_THROW(ragged.check(), std::invalid_argument);
}

TEST(RocAuc, MatchesPairwiseCount) {
  std::mt19937_64 rng(31);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + uniform_index(rng, 199);
    const ScoredSet set = oracle::random_scored_set(rng, n, 1 + uniform_index(rng, 40));
    EXPECT_NEAR(roc_auc(set), oracle::pairwise_auc(set), 1e-9) << "set " << i;
  }
}

TEST(RocAuc, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(6);
  const ScoredSet set = oracle::random_scored_set(rng, 150, 25);
  ScoredSet mapped = set;
  for (double& s : mapped.scores) s = std::exp(3.0 * s) - 7.0;
  EXPECT_EQ(roc_auc(mapped), roc_auc(set));
}

TEST(NegPrAuc, HandExamples) {
  EXPECT_EQ(neg_pr_auc(make_set({0.1, 0.2, 0.8, 0.9}, {B, B, G, G})), 1.0);
  EXPECT_EQ(neg_pr_auc(make_set({0.1, 0.9, 0.2}, {B, G, B})), 1.0);
  for (std::size_t n : {2, 5, 9}) {
    std::vector<double> scores;
    std::vector<RelevanceLabel> labels;
    for (std::size_t i = 0; i < n; ++i) {
      scores.push_back(0.1 * static_cast<double>(i));
      labels.push_back(i + 1 == n ? B : G);
    }
    EXPECT_NEAR(neg_pr_auc(make_set(scores, labels)), 1.0 / static_cast<double>(n), 1e-15);
  }
  EXPECT_THROW(neg_pr_auc(make_set({0.1}, {G})), SingleClass);
}

TEST(NegPrAuc, MatchesStepwiseOracle) {
  std::mt19937_64 rng(32);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + uniform_index(rng, 199);
    const ScoredSet set = oracle::random_scored_set(rng, n, 1 + uniform_index(rng, 40));
    EXPECT_NEAR(neg_pr_auc(set), oracle::stepwise_ap(set), 1e-9) << "set " << i;
  }
}

TEST(HeadTail, StrictThresholdPartition) {
  const auto split = head_tail_split(make_set({0.1, 0.2}, {G, B}, {11, 10}));
  EXPECT_EQ(split.head.size(), 1u);
  EXPECT_EQ(split.tail.size(), 1u);
  EXPECT_EQ(split.head.query_frequency[0], 11u);
  EXPECT_EQ(head_tail_split(make_set({0.1, 0.2}, {G, B})).head.size(), 0u);

  std::mt19937_64 rng(3);
  const ScoredSet set = oracle::random_scored_set(rng, 180, 50);
  const auto parts = head_tail_split(set, 7);
  EXPECT_EQ(parts.head.size() + parts.tail.size(), set.size());
  for (auto f : parts.head.query_frequency) EXPECT_GT(f, 7u);
  for (auto f : parts.tail.query_frequency) EXPECT_LE(f, 7u);
}

TEST(HeadTail, SplitMetricsSkipMissingClasses) {
  const auto m = split_metrics(make_set({0.1, 0.2}, {B, B}));
  EXPECT_EQ(m.count, 2u);
  EXPECT_FALSE(m.roc_auc);
  EXPECT_TRUE(m.neg_pr_auc);
  EXPECT_FALSE(split_metrics(make_set({0.3}, {G})).neg_pr_auc);
}

TagSequence tags(std::initializer_list<Tag> t) { return TagSequence{t}; }

TEST(Tagging, SpansFollowBio) {
  using enum Tag;
  EXPECT_EQ(extract_spans(tags({b_rele, i_rele, o, b_irrele})),
            (std::vector<TagSpan>{{0, 2, true}, {3, 4, false}}));
  EXPECT_EQ(extract_spans(tags({b_rele, i_irrele})), (std::vector<TagSpan>{{0, 1, true}, {1, 2, false}}));
  EXPECT_TRUE(extract_spans(tags({o, o})).empty());
}

TEST(Tagging, Reports) {
  using enum Tag;
  const TagSequence gold = tags({b_rele, i_rele, o, b_irrele, o});
  const TaggingReport same = tagging_report(gold, gold);
  for (Tag t : {b_rele, i_rele, b_irrele, o}) EXPECT_EQ(same.per_label[static_cast<std::size_t>(t)].f1, 1.0);
  EXPECT_EQ(same.span_exact_match, 1.0);

  const TaggingReport all_o = tagging_report(tags({o, o, o, o, o}), gold);
  EXPECT_EQ(all_o.per_label[static_cast<std::size_t>(b_rele)].recall, 0.0);
  EXPECT_EQ(all_o.per_label[static_cast<std::size_t>(b_irrele)].recall, 0.0);
  EXPECT_EQ(all_o.span_exact_match, 0.0);

  // The relevant span loses its second token.
  const TaggingReport shifted = tagging_report(tags({b_rele, o, o, b_irrele, o}), gold);
  EXPECT_GT(shifted.per_label[static_cast<std::size_t>(b_rele)].f1, 0.0);
  EXPECT_EQ(shifted.gold_spans, 2u);
  EXPECT_EQ(shifted.exact_spans, 1u);
  EXPECT_EQ(shifted.span_exact_match, 0.5);

  TaggingReport merged = shifted;
  merged.merge(same);
  EXPECT_EQ(merged.gold_spans, 4u);
  EXPECT_EQ(merged.span_exact_match, 0.75);

  EXPECT_THROW(tagging_report(tags({o}), gold), LengthMismatch);
}

TEST(MeanStd, SampleDeviation) {
  const auto m = mean_std({1.0, 2.0, 4.0});
  EXPECT_DOUBLE_EQ(m.mean, 7.0 / 3.0);
  const double mu = 7.0 / 3.0;
  EXPECT_NEAR(m.stddev, std::sqrt(((1 - mu) * (1 - mu) + (2 - mu) * (2 - mu) + (4 - mu) * (4 - mu)) / 2.0), 1e-15);
  EXPECT_EQ(mean_std({0.3}).stddev, 0.0);
}

// --- model evaluation ------------------------------------------------------

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::load(std::string(MKD_DATA_DIR) + "/vocab");
  return v;
}

std::vector<TrainRecord> balanced_records(std::size_t n) {
  GenConfig cfg;
  cfg.n_items = 60;
  cfg.mismatch_rate = 0.5;
  const auto catalog = generate_catalog(cfg, vocab());
  std::vector<TrainRecord> out;
  for (const auto& p : generate_pairs(catalog, cfg, vocab(), n)) {
    TrainRecord r;
    r.pair = p.pair;
    r.gold = p.label;
    r.query_frequency = p.query_frequency;
    out.push_back(r);
  }
  return out;
}

StudentModel model_for(Arch arch, const std::vector<TrainRecord>& records, std::uint64_t seed) {
  std::vector<const QueryItemPair*> pairs;
  for (const auto& r : records) pairs.push_back(&r.pair);
  EncoderConfig cfg;
  cfg.arch = arch;
  cfg.init_seed = seed;
  return StudentModel(cfg, StudentVocab::build(pairs));
}

TEST(Evaluate, UntrainedInteractionModelIsNearChance) {
  const auto records = balanced_records(400);
  for (std::uint64_t seed : {1, 2, 3}) {
    const EvalReport r = evaluate(model_for(Arch::interaction, records, seed), records);
    ASSERT_TRUE(r.overall.roc_auc);
    EXPECT_GE(*r.overall.roc_auc, 0.4) << "seed " << seed;
    EXPECT_LE(*r.overall.roc_auc, 0.6) << "seed " << seed;
    EXPECT_EQ(r.head.count + r.tail.count, r.overall.count);
  }
}

// Cosine max-pooling over shared towers already rewards token overlap before
// any training, so the untrained dual tower ranks above chance.
TEST(Evaluate, UntrainedRepresentationModelMatchesLexically) {
  const auto records = balanced_records(400);
  for (std::uint64_t seed : {1, 2, 3}) {
    const EvalReport r = evaluate(model_for(Arch::representation, records, seed), records);
    EXPECT_GT(*r.overall.roc_auc, 0.6) << "seed " << seed;
    EXPECT_EQ(r.head.count + r.tail.count, r.overall.count);
  }
}

TEST(Evaluate, TaggingOnlyForInteraction) {
  auto records = balanced_records(30);
  for (auto& r : records) {
    r.query_tags = TagSequence{std::vector<Tag>(r.pair.query.size(), Tag::o)};
    r.title_tags = TagSequence{std::vector<Tag>(r.pair.title.size(), Tag::o)};
  }
  EXPECT_TRUE(evaluate(model_for(Arch::interaction, records, 1), records).tagging);
  EXPECT_FALSE(evaluate(model_for(Arch::representation, records, 1), records).tagging);
}

TEST(Evaluate, SingleClassSetIsRejected) {
  auto records = balanced_records(40);
  std::erase_if(records, [](const TrainRecord& r) { return !r.gold->is_good(); });
  EXPECT_THROW(evaluate(model_for(Arch::interaction, records, 1), records), SingleClass);
}

// --- ablation ----------------------------------------------------------------

AblationSettings tiny_settings(Arch arch, std::vector<std::uint64_t> seeds) {
  AblationSettings s;
  s.encoder.arch = arch;
  s.encoder.d_model = 8;
  s.encoder.d_ff = 16;
  s.encoder.n_layers = 1;
  s.train.epochs = 1;
  s.seeds = std::move(seeds);
  return s;
}

AblationData tiny_data() {
  AblationData d;
  const auto records = balanced_records(160);
  d.labeled.assign(records.begin(), records.begin() + 60);
  d.pseudo.assign(records.begin() + 60, records.begin() + 100);
  for (auto& r : d.pseudo) {
    r.teacher_score = r.gold->is_good() ? 0.7 : 0.3;
    r.gold.reset();
  }
  d.validation.assign(records.begin() + 100, records.begin() + 120);
  d.test.assign(records.begin() + 120, records.end());
  return d;
}

TEST(Ablation, StandardGrid) {
  const auto v = standard_variants(Arch::interaction);
  ASSERT_EQ(v.size(), 5u);
  EXPECT_EQ(v[0].weights, LossWeights::defaults(Arch::interaction));
  EXPECT_EQ(v[1].weights.score, 0.0);
  EXPECT_TRUE(v[1].pseudo_hard_labels);
  EXPECT_EQ(v[2].weights.cot, 0.0);
  EXPECT_EQ(v[3].weights.score + v[3].weights.cot, 0.0);
  EXPECT_FALSE(v[4].use_pseudo_data);
  EXPECT_EQ(standard_variants(Arch::representation)[0].weights.cot, 0.01);
}

TEST(Ablation, SingleVariantHasZeroDelta) {
  const auto data = tiny_data();
  const auto result = run_ablation({standard_variants(Arch::representation)[0]}, data,
                                   tiny_settings(Arch::representation, {4}));
  ASSERT_EQ(result.rows.size(), 1u);
  EXPECT_EQ(result.rows[0].delta_roc_auc, 0.0);
  EXPECT_EQ(result.rows[0].roc_auc.stddev, 0.0);
  EXPECT_EQ(result.runs[0].train_records, data.labeled.size() + data.pseudo.size());
}

TEST(Ablation, RowsSummariseRuns) {
  const auto data = tiny_data();
  auto variants = standard_variants(Arch::interaction);
  variants = {variants[0], variants[3], variants[4]};
  std::size_t callbacks = 0;
  const auto result = run_ablation(variants, data, tiny_settings(Arch::interaction, {1, 2}),
                                   [&](const RunMetrics&) { ++callbacks; });
  EXPECT_EQ(callbacks, 6u);
  ASSERT_EQ(result.rows.size(), 3u);
  EXPECT_EQ(result.run("w/o pseudo data", 1).train_records, data.labeled.size());
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto& a = result.run(variants[i].name, 1);
    const auto& b = result.run(variants[i].name, 2);
    const auto ms = mean_std({a.roc_auc, b.roc_auc});
    EXPECT_EQ(result.rows[i].roc_auc.mean, ms.mean);
    EXPECT_EQ(result.rows[i].roc_auc.stddev, ms.stddev);
    EXPECT_NEAR(result.rows[i].delta_roc_auc, ms.mean - result.rows[0].roc_auc.mean, 1e-15);
  }

  std::ostringstream table, jsonl;
  print_ablation_table(table, result);
  write_ablation_jsonl(jsonl, result);
  EXPECT_NE(table.str().find("w/o pseudo data"), std::string::npos);
  std::istringstream lines(jsonl.str());
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) EXPECT_NO_THROW((void)nlohmann::json::parse(line));
  EXPECT_EQ(n, 6u + 3u);

  // Identical settings reproduce every metric exactly.
  const auto again = run_ablation(variants, data, tiny_settings(Arch::interaction, {1, 2}));
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    EXPECT_EQ(again.runs[i].roc_auc, result.runs[i].roc_auc);
    EXPECT_EQ(again.runs[i].tail_roc_auc, result.runs[i].tail_roc_auc);
  }
}

TEST(Ablation, RejectsEmptyGrid) {
  EXPECT_THROW(run_ablation({}, tiny_data(), tiny_settings(Arch::interaction, {1})), std::invalid_argument);
  EXPECT_THROW(run_ablation(standard_variants(Arch::interaction), tiny_data(), tiny_settings(Arch::interaction, {})),
               std::invalid_argument);
}

}  // namespace
}  // namespace mkd
