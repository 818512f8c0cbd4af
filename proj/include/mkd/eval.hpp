#pragma once

// Ranking metrics, head/long-tail splitting, tagging quality and the
// ablation harness.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkd/distill.hpp"
#include "mkd/domain.hpp"
#include "mkd/encoders.hpp"
#include "mkd/tags.hpp"

namespace mkd {

class SingleClass : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScoredSet {
  std::vector<double> scores;
  std::vector<RelevanceLabel> labels;
  std::vector<std::uint64_t> query_frequency;

  std::size_t size() const { return scores.size(); }
  void push_back(double score, RelevanceLabel label, std::uint64_t frequency);
  std::size_t count_good() const;
  std::size_t count_bad() const { return size() - count_good(); }
  /// Throws std::invalid_argument unless the three sequences have equal length.
  void check() const;
};

/// Probability that a random Good outranks a random Bad; ties count 0.5.
/// Throws SingleClass when either class is absent.
double roc_auc(const ScoredSet& set);

/// Step-wise average precision of the Bad class ranked by descending
/// badness (1 - score). Tied scores form one threshold. Throws SingleClass
/// without any Bad record.
double neg_pr_auc(const ScoredSet& set);

struct HeadTailSplit {
  ScoredSet head;
  ScoredSet tail;
};

inline constexpr std::uint64_t kDefaultHeadThreshold = 10;

/// head: query_frequency > threshold; tail: the rest.
HeadTailSplit head_tail_split(const ScoredSet& set, std::uint64_t threshold = kDefaultHeadThreshold);

struct LabelScores {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t false_negative = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct TaggingReport {
  std::array<LabelScores, kNumTags> per_label;
  std::size_t gold_spans = 0;
  std::size_t exact_spans = 0;
  /// Share of gold spans reproduced exactly (same type and boundaries); 1
  /// when there are no gold spans.
  double span_exact_match = 1.0;

  /// Adds another sequence's counts and refreshes the derived rates.
  void merge(const TaggingReport& other);
  void finalize();
};

struct TagSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool relevant = true;

  bool operator==(const TagSpan&) const = default;
};

/// Spans per BIO semantics; an I-* continuing a different type starts a new span.
std::vector<TagSpan> extract_spans(const TagSequence& tags);

/// Throws LengthMismatch when the sequences differ in length.
TaggingReport tagging_report(const TagSequence& predicted, const TagSequence& gold);

struct SplitMetrics {
  std::size_t count = 0;
  std::optional<double> roc_auc;
  std::optional<double> neg_pr_auc;
};

struct EvalReport {
  SplitMetrics overall;
  SplitMetrics head;
  SplitMetrics tail;
  std::optional<TaggingReport> tagging;
};

/// Metrics on a split; absent when the split lacks the needed classes.
SplitMetrics split_metrics(const ScoredSet& set);

ScoredSet score_records(const StudentModel& model, const std::vector<TrainRecord>& records);

/// Overall/head/tail metrics; overall throws SingleClass when a class is
/// missing. Interaction models add a tagging report over records with tags.
EvalReport evaluate(const StudentModel& model, const std::vector<TrainRecord>& records,
                    std::uint64_t threshold = kDefaultHeadThreshold, Tagger tagger = Tagger::crf);

// --- ablation --------------------------------------------------------------

struct AblationVariant {
  std::string name;
  LossWeights weights;
  bool pseudo_hard_labels = false;
  bool use_pseudo_data = true;
};

/// full, w/o score (lambda1 = 0), w/o CoT (lambda2 = 0), w/o score & CoT
/// (lambda1 = lambda2 = 0), w/o pseudo data.
std::vector<AblationVariant> standard_variants(Arch arch);

struct AblationData {
  std::vector<TrainRecord> labeled;
  std::vector<TrainRecord> pseudo;
  std::vector<TrainRecord> validation;
  std::vector<TrainRecord> test;
};

struct AblationSettings {
  EncoderConfig encoder;
  TrainOptions train;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::uint64_t threshold = kDefaultHeadThreshold;
};

struct RunMetrics {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t train_records = 0;
  double roc_auc = 0.0;
  double neg_pr_auc = 0.0;
  double head_roc_auc = 0.0;
  double tail_roc_auc = 0.0;
  double head_neg_pr_auc = 0.0;
  double tail_neg_pr_auc = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Sample standard deviation (n - 1); 0 for a single value.
MeanStd mean_std(const std::vector<double>& values);

struct AblationRow {
  std::string variant;
  MeanStd roc_auc;
  MeanStd neg_pr_auc;
  MeanStd head_roc_auc;
  MeanStd tail_roc_auc;
  /// Mean difference to the first (full) variant.
  double delta_roc_auc = 0.0;
  double delta_neg_pr_auc = 0.0;
};

struct AblationResult {
  Arch arch = Arch::interaction;
  std::vector<RunMetrics> runs;
  std::vector<AblationRow> rows;

  const RunMetrics& run(const std::string& variant, std::uint64_t seed) const;
};

using RunCallback = std::function<void(const RunMetrics&)>;

/// One student per (variant, seed); rows report deltas against variants[0].
AblationResult run_ablation(const std::vector<AblationVariant>& variants, const AblationData& data,
                            const AblationSettings& settings, const RunCallback& on_run = {});

void print_ablation_table(std::ostream& out, const AblationResult& result);
/// One JSON object per run and per summary row.
void write_ablation_jsonl(std::ostream& out, const AblationResult& result);

}  // namespace mkd
