#include "mkd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "mkd/log.hpp"

namespace mkd {

void ScoredSet::push_back(double score, RelevanceLabel label, std::uint64_t frequency) {
  scores.push_back(score);
  labels.push_back(label);
  query_frequency.push_back(frequency);
}

std::size_t ScoredSet::count_good() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](const auto& l) { return l.is_good(); }));
}

void ScoredSet::check() const {
  if (labels.size() != scores.size() || query_frequency.size() != scores.size())
    throw std::invalid_argument("scored set sequences differ in length");
}

double roc_auc(const ScoredSet& set) {
  set.check();
  const std::size_t n = set.size();
  const std::size_t n_good = set.count_good();
  const std::size_t n_bad = n - n_good;
  if (n_good == 0 || n_bad == 0) throw SingleClass("roc_auc needs both Good and Bad records");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return set.scores[a] < set.scores[b]; });
  // Mann-Whitney: sum of average ranks of the Good records.
  double good_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && set.scores[order[j]] == set.scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (set.labels[order[k]].is_good()) good_rank_sum += avg_rank;
    i = j;
  }
  const double g = static_cast<double>(n_good);
  return (good_rank_sum - g * (g + 1.0) / 2.0) / (g * static_cast<double>(n_bad));
}

double neg_pr_auc(const ScoredSet& set) {
  set.check();
  const std::size_t n = set.size();
  const std::size_t n_bad = set.count_bad();
  if (n_bad == 0) throw SingleClass("neg_pr_auc needs at least one Bad record");
  std::vector<double> badness(n);
  for (std::size_t i = 0; i < n; ++i) badness[i] = 1.0 - set.scores[i];
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return badness[a] > badness[b]; });
  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && badness[order[j]] == badness[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) tp += !set.labels[order[k]].is_good();
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_bad);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

HeadTailSplit head_tail_split(const ScoredSet& set, std::uint64_t threshold) {
  set.check();
  HeadTailSplit out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    ScoredSet& target = set.query_frequency[i] > threshold ? out.head : out.tail;
    target.push_back(set.scores[i], set.labels[i], set.query_frequency[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tagging

std::vector<TagSpan> extract_spans(const TagSequence& tags) {
  std::vector<TagSpan> spans;
  bool open = false;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const Tag t = tags.tags[i];
    if (t == Tag::o) {
      open = false;
      continue;
    }
    const bool relevant = t == Tag::b_rele || t == Tag::i_rele;
    const bool inside = t == Tag::i_rele || t == Tag::i_irrele;
    if (inside && open && spans.back().relevant == relevant) {
      spans.back().end = i + 1;
      continue;
    }
    spans.push_back({i, i + 1, relevant});
    open = true;
  }
  return spans;
}

void TaggingReport::finalize() {
  for (auto& s : per_label) {
    const double tp = static_cast<double>(s.true_positive);
    const double fp = static_cast<double>(s.false_positive);
    const double fn = static_cast<double>(s.false_negative);
    // A label that is neither predicted nor present scores perfectly.
    s.precision = tp + fp == 0.0 ? (fn == 0.0 ? 1.0 : 0.0) : tp / (tp + fp);
    s.recall = tp + fn == 0.0 ? (fp == 0.0 ? 1.0 : 0.0) : tp / (tp + fn);
    s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  }
  span_exact_match = gold_spans == 0 ? 1.0 : static_cast<double>(exact_spans) / static_cast<double>(gold_spans);
}

void TaggingReport::merge(const TaggingReport& other) {
  for (std::size_t i = 0; i < kNumTags; ++i) {
    per_label[i].true_positive += other.per_label[i].true_positive;
    per_label[i].false_positive += other.per_label[i].false_positive;
    per_label[i].false_negative += other.per_label[i].false_negative;
  }
  gold_spans += other.gold_spans;
  exact_spans += other.exact_spans;
  finalize();
}

TaggingReport tagging_report(const TagSequence& predicted, const TagSequence& gold) {
  if (predicted.size() != gold.size()) throw LengthMismatch("tagging_report", gold.size(), predicted.size());
  TaggingReport r;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted.tags[i]);
    const auto g = static_cast<std::size_t>(gold.tags[i]);
    if (p == g) {
      ++r.per_label[g].true_positive;
    } else {
      ++r.per_label[p].false_positive;
      ++r.per_label[g].false_negative;
    }
  }
  const auto gold_spans = extract_spans(gold);
  const auto pred_spans = extract_spans(predicted);
  r.gold_spans = gold_spans.size();
  for (const auto& s : gold_spans)
    if (std::find(pred_spans.begin(), pred_spans.end(), s) != pred_spans.end()) ++r.exact_spans;
  r.finalize();
  return r;
}

// ---------------------------------------------------------------------------
// Model evaluation

SplitMetrics split_metrics(const ScoredSet& set) {
  SplitMetrics m;
  m.count = set.size();
  if (set.count_bad() > 0) {
    m.neg_pr_auc = neg_pr_auc(set);
    if (set.count_good() > 0) m.roc_auc = roc_auc(set);
  }
  return m;
}

ScoredSet score_records(const StudentModel& model, const std::vector<TrainRecord>& records) {
  ScoredSet set;
  for (const auto& r : records) {
    if (!r.gold) continue;
    const double logit = predict_logit(model, r.pair);
    set.push_back(1.0 / (1.0 + std::exp(-logit)), *r.gold, r.query_frequency);
  }
  return set;
}

EvalReport evaluate(const StudentModel& model, const std::vector<TrainRecord>& records, std::uint64_t threshold,
                    Tagger tagger) {
  const ScoredSet set = score_records(model, records);
  EvalReport report;
  report.overall.count = set.size();
  report.overall.roc_auc = roc_auc(set);
  report.overall.neg_pr_auc = neg_pr_auc(set);
  const auto split = head_tail_split(set, threshold);
  report.head = split_metrics(split.head);
  report.tail = split_metrics(split.tail);

  if (model.config().arch == Arch::interaction) {
    TaggingReport total;
    bool any = false;
    const CrfParams crf = CrfParams::from_model(model);
    auto& mutable_model = const_cast<StudentModel&>(model);
    for (const auto& r : records) {
      if (!r.query_tags || !r.title_tags) continue;
      tensor::Graph g;
      auto out = interaction_forward(g, model, mutable_model.bind(g), r.pair);
      for (auto [emissions, gold] : {std::pair{out.query_emissions, &*r.query_tags},
                                     std::pair{out.title_emissions, &*r.title_tags}}) {
        const auto& e = g.value(emissions);
        const TagSequence predicted = tagger == Tagger::crf ? crf_decode(e, crf) : softmax_decode(e);
        total.merge(tagging_report(predicted, *gold));
      }
      any = true;
    }
    if (any) report.tagging = total;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationVariant> standard_variants(Arch arch) {
  const LossWeights full = LossWeights::defaults(arch);
  LossWeights no_score = full;
  no_score.score = 0.0;
  LossWeights no_cot = full;
  no_cot.cot = 0.0;
  LossWeights hard_only = full;
  hard_only.score = 0.0;
  hard_only.cot = 0.0;
  return {
      {"full", full, false, true},
      {"w/o score", no_score, true, true},
      {"w/o cot", no_cot, false, true},
      {"w/o score&cot", hard_only, false, true},
      {"w/o pseudo data", full, false, false},
  };
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  if (values.empty()) return r;
  const double n = static_cast<double>(values.size());
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

const RunMetrics& AblationResult::run(const std::string& variant, std::uint64_t seed) const {
  for (const auto& r : runs)
    if (r.variant == variant && r.seed == seed) return r;
  throw std::out_of_range("no ablation run for variant '" + variant + "' seed " + std::to_string(seed));
}

AblationResult run_ablation(const std::vector<AblationVariant>& variants, const AblationData& data,
                            const AblationSettings& settings, const RunCallback& on_run) {
  if (variants.empty()) throw std::invalid_argument("run_ablation: empty variant grid");
  if (settings.seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  std::vector<const QueryItemPair*> vocab_pairs;
  for (const auto* set : {&data.labeled, &data.pseudo})
    for (const auto& r : *set) vocab_pairs.push_back(&r.pair);
  const StudentVocab vocab = StudentVocab::build(vocab_pairs);

  std::vector<TrainRecord> with_pseudo = data.labeled;
  with_pseudo.insert(with_pseudo.end(), data.pseudo.begin(), data.pseudo.end());

  AblationResult result;
  result.arch = settings.encoder.arch;
  for (const auto& variant : variants) {
    const auto& records = variant.use_pseudo_data ? with_pseudo : data.labeled;
    for (std::uint64_t seed : settings.seeds) {
      EncoderConfig enc = settings.encoder;
      enc.init_seed = seed;
      StudentModel model(enc, vocab);
      TrainOptions opts = settings.train;
      opts.seed = seed;
      opts.pseudo_hard_labels = variant.pseudo_hard_labels;
      const auto trained = train(model, records, variant.weights, opts,
                                 data.validation.empty() ? nullptr : &data.validation);

      const ScoredSet set = score_records(model, data.test);
      const auto split = head_tail_split(set, settings.threshold);
      RunMetrics m;
      m.variant = variant.name;
      m.seed = seed;
      m.train_records = trained.records_used;
      m.roc_auc = roc_auc(set);
      m.neg_pr_auc = neg_pr_auc(set);
      const auto head = split_metrics(split.head);
      const auto tail = split_metrics(split.tail);
      const double nan = std::nan("");
      m.head_roc_auc = head.roc_auc.value_or(nan);
      m.tail_roc_auc = tail.roc_auc.value_or(nan);
      m.head_neg_pr_auc = head.neg_pr_auc.value_or(nan);
      m.tail_neg_pr_auc = tail.neg_pr_auc.value_or(nan);
      log().info("ablation {} {} seed {}: roc-auc {:.4f} neg pr-auc {:.4f} ({} train records)",
                 arch_name(result.arch), variant.name, seed, m.roc_auc, m.neg_pr_auc, m.train_records);
      result.runs.push_back(m);
      if (on_run) on_run(m);
    }
  }

  for (const auto& variant : variants) {
    std::vector<double> auc, ap, head, tail;
    for (const auto& r : result.runs) {
      if (r.variant != variant.name) continue;
      auc.push_back(r.roc_auc);
      ap.push_back(r.neg_pr_auc);
      head.push_back(r.head_roc_auc);
      tail.push_back(r.tail_roc_auc);
    }
    result.rows.push_back({variant.name, mean_std(auc), mean_std(ap), mean_std(head), mean_std(tail), 0.0, 0.0});
  }
  for (auto& row : result.rows) {
    row.delta_roc_auc = row.roc_auc.mean - result.rows.front().roc_auc.mean;
    row.delta_neg_pr_auc = row.neg_pr_auc.mean - result.rows.front().neg_pr_auc.mean;
  }
  return result;
}

namespace {

std::string pct(MeanStd m) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * m.mean << " ± " << 100.0 * m.stddev;
  return s.str();
}

std::string signed_pct(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << std::showpos << 100.0 * v;
  return s.str();
}

nlohmann::json number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

void print_ablation_table(std::ostream& out, const AblationResult& result) {
  out << "arch: " << arch_name(result.arch) << "\n";
  out << std::left << std::setw(18) << "variant" << std::setw(18) << "ROC-AUC" << std::setw(9) << "delta"
      << std::setw(18) << "Neg PR-AUC" << std::setw(9) << "delta" << std::setw(18) << "head ROC-AUC"
      << "tail ROC-AUC\n";
  for (const auto& row : result.rows) {
    // setw counts bytes, and the plus-minus sign is two bytes in UTF-8.
    out << std::left << std::setw(18) << row.variant << std::setw(19) << pct(row.roc_auc) << std::setw(9)
        << signed_pct(row.delta_roc_auc) << std::setw(19) << pct(row.neg_pr_auc) << std::setw(9)
        << signed_pct(row.delta_neg_pr_auc) << std::setw(19) << pct(row.head_roc_auc) << pct(row.tail_roc_auc)
        << "\n";
  }
}

void write_ablation_jsonl(std::ostream& out, const AblationResult& result) {
  const std::string arch(arch_name(result.arch));
  for (const auto& r : result.runs) {
    nlohmann::json j = {{"kind", "run"},
                        {"arch", arch},
                        {"variant", r.variant},
                        {"seed", r.seed},
                        {"train_records", r.train_records},
                        {"roc_auc", number(r.roc_auc)},
                        {"neg_pr_auc", number(r.neg_pr_auc)},
                        {"head_roc_auc", number(r.head_roc_auc)},
                        {"tail_roc_auc", number(r.tail_roc_auc)},
                        {"head_neg_pr_auc", number(r.head_neg_pr_auc)},
                        {"tail_neg_pr_auc", number(r.tail_neg_pr_auc)}};
    out << j.dump() << "\n";
  }
  for (const auto& row : result.rows) {
    nlohmann::json j = {{"kind", "summary"},
                        {"arch", arch},
                        {"variant", row.variant},
                        {"roc_auc_mean", number(row.roc_auc.mean)},
                        {"roc_auc_std", number(row.roc_auc.stddev)},
                        {"neg_pr_auc_mean", number(row.neg_pr_auc.mean)},
                        {"neg_pr_auc_std", number(row.neg_pr_auc.stddev)},
                        {"head_roc_auc_mean", number(row.head_roc_auc.mean)},
                        {"tail_roc_auc_mean", number(row.tail_roc_auc.mean)},
                        {"delta_roc_auc", number(row.delta_roc_auc)},
                        {"delta_neg_pr_auc", number(row.delta_neg_pr_auc)}};
    out << j.dump() << "\n";
  }
}

}  // namespace mkd
