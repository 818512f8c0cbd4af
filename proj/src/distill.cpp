#include "mkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <sstream>

#include "mkd/eval.hpp"
#include "mkd/log.hpp"
#include "mkd/synth.hpp"

namespace mkd {

using tensor::Graph;
using tensor::Tensor;
using tensor::Var;

LengthMismatch::LengthMismatch(const std::string& what, std::size_t expected, std::size_t got)
    : std::invalid_argument(what + ": length mismatch, expected " + std::to_string(expected) + " got " +
                            std::to_string(got)) {}

LossWeights LossWeights::defaults(Arch arch) {
  if (arch == Arch::interaction) return {1.0, 0.1, 0.5, 2.0};
  return {1.0, 0.01, 0.5, 2.0};
}

void LossWeights::validate() const {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument(std::string("loss weight ") + name + " must be >= 0");
  };
  check(score, "score");
  check(cot, "cot");
  check(ce, "ce");
  if (!std::isfinite(temperature) || temperature <= 0.0)
    throw std::invalid_argument("kd temperature must be positive");
}

std::string_view tagger_name(Tagger tagger) { return tagger == Tagger::crf ? "crf" : "softmax"; }

Tagger parse_tagger(std::string_view name) {
  if (name == "crf") return Tagger::crf;
  if (name == "softmax") return Tagger::softmax;
  throw std::invalid_argument("unknown tagger '" + std::string(name) + "' (expected crf|softmax)");
}

// ---------------------------------------------------------------------------
// Score distillation

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// x ln(x) with the 0 ln 0 = 0 convention.
double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

}  // namespace

double project_score(double p_good, double p_bad, double temperature) {
  return sigmoid((p_good - p_bad) / temperature);
}

double temper_score(double score_t1, double temperature) {
  if (temperature == 1.0) return score_t1;
  return sigmoid((std::log(score_t1) - std::log1p(-score_t1)) / temperature);
}

double score_distill_loss(double s_t, double p_s, double temperature) {
  // Ratio form so that s_t == p_s gives exactly 0.
  auto term = [](double a, double b) { return a > 0.0 ? a * std::log(a / b) : 0.0; };
  const double kl = term(s_t, p_s) + term(1.0 - s_t, 1.0 - p_s);
  return temperature * temperature * kl;
}

Var score_distill_loss(Graph& g, double s_t, Var logit, double temperature) {
  // T^2 [ s ln s + (1-s) ln(1-s) - s log sig(z/T) - (1-s) log sig(-z/T) ]
  Var z = g.scale(logit, 1.0 / temperature);
  Var cross = g.add(g.scale(g.log_sigmoid(z), -s_t), g.scale(g.log_sigmoid(g.scale(z, -1.0)), -(1.0 - s_t)));
  Var kl = g.add_scalar(cross, xlogx(s_t) + xlogx(1.0 - s_t));
  return g.scale(kl, temperature * temperature);
}

double bce_loss(double logit, bool good) {
  const double x = good ? logit : -logit;
  return -(std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))));
}

Var bce_loss(Graph& g, Var logit, bool good) {
  return g.scale(g.log_sigmoid(good ? logit : g.scale(logit, -1.0)), -1.0);
}

// ---------------------------------------------------------------------------
// CRF

bool crf_transition_masked(Tag from, Tag to) {
  if (to == Tag::i_rele) return from != Tag::b_rele && from != Tag::i_rele;
  if (to == Tag::i_irrele) return from != Tag::b_irrele && from != Tag::i_irrele;
  return false;
}

bool crf_start_masked(Tag tag) { return tag == Tag::i_rele || tag == Tag::i_irrele; }

void CrfParams::apply_mask() {
  for (Tag from : kAllTags)
    for (Tag to : kAllTags)
      if (crf_transition_masked(from, to))
        transitions(static_cast<std::size_t>(from), static_cast<std::size_t>(to)) = kCrfMasked;
  for (Tag t : kAllTags)
    if (crf_start_masked(t)) start[static_cast<std::size_t>(t)] = kCrfMasked;
}

CrfParams CrfParams::from_model(const StudentModel& model) {
  CrfParams p;
  p.transitions = model.param("crf.transitions").value;
  p.start = model.param("crf.start").value;
  p.end = model.param("crf.end").value;
  p.apply_mask();
  return p;
}

namespace {

constexpr std::size_t K = kNumTags;

double lse(const double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

void check_crf_shapes(const Tensor& emissions, const Tensor& transitions, const Tensor& start, const Tensor& end,
                      std::size_t gold_len) {
  if (emissions.cols() != K) throw tensor::ShapeMismatch("crf emissions", {emissions.rows(), K}, emissions.shape());
  if (transitions.rows() != K || transitions.cols() != K)
    throw tensor::ShapeMismatch("crf transitions", {K, K}, transitions.shape());
  if (start.size() != K) throw tensor::ShapeMismatch("crf start", {1, K}, start.shape());
  if (end.size() != K) throw tensor::ShapeMismatch("crf end", {1, K}, end.shape());
  if (gold_len != emissions.rows()) throw LengthMismatch("crf gold tags", emissions.rows(), gold_len);
}

// Forward/backward log-space lattice over masked parameters.
struct Lattice {
  std::size_t length = 0;
  std::vector<double> trans;  // K x K, masked
  std::vector<double> start;  // K, masked
  std::vector<double> end;    // K
  std::vector<double> alpha;  // L x K
  std::vector<double> beta;   // L x K
  double log_z = 0.0;

  Lattice(const Tensor& emissions, const Tensor& transitions, const Tensor& start_scores, const Tensor& end_scores)
      : length(emissions.rows()), trans(K * K), start(K), end(K), alpha(length * K), beta(length * K) {
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j)
        trans[i * K + j] = crf_transition_masked(static_cast<Tag>(i), static_cast<Tag>(j)) ? kCrfMasked
                                                                                            : transitions(i, j);
      start[i] = crf_start_masked(static_cast<Tag>(i)) ? kCrfMasked : start_scores[i];
      end[i] = end_scores[i];
    }
    double buf[K];
    for (std::size_t j = 0; j < K; ++j) alpha[j] = start[j] + emissions(0, j);
    for (std::size_t t = 1; t < length; ++t) {
      for (std::size_t j = 0; j < K; ++j) {
        for (std::size_t i = 0; i < K; ++i) buf[i] = alpha[(t - 1) * K + i] + trans[i * K + j];
        alpha[t * K + j] = emissions(t, j) + lse(buf, K);
      }
    }
    for (std::size_t j = 0; j < K; ++j) {
      beta[(length - 1) * K + j] = end[j];
      buf[j] = alpha[(length - 1) * K + j] + end[j];
    }
    log_z = lse(buf, K);
    for (std::size_t t = length - 1; t-- > 0;) {
      for (std::size_t i = 0; i < K; ++i) {
        for (std::size_t j = 0; j < K; ++j) buf[j] = trans[i * K + j] + emissions(t + 1, j) + beta[(t + 1) * K + j];
        beta[t * K + i] = lse(buf, K);
      }
    }
  }

  double path_score(const Tensor& emissions, const TagSequence& path) const {
    double s = 0.0;
    for (std::size_t t = 0; t < length; ++t) {
      const auto y = static_cast<std::size_t>(path.tags[t]);
      s += emissions(t, y);
      s += t == 0 ? start[y] : trans[static_cast<std::size_t>(path.tags[t - 1]) * K + y];
    }
    return s + end[static_cast<std::size_t>(path.tags.back())];
  }
};

}  // namespace

double crf_path_score(const Tensor& emissions, const CrfParams& params, const TagSequence& path) {
  check_crf_shapes(emissions, params.transitions, params.start, params.end, path.size());
  return Lattice(emissions, params.transitions, params.start, params.end).path_score(emissions, path);
}

double crf_nll(const Tensor& emissions, CrfParams params, const TagSequence& gold) {
  check_crf_shapes(emissions, params.transitions, params.start, params.end, gold.size());
  if (gold.size() == 0) throw LengthMismatch("crf gold tags", 1, 0);
  Lattice lat(emissions, params.transitions, params.start, params.end);
  return lat.log_z - lat.path_score(emissions, gold);
}

Var crf_nll(Graph& g, Var emissions, Var transitions, Var start, Var end, const TagSequence& gold) {
  const Tensor& E = g.value(emissions);
  check_crf_shapes(E, g.value(transitions), g.value(start), g.value(end), gold.size());
  auto lat = std::make_shared<Lattice>(E, g.value(transitions), g.value(start), g.value(end));
  const double nll = lat->log_z - lat->path_score(E, gold);
  Tensor e_copy = E;
  return g.custom({emissions, transitions, start, end}, Tensor::scalar(nll),
                  [lat, gold, E = std::move(e_copy)](const Tensor& out_grad, std::span<Tensor* const> grads) {
                    const double go = out_grad[0];
                    const std::size_t L = lat->length;
                    Tensor* ge = grads[0];
                    Tensor* gt = grads[1];
                    Tensor* gs = grads[2];
                    Tensor* gn = grads[3];
                    // Expected counts under the model minus gold counts.
                    for (std::size_t t = 0; t < L; ++t) {
                      for (std::size_t j = 0; j < K; ++j) {
                        const double mu = std::exp(lat->alpha[t * K + j] + lat->beta[t * K + j] - lat->log_z);
                        if (ge) (*ge)(t, j) += go * mu;
                        if (t == 0 && gs && !crf_start_masked(static_cast<Tag>(j))) (*gs)[j] += go * mu;
                        if (t == L - 1 && gn) (*gn)[j] += go * mu;
                      }
                      if (t > 0 && gt) {
                        for (std::size_t i = 0; i < K; ++i) {
                          for (std::size_t j = 0; j < K; ++j) {
                            if (crf_transition_masked(static_cast<Tag>(i), static_cast<Tag>(j))) continue;
                            const double xi = std::exp(lat->alpha[(t - 1) * K + i] + lat->trans[i * K + j] + E(t, j) +
                                                       lat->beta[t * K + j] - lat->log_z);
                            (*gt)(i, j) += go * xi;
                          }
                        }
                      }
                    }
                    for (std::size_t t = 0; t < L; ++t) {
                      const auto y = static_cast<std::size_t>(gold.tags[t]);
                      if (ge) (*ge)(t, y) -= go;
                      if (t == 0 && gs && !crf_start_masked(gold.tags[0])) (*gs)[y] -= go;
                      if (t > 0 && gt) {
                        const auto prev = static_cast<std::size_t>(gold.tags[t - 1]);
                        if (!crf_transition_masked(gold.tags[t - 1], gold.tags[t])) (*gt)(prev, y) -= go;
                      }
                    }
                    if (gn) (*gn)[static_cast<std::size_t>(gold.tags.back())] -= go;
                  });
}

TagSequence crf_decode(const Tensor& emissions, CrfParams params) {
  if (emissions.rows() == 0) throw LengthMismatch("crf_decode emissions", 1, 0);
  check_crf_shapes(emissions, params.transitions, params.start, params.end, emissions.rows());
  params.apply_mask();
  const std::size_t L = emissions.rows();
  std::vector<double> delta(L * K);
  std::vector<std::size_t> back(L * K, 0);
  for (std::size_t j = 0; j < K; ++j) delta[j] = params.start[j] + emissions(0, j);
  for (std::size_t t = 1; t < L; ++t) {
    for (std::size_t j = 0; j < K; ++j) {
      std::size_t best = 0;
      double best_v = delta[(t - 1) * K] + params.transitions(0, j);
      for (std::size_t i = 1; i < K; ++i) {
        const double v = delta[(t - 1) * K + i] + params.transitions(i, j);
        if (v > best_v) {
          best_v = v;
          best = i;
        }
      }
      delta[t * K + j] = best_v + emissions(t, j);
      back[t * K + j] = best;
    }
  }
  std::size_t last = 0;
  double best_v = delta[(L - 1) * K] + params.end[0];
  for (std::size_t j = 1; j < K; ++j) {
    const double v = delta[(L - 1) * K + j] + params.end[j];
    if (v > best_v) {
      best_v = v;
      last = j;
    }
  }
  TagSequence out;
  out.tags.resize(L);
  for (std::size_t t = L; t-- > 0;) {
    out.tags[t] = static_cast<Tag>(last);
    last = back[t * K + last];
  }
  return out;
}

double per_token_tag_loss(const Tensor& emissions, const TagSequence& gold) {
  if (emissions.cols() != K) throw tensor::ShapeMismatch("tag emissions", {emissions.rows(), K}, emissions.shape());
  if (gold.size() != emissions.rows()) throw LengthMismatch("per-token gold tags", emissions.rows(), gold.size());
  if (gold.size() == 0) throw LengthMismatch("per-token gold tags", 1, 0);
  double total = 0.0;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    total += lse(&emissions.data()[t * K], K) - emissions(t, static_cast<std::size_t>(gold.tags[t]));
  }
  return total / static_cast<double>(gold.size());
}

Var per_token_tag_loss(Graph& g, Var emissions, const TagSequence& gold) {
  const Tensor& E = g.value(emissions);
  if (E.cols() != K) throw tensor::ShapeMismatch("tag emissions", {E.rows(), K}, E.shape());
  if (gold.size() != E.rows()) throw LengthMismatch("per-token gold tags", E.rows(), gold.size());
  std::vector<std::size_t> picks(gold.size());
  for (std::size_t t = 0; t < gold.size(); ++t) picks[t] = t * K + static_cast<std::size_t>(gold.tags[t]);
  Var diff = g.sub(g.reduce_sum(g.logsumexp(emissions)), g.reduce_sum(g.gather(emissions, picks)));
  return g.scale(diff, 1.0 / static_cast<double>(gold.size()));
}

TagSequence softmax_decode(const Tensor& emissions) {
  TagSequence out;
  for (std::size_t t = 0; t < emissions.rows(); ++t) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < emissions.cols(); ++j)
      if (emissions(t, j) > emissions(t, best)) best = j;
    out.tags.push_back(static_cast<Tag>(best));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention regulation

namespace {

double regulation_side(std::span<const double> pooled, const RegFactorSequence& factors, const char* side) {
  if (pooled.size() != factors.size()) throw LengthMismatch(side, pooled.size(), factors.size());
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    if (factors.factors[i] == Factor::none) continue;
    const double d = pooled[i] - static_cast<double>(factors.factors[i]);
    sq += d * d;
    ++n;
  }
  return n == 0 ? 0.0 : std::sqrt(sq) / static_cast<double>(n);
}

std::optional<Var> regulation_side(Graph& g, Var pooled, const RegFactorSequence& factors, const char* side) {
  const std::size_t len = g.value(pooled).size();
  if (len != factors.size()) throw LengthMismatch(side, len, factors.size());
  std::vector<std::size_t> idx;
  std::vector<double> target;
  for (std::size_t i = 0; i < len; ++i) {
    if (factors.factors[i] == Factor::none) continue;
    idx.push_back(i);
    target.push_back(static_cast<double>(factors.factors[i]));
  }
  if (idx.empty()) return std::nullopt;
  const double n = static_cast<double>(idx.size());
  Var d = g.sub(g.gather(pooled, idx), g.constant(Tensor::row(std::move(target))));
  return g.scale(g.sqrt(g.reduce_sum(g.mul(d, d))), 1.0 / n);
}

}  // namespace

double attention_regulation_loss(std::span<const double> pooled_query, std::span<const double> pooled_title,
                                 const RegFactorSequence& query_factors, const RegFactorSequence& title_factors) {
  return regulation_side(pooled_query, query_factors, "query factors") +
         regulation_side(pooled_title, title_factors, "title factors");
}

Var attention_regulation_loss(Graph& g, Var pooled_query, Var pooled_title, const RegFactorSequence& query_factors,
                              const RegFactorSequence& title_factors) {
  auto q = regulation_side(g, pooled_query, query_factors, "query factors");
  auto t = regulation_side(g, pooled_title, title_factors, "title factors");
  if (q && t) return g.add(*q, *t);
  if (q) return *q;
  if (t) return *t;
  return g.constant(Tensor::scalar(0.0));
}

// ---------------------------------------------------------------------------
// Combined objective

ActiveTerms active_terms(const TrainRecord& record, const LossWeights& weights, Arch arch, bool pseudo_hard_labels) {
  ActiveTerms terms;
  terms.score = weights.score > 0.0 && record.teacher_score.has_value();
  if (weights.cot > 0.0) {
    terms.cot = arch == Arch::interaction ? record.query_tags && record.title_tags
                                          : record.query_factors && record.title_factors;
  }
  if (weights.ce > 0.0) {
    if (record.gold) {
      terms.ce = true;
      terms.ce_good = record.gold->is_good();
    } else if (pseudo_hard_labels && record.teacher_score) {
      terms.ce = true;
      terms.ce_good = *record.teacher_score > 0.5;
    }
  }
  return terms;
}

StudentOutputs student_forward(Graph& g, StudentModel& model, const StudentModel::Bound& p,
                               const QueryItemPair& pair) {
  StudentOutputs out;
  if (model.config().arch == Arch::interaction) {
    auto f = interaction_forward(g, model, p, pair);
    out.logit = f.logit;
    out.query_emissions = f.query_emissions;
    out.title_emissions = f.title_emissions;
    out.crf_transitions = p("crf.transitions");
    out.crf_start = p("crf.start");
    out.crf_end = p("crf.end");
  } else {
    auto f = representation_pair_forward(g, model, p, pair);
    out.logit = f.logit;
    out.pooled_query = f.pooled.query;
    out.pooled_title = f.pooled.title;
  }
  return out;
}

CombinedLoss combined_loss(Graph& g, const TrainRecord& record, const StudentOutputs& outputs,
                           const LossWeights& weights, const ActiveTerms& terms, Tagger tagger) {
  CombinedLoss out;
  std::optional<Var> total;
  auto accumulate = [&](Var term, double weight) {
    Var w = g.scale(term, weight);
    total = total ? g.add(*total, w) : w;
  };
  if (terms.score) {
    const double s_t = temper_score(*record.teacher_score, weights.temperature);
    Var l = score_distill_loss(g, s_t, outputs.logit, weights.temperature);
    out.components.score = g.value(l).item();
    accumulate(l, weights.score);
  }
  if (terms.cot) {
    Var l;
    if (outputs.query_emissions) {
      if (tagger == Tagger::crf) {
        l = g.add(crf_nll(g, *outputs.query_emissions, *outputs.crf_transitions, *outputs.crf_start,
                          *outputs.crf_end, *record.query_tags),
                  crf_nll(g, *outputs.title_emissions, *outputs.crf_transitions, *outputs.crf_start,
                          *outputs.crf_end, *record.title_tags));
      } else {
        l = g.add(per_token_tag_loss(g, *outputs.query_emissions, *record.query_tags),
                  per_token_tag_loss(g, *outputs.title_emissions, *record.title_tags));
      }
    } else {
      l = attention_regulation_loss(g, *outputs.pooled_query, *outputs.pooled_title, *record.query_factors,
                                    *record.title_factors);
    }
    out.components.cot = g.value(l).item();
    accumulate(l, weights.cot);
  }
  if (terms.ce) {
    Var l = bce_loss(g, outputs.logit, terms.ce_good);
    out.components.ce = g.value(l).item();
    accumulate(l, weights.ce);
  }
  out.total = total ? *total : g.constant(Tensor::scalar(0.0));
  out.components.total = g.value(out.total).item();
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::string describe(const LossComponents& c) {
  std::ostringstream s;
  s << "total=" << c.total << " score=" << c.score << " cot=" << c.cot << " ce=" << c.ce;
  return s.str();
}

}  // namespace

NonFiniteLoss::NonFiniteLoss(std::uint64_t step, std::string pair_id, LossComponents components)
    : std::runtime_error("non-finite loss at step " + std::to_string(step) + " on pair '" + pair_id +
                         "': " + describe(components)),
      step_(step),
      pair_id_(std::move(pair_id)),
      components_(components) {}

std::vector<double> predict_scores(const StudentModel& model, const std::vector<TrainRecord>& records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(sigmoid(predict_logit(model, r.pair)));
  return out;
}

TrainResult train(StudentModel& model, const std::vector<TrainRecord>& records, const LossWeights& weights,
                  const TrainOptions& options, const std::vector<TrainRecord>* validation,
                  const EpochCallback& on_epoch) {
  weights.validate();
  if (records.empty()) throw std::invalid_argument("train: no records");
  if (options.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  const Arch arch = model.config().arch;

  std::vector<std::size_t> used;
  std::vector<ActiveTerms> terms(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    terms[i] = active_terms(records[i], weights, arch, options.pseudo_hard_labels);
    if (terms[i].any()) used.push_back(i);
  }
  TrainResult result;
  result.records_used = used.size();
  if (used.empty()) {
    log().warn("train: no record carries supervision under the given weights");
    return result;
  }

  tensor::OptimState state{options.optimizer, 0, {}, {}};
  auto params = model.parameter_ptrs();
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::vector<std::size_t> order = used;
    std::mt19937_64 rng(mix_seed(options.seed, 0xe90c, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    LossComponents sum;
    std::size_t n_score = 0, n_cot = 0, n_ce = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += options.batch_size) {
      const std::size_t end = std::min(order.size(), begin + options.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - begin);
      model.zero_grad();
      for (std::size_t k = begin; k < end; ++k) {
        const TrainRecord& record = records[order[k]];
        Graph g;
        auto bound = model.bind(g);
        auto outputs = student_forward(g, model, bound, record.pair);
        auto loss = combined_loss(g, record, outputs, weights, terms[order[k]], options.tagger);
        if (!std::isfinite(loss.components.total)) throw NonFiniteLoss(step, record.pair.pair_id, loss.components);
        g.backward(g.scale(loss.total, inv_batch));
        sum.total += loss.components.total;
        sum.score += loss.components.score;
        sum.cot += loss.components.cot;
        sum.ce += loss.components.ce;
        n_score += terms[order[k]].score;
        n_cot += terms[order[k]].cot;
        n_ce += terms[order[k]].ce;
      }
      tensor::adamw_step(params, state);
      ++step;
    }

    EpochMetrics m;
    m.epoch = epoch;
    auto mean = [](double s, std::size_t n) { return n == 0 ? 0.0 : s / static_cast<double>(n); };
    m.loss_total = mean(sum.total, order.size());
    m.loss_score = mean(sum.score, n_score);
    m.loss_cot = mean(sum.cot, n_cot);
    m.loss_ce = mean(sum.ce, n_ce);
    m.val_roc_auc = std::numeric_limits<double>::quiet_NaN();
    if (validation && !validation->empty()) {
      ScoredSet set;
      auto scores = predict_scores(model, *validation);
      for (std::size_t i = 0; i < validation->size(); ++i) {
        const auto& r = (*validation)[i];
        if (r.gold) set.push_back(scores[i], *r.gold, r.query_frequency);
      }
      if (set.count_good() > 0 && set.count_bad() > 0) m.val_roc_auc = roc_auc(set);
    }
    log().info("epoch {}: loss {:.5f} (score {:.5f}, cot {:.5f}, ce {:.5f}) val auc {:.4f}", epoch, m.loss_total,
               m.loss_score, m.loss_cot, m.loss_ce, m.val_roc_auc);
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

}  // namespace mkd
