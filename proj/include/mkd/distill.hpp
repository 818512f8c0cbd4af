#pragma once

// Distillation losses, the linear-chain CRF over BIO tags, and the training
// loop that mixes labeled and teacher-labeled records.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkd/domain.hpp"
#include "mkd/encoders.hpp"
#include "mkd/tags.hpp"
#include "mkd/tensor.hpp"

namespace mkd {

class LengthMismatch : public std::invalid_argument {
 public:
  LengthMismatch(const std::string& what, std::size_t expected, std::size_t got);
};

struct LossWeights {
  double score = 1.0;  ///< lambda1
  double cot = 0.1;    ///< lambda2
  double ce = 0.5;     ///< lambda3
  double temperature = 2.0;

  static LossWeights defaults(Arch arch);
  /// Throws std::invalid_argument for negative weights or a non-positive temperature.
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

enum class Tagger { crf, softmax };
std::string_view tagger_name(Tagger tagger);
Tagger parse_tagger(std::string_view name);

// --- score distillation ----------------------------------------------------

/// exp(p_good/T) / (exp(p_good/T) + exp(p_bad/T)).
double project_score(double p_good, double p_bad, double temperature);
/// Re-tempers a score projected at T = 1: sigmoid(logit(s1) / T).
double temper_score(double score_t1, double temperature);
/// T^2 * KL(Bernoulli(s_t) || Bernoulli(p_s)).
double score_distill_loss(double s_t, double p_s, double temperature);
/// Same loss with p_s = sigmoid(logit / T), differentiable in the logit.
tensor::Var score_distill_loss(tensor::Graph& g, double s_t, tensor::Var logit, double temperature);

/// Binary cross-entropy of sigmoid(logit) against a hard label.
double bce_loss(double logit, bool good);
tensor::Var bce_loss(tensor::Graph& g, tensor::Var logit, bool good);

// --- CRF ------------------------------------------------------------------

inline constexpr double kCrfMasked = -1e4;

/// Structural mask: I-rele only after B-rele/I-rele, I-irrele only after
/// B-irrele/I-irrele, and neither I-* may start a sequence.
bool crf_transition_masked(Tag from, Tag to);
bool crf_start_masked(Tag tag);

struct CrfParams {
  tensor::Tensor transitions{{kNumTags, kNumTags}, 0.0};
  tensor::Tensor start{{1, kNumTags}, 0.0};
  tensor::Tensor end{{1, kNumTags}, 0.0};

  /// Overwrites masked entries with kCrfMasked.
  void apply_mask();
  /// Masked copy of the CRF parameters of an interaction model.
  static CrfParams from_model(const StudentModel& model);
};

/// Score of one tag path under emissions (L x 5) and masked parameters.
double crf_path_score(const tensor::Tensor& emissions, const CrfParams& params, const TagSequence& path);
/// -(score(gold) - log Z); `params` is masked before use.
double crf_nll(const tensor::Tensor& emissions, CrfParams params, const TagSequence& gold);
/// Differentiable form; masked entries are pinned and receive no gradient.
tensor::Var crf_nll(tensor::Graph& g, tensor::Var emissions, tensor::Var transitions, tensor::Var start,
                    tensor::Var end, const TagSequence& gold);
/// Viterbi path; equal scores resolve to the lowest tag index.
TagSequence crf_decode(const tensor::Tensor& emissions, CrfParams params);

/// Mean per-token cross-entropy of softmaxed emission rows.
double per_token_tag_loss(const tensor::Tensor& emissions, const TagSequence& gold);
tensor::Var per_token_tag_loss(tensor::Graph& g, tensor::Var emissions, const TagSequence& gold);
/// Per-row argmax of the emissions.
TagSequence softmax_decode(const tensor::Tensor& emissions);

// --- attention regulation --------------------------------------------------

/// (1/n_q) sqrt(sum (A_Q - f)^2) + (1/n_t) sqrt(sum (A_T - f)^2) over tokens
/// whose factor is defined; a side without defined factors adds 0.
double attention_regulation_loss(std::span<const double> pooled_query, std::span<const double> pooled_title,
                                 const RegFactorSequence& query_factors, const RegFactorSequence& title_factors);
tensor::Var attention_regulation_loss(tensor::Graph& g, tensor::Var pooled_query, tensor::Var pooled_title,
                                      const RegFactorSequence& query_factors,
                                      const RegFactorSequence& title_factors);

// --- combined objective ----------------------------------------------------

struct LossComponents {
  double score = 0.0;
  double cot = 0.0;
  double ce = 0.0;
  double total = 0.0;
};

/// Which supervision terms a record contributes under the given weights.
struct ActiveTerms {
  bool score = false;
  bool cot = false;
  bool ce = false;
  /// CE target; equals the gold label, or the teacher's hard judgment when
  /// pseudo hard labels are enabled and gold is absent.
  bool ce_good = false;

  bool any() const { return score || cot || ce; }
};

ActiveTerms active_terms(const TrainRecord& record, const LossWeights& weights, Arch arch,
                         bool pseudo_hard_labels);

struct StudentOutputs {
  tensor::Var logit;
  // interaction
  std::optional<tensor::Var> query_emissions;
  std::optional<tensor::Var> title_emissions;
  std::optional<tensor::Var> crf_transitions;
  std::optional<tensor::Var> crf_start;
  std::optional<tensor::Var> crf_end;
  // representation
  std::optional<tensor::Var> pooled_query;
  std::optional<tensor::Var> pooled_title;
};

StudentOutputs student_forward(tensor::Graph& g, StudentModel& model, const StudentModel::Bound& p,
                               const QueryItemPair& pair);

struct CombinedLoss {
  tensor::Var total;
  LossComponents components;
};

/// lambda1 L_score + lambda2 L_cot + lambda3 CE; inactive terms contribute 0.
CombinedLoss combined_loss(tensor::Graph& g, const TrainRecord& record, const StudentOutputs& outputs,
                           const LossWeights& weights, const ActiveTerms& terms, Tagger tagger);

// --- training --------------------------------------------------------------

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::uint64_t step, std::string pair_id, LossComponents components);

  std::uint64_t step() const { return step_; }
  const std::string& pair_id() const { return pair_id_; }
  const LossComponents& components() const { return components_; }

 private:
  std::uint64_t step_;
  std::string pair_id_;
  LossComponents components_;
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  tensor::AdamWConfig optimizer{.lr = 2e-3, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01};
  Tagger tagger = Tagger::crf;
  bool pseudo_hard_labels = false;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss_total = 0.0;
  double loss_score = 0.0;
  double loss_cot = 0.0;
  double loss_ce = 0.0;
  /// NaN when no validation set with both classes was supplied.
  double val_roc_auc = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  /// Records with at least one active term.
  std::size_t records_used = 0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mini-batch AdamW over the records with a seeded shuffle per epoch.
/// Throws NonFiniteLoss when a record's loss is not finite.
TrainResult train(StudentModel& model, const std::vector<TrainRecord>& records, const LossWeights& weights,
                  const TrainOptions& options, const std::vector<TrainRecord>* validation = nullptr,
                  const EpochCallback& on_epoch = {});

/// sigmoid(logit) for each record's pair.
std::vector<double> predict_scores(const StudentModel& model, const std::vector<TrainRecord>& records);

}  // namespace mkd
