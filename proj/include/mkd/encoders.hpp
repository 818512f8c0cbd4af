#pragma once

// Tiny transformer students: a joint (interaction) encoder with a BIO
// emission head, and a shared-weight dual tower scored by late interaction.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mkd/cotlang.hpp"
#include "mkd/domain.hpp"
#include "mkd/tensor.hpp"

namespace mkd {

enum class Arch { interaction, representation };
enum class Aggregation { mean, sum };

std::string_view arch_name(Arch arch);
Arch parse_arch(std::string_view name);
std::string_view aggregation_name(Aggregation aggregation);
Aggregation parse_aggregation(std::string_view name);

class LengthOverflow : public std::length_error {
 public:
  LengthOverflow(std::size_t length, std::size_t max_len);
};

/// Token ids for the students. Ids 0..5 are reserved for the special tokens.
class StudentVocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kCls = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kQueryMarker = 4;
  static constexpr std::size_t kTitleMarker = 5;
  static constexpr std::size_t kNumSpecial = 6;

  StudentVocab();
  /// Special tokens followed by the sorted distinct tokens of all pairs.
  static StudentVocab build(const std::vector<const QueryItemPair*>& pairs);
  static StudentVocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(const Token& token) const;
  std::vector<std::size_t> ids(const std::vector<Token>& tokens) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct EncoderConfig {
  std::size_t vocab_size = StudentVocab::kNumSpecial;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  /// Longest encoded sequence including special tokens.
  std::size_t max_len = kMaxQueryTokens + kMaxTitleTokens + 2;
  Arch arch = Arch::interaction;
  Aggregation aggregation = Aggregation::mean;
  std::uint64_t init_seed = 1;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

class StudentModel {
 public:
  StudentModel(EncoderConfig config, StudentVocab vocab);

  const EncoderConfig& config() const { return config_; }
  const StudentVocab& vocab() const { return vocab_; }

  std::vector<tensor::Parameter>& parameters() { return params_; }
  const std::vector<tensor::Parameter>& parameters() const { return params_; }
  std::vector<tensor::Parameter*> parameter_ptrs();
  tensor::Parameter& param(std::string_view name);
  const tensor::Parameter& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  void zero_grad();

  /// Binds every parameter to `graph` once; repeated calls reuse the leaves.
  struct Bound {
    std::map<std::string, tensor::Var, std::less<>> vars;
    tensor::Var operator()(std::string_view name) const;
  };
  Bound bind(tensor::Graph& graph);

 private:
  void add_param(std::string name, tensor::Shape shape, double stddev, double fill);

  EncoderConfig config_;
  StudentVocab vocab_;
  std::vector<tensor::Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct InteractionOutput {
  tensor::Var logit;
  /// (l_q + l_t + 2) x d_model, layout [CLS] query [SEP] title.
  tensor::Var hidden;
  /// Query-token rows followed by title-token rows, 5 columns each.
  tensor::Var query_emissions;
  tensor::Var title_emissions;
};

/// Encodes token ids with the shared transformer stack.
tensor::Var encode(tensor::Graph& g, const StudentModel::Bound& p, const EncoderConfig& config,
                   const std::vector<std::size_t>& ids, const std::vector<std::size_t>& segments);

InteractionOutput interaction_forward(tensor::Graph& g, const StudentModel& model, const StudentModel::Bound& p,
                                      const QueryItemPair& pair);

/// Per-token hidden states for one side, marker row removed.
tensor::Var representation_forward(tensor::Graph& g, const StudentModel& model, const StudentModel::Bound& p,
                                   const std::vector<Token>& tokens, Side side);

/// Cosine similarities l_q x l_t; zero vectors give 0.
tensor::Var cross_attention_matrix(tensor::Graph& g, tensor::Var h_query, tensor::Var h_title);

struct PooledAttention {
  tensor::Var query;  ///< 1 x l_q, max over title tokens
  tensor::Var title;  ///< 1 x l_t, max over query tokens
};
PooledAttention pooled_attention(tensor::Graph& g, tensor::Var attention);

/// w * aggregate(pooled query maxima) + b.
tensor::Var late_interaction_score(tensor::Graph& g, const StudentModel& model, const StudentModel::Bound& p,
                                   tensor::Var pooled_query);

struct RepresentationOutput {
  tensor::Var logit;
  tensor::Var h_query;
  tensor::Var h_title;
  tensor::Var attention;
  PooledAttention pooled;
};

RepresentationOutput representation_pair_forward(tensor::Graph& g, const StudentModel& model,
                                                 const StudentModel::Bound& p, const QueryItemPair& pair);

/// Relevance logit for either architecture, without keeping the graph.
double predict_logit(const StudentModel& model, const QueryItemPair& pair);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const StudentModel& model, const std::filesystem::path& path);
std::string serialize_checkpoint(const StudentModel& model);
StudentModel load_checkpoint(const std::filesystem::path& path);
StudentModel deserialize_checkpoint(std::string_view bytes);

}  // namespace mkd
