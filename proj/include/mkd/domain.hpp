#pragma once

// Shared value types for query-item relevance records.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mkd/tags.hpp"

namespace mkd {

inline constexpr std::size_t kMaxQueryTokens = 32;
inline constexpr std::size_t kMaxTitleTokens = 64;

/// A single normalized (lower-cased, whitespace-free) token.
class Token {
 public:
  /// Throws std::invalid_argument on empty text or embedded whitespace.
  explicit Token(std::string_view text);

  const std::string& text() const { return text_; }
  bool operator==(const Token&) const = default;
  auto operator<=>(const Token&) const = default;

 private:
  std::string text_;
};

using Tokenizer = std::function<std::vector<Token>(std::string_view)>;

/// Default tokenizer: split on ASCII whitespace, lower-case each piece.
std::vector<Token> whitespace_tokenize(std::string_view text);

std::string join_tokens(const std::vector<Token>& tokens);

/// Lower-case, trim and collapse runs of whitespace to a single space.
std::string normalize_phrase(std::string_view phrase);

struct QueryItemPair {
  std::vector<Token> query;
  std::vector<Token> title;
  std::string pair_id;

  bool operator==(const QueryItemPair&) const = default;
};

/// Builds a pair from raw strings. Sequences longer than the 32/64 token
/// bounds are truncated and a warning is logged.
QueryItemPair make_pair(std::string pair_id, std::string_view query, std::string_view title,
                        const Tokenizer& tokenize = whitespace_tokenize);

enum class Aspect : std::uint8_t {
  category,
  product,
  brand,
  model_number,
  store,
  color,
  material,
  main_parts,
  elegance,
  season,
  sets_and_singles,
  gender,
  age,
  other_properties,
};

inline constexpr std::size_t kNumAspects = 14;

inline constexpr std::array<Aspect, kNumAspects> kAllAspects = {
    Aspect::category, Aspect::product,   Aspect::brand,       Aspect::model_number,
    Aspect::store,    Aspect::color,     Aspect::material,    Aspect::main_parts,
    Aspect::elegance, Aspect::season,    Aspect::sets_and_singles, Aspect::gender,
    Aspect::age,      Aspect::other_properties,
};

/// Human-readable name as used in CoT text, e.g. "model number".
std::string_view aspect_name(Aspect aspect);
/// Identifier form, e.g. "model_number".
std::string_view aspect_id(Aspect aspect);
/// Accepts either form, case-insensitive, surrounding whitespace ignored.
std::optional<Aspect> parse_aspect(std::string_view name);

enum class Judgment : std::uint8_t { good, bad };

struct RelevanceLabel {
  Judgment value = Judgment::good;
  std::optional<Aspect> reason;

  static RelevanceLabel good() { return {Judgment::good, std::nullopt}; }
  static RelevanceLabel bad(std::optional<Aspect> reason = std::nullopt) {
    return {Judgment::bad, reason};
  }
  bool is_good() const { return value == Judgment::good; }
  bool operator==(const RelevanceLabel&) const = default;
};

enum class Verdict : std::uint8_t { match, mismatch, missing };

struct Requirement {
  Aspect aspect;
  std::string phrase;

  bool operator==(const Requirement&) const = default;
};

struct AspectMatch {
  Aspect aspect;
  std::string query_phrase;
  std::optional<std::string> title_phrase;
  Verdict verdict = Verdict::match;

  bool operator==(const AspectMatch&) const = default;
};

struct CotAnnotation {
  std::vector<Requirement> requirements;
  std::vector<AspectMatch> matches;
  RelevanceLabel judgment;

  /// First match entry for `aspect`, or nullptr.
  const AspectMatch* match_for(Aspect aspect) const;
  bool operator==(const CotAnnotation&) const = default;
};

/// The judgment implied by the verdicts: Good iff every requirement has a
/// `match` verdict; otherwise Bad, citing the first failing requirement.
RelevanceLabel conclude(const std::vector<Requirement>& requirements,
                        const std::vector<AspectMatch>& matches);

struct TrainRecord {
  QueryItemPair pair;
  std::optional<RelevanceLabel> gold;
  std::optional<CotAnnotation> cot;
  std::optional<double> teacher_score;
  std::optional<TagSequence> query_tags;
  std::optional<TagSequence> title_tags;
  std::optional<RegFactorSequence> query_factors;
  std::optional<RegFactorSequence> title_factors;
  std::uint64_t query_frequency = 0;
};

std::vector<std::string> validate_annotation(const CotAnnotation& cot);

/// Returns one description per violated invariant; empty when the record is
/// well-formed.
std::vector<std::string> validate_record(const TrainRecord& record);

}  // namespace mkd
