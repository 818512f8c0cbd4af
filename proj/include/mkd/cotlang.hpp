#pragma once

// Canonical CoT text grammar (see docs/cot_grammar.md) and the derivation of
// token-level supervision from parsed annotations.

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mkd/domain.hpp"
#include "mkd/tags.hpp"

namespace mkd {

class MalformedCot : public std::runtime_error {
 public:
  MalformedCot(std::size_t position, std::string expected);

  std::size_t position() const { return position_; }
  const std::string& expected() const { return expected_; }

 private:
  std::size_t position_;
  std::string expected_;
};

class UnknownAspect : public std::runtime_error {
 public:
  explicit UnknownAspect(std::string name);

  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

std::string serialize_cot(const CotAnnotation& cot);

/// Throws MalformedCot or UnknownAspect. Keywords are case-insensitive,
/// whitespace is free-form, and clause separators may be ';', ',' or '.'.
/// Phrases are normalized with normalize_phrase().
CotAnnotation parse_cot(std::string_view text);

/// Half-open token range [first, second).
using Span = std::pair<std::size_t, std::size_t>;

/// Leftmost exact occurrence of the phrase's normalized tokens.
std::optional<Span> locate_span(std::string_view phrase, const std::vector<Token>& tokens);

enum class Side { query, title };

struct SpanNotFound {
  std::string phrase;
  Side side;

  bool operator==(const SpanNotFound&) const = default;
};

struct DerivedTags {
  TagSequence query;
  TagSequence title;
  std::vector<SpanNotFound> warnings;
};

struct DerivedFactors {
  RegFactorSequence query;
  RegFactorSequence title;
  std::vector<SpanNotFound> warnings;
};

/// Query requirement phrases inherit the verdict of their aspect's match
/// (missing or absent counts as irrelevant); title phrases of match and
/// mismatch verdicts are tagged directly. Spans are placed longest phrase
/// first, then leftmost; a span overlapping an earlier one is skipped.
DerivedTags derive_bio_tags(const CotAnnotation& cot, const QueryItemPair& pair);

DerivedFactors derive_reg_factors(const CotAnnotation& cot, const QueryItemPair& pair);

/// Factor implied by a BIO tag (+1 for *-rele, -1 for *-irrele, none for O).
Factor factor_of(Tag tag);

}  // namespace mkd
