#include "mkd/cotlang.hpp"

#include <algorithm>
#include <cctype>

namespace mkd {

MalformedCot::MalformedCot(std::size_t position, std::string expected)
    : std::runtime_error("malformed CoT at offset " + std::to_string(position) + ": expected " + expected),
      position_(position),
      expected_(std::move(expected)) {}

UnknownAspect::UnknownAspect(std::string name)
    : std::runtime_error("unknown aspect '" + name + "'"), name_(std::move(name)) {}

// ---------------------------------------------------------------------------
// Serializer

namespace {

std::string label_text(const RelevanceLabel& label) {
  if (label.value == Judgment::good) return "Good";
  if (!label.reason) return "Bad";
  return "Bad-" + std::string(aspect_name(*label.reason)) + " Mismatch";
}

}  // namespace

std::string serialize_cot(const CotAnnotation& cot) {
  std::string out = "Thinking: query has ";
  for (std::size_t i = 0; i < cot.requirements.size(); ++i) {
    if (i > 0) out += ", ";
    out += aspect_name(cot.requirements[i].aspect);
    out += " requirement: ";
    out += cot.requirements[i].phrase;
  }
  out += "; ";
  for (const auto& m : cot.matches) {
    if (m.verdict == Verdict::missing) {
      out += aspect_name(m.aspect);
      out += " requirement is missing; ";
      continue;
    }
    out += "ad in ";
    out += aspect_name(m.aspect);
    out += ": ";
    out += m.title_phrase.value_or("");
    out += m.verdict == Verdict::match ? ", matches; " : ", mismatches; ";
  }
  if (cot.judgment.value == Judgment::bad && cot.judgment.reason) {
    out += aspect_name(*cot.judgment.reason);
    out += " requirement in query is not met. ";
  }
  out += "Final judgment: ";
  out += label_text(cot.judgment);
  return out;
}

// ---------------------------------------------------------------------------
// Parser

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_word(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; }
char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

class CotParser {
 public:
  explicit CotParser(std::string_view text) : text_(text) {}

  CotAnnotation parse() {
    CotAnnotation cot;
    expect_keyword("thinking", "'Thinking:'");
    expect_char(':', "':' after 'Thinking'");
    expect_keyword("query has", "'query has'");
    parse_requirements(cot);
    for (;;) {
      skip_ws();
      if (at_end()) throw MalformedCot(pos_, "'Final judgment:'");
      if (try_keyword("final judgment")) {
        expect_char(':', "':' after 'Final judgment'");
        cot.judgment = parse_final();
        return cot;
      }
      if (try_keyword("ad in")) {
        parse_ad_clause(cot);
      } else {
        parse_requirement_clause(cot);
      }
      skip_separator();
    }
  }

 private:
  void skip_ws() {
    while (pos_ < text_.size() && is_space(text_[pos_])) ++pos_;
  }

  bool at_end() const { return pos_ >= text_.size(); }

  // Matches a (possibly multi-word) keyword case-insensitively at the cursor.
  // Words are separated by any whitespace run; a word boundary must follow.
  bool keyword_at(std::size_t at, std::string_view kw, std::size_t* end) const {
    std::size_t p = at;
    std::size_t k = 0;
    while (k < kw.size()) {
      if (kw[k] == ' ') {
        if (p >= text_.size() || !is_space(text_[p])) return false;
        while (p < text_.size() && is_space(text_[p])) ++p;
        ++k;
        continue;
      }
      if (p >= text_.size() || lower(text_[p]) != kw[k]) return false;
      ++p;
      ++k;
    }
    if (is_word(kw.back()) && p < text_.size() && is_word(text_[p])) return false;
    *end = p;
    return true;
  }

  bool try_keyword(std::string_view kw) {
    skip_ws();
    std::size_t end = 0;
    if (!keyword_at(pos_, kw, &end)) return false;
    pos_ = end;
    return true;
  }

  void expect_keyword(std::string_view kw, const std::string& expected) {
    if (!try_keyword(kw)) throw MalformedCot(pos_, expected);
  }

  bool try_char(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect_char(char c, const std::string& expected) {
    if (!try_char(c)) throw MalformedCot(pos_, expected);
  }

  void skip_separator() {
    skip_ws();
    if (pos_ < text_.size() && (text_[pos_] == ';' || text_[pos_] == ',' || text_[pos_] == '.')) ++pos_;
  }

  // Reads the aspect name that precedes `kw` without crossing a delimiter.
  Aspect read_aspect_before(std::string_view kw, const std::string& expected) {
    skip_ws();
    const std::size_t start = pos_;
    for (std::size_t p = start; p < text_.size(); ++p) {
      const char c = text_[p];
      if (c == ',' || c == ';' || c == ':' || c == '.') break;
      const bool word_start = p == start || is_space(text_[p - 1]) || text_[p - 1] == '-';
      std::size_t end = 0;
      if (word_start && p > start && keyword_at(p, kw, &end)) {
        const std::string_view name = text_.substr(start, p - start);
        auto aspect = parse_aspect(name);
        if (!aspect) throw UnknownAspect(normalize_phrase(name));
        pos_ = p;
        return *aspect;
      }
    }
    throw MalformedCot(start, expected);
  }

  // Reads an aspect name terminated by `stop` (not consumed).
  Aspect read_aspect_until(char stop, const std::string& expected) {
    skip_ws();
    const std::size_t start = pos_;
    std::size_t p = start;
    while (p < text_.size() && text_[p] != stop && text_[p] != ',' && text_[p] != ';') ++p;
    if (p >= text_.size() || text_[p] != stop || p == start) throw MalformedCot(p, expected);
    const std::string_view name = text_.substr(start, p - start);
    auto aspect = parse_aspect(name);
    if (!aspect) throw UnknownAspect(normalize_phrase(name));
    pos_ = p;
    return *aspect;
  }

  std::string read_phrase() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < text_.size() && text_[pos_] != ',' && text_[pos_] != ';') ++pos_;
    std::string phrase = normalize_phrase(text_.substr(start, pos_ - start));
    if (phrase.empty()) throw MalformedCot(start, "a non-empty phrase");
    if (pos_ >= text_.size()) throw MalformedCot(pos_, "',' or ';' after phrase");
    return phrase;
  }

  void parse_requirements(CotAnnotation& cot) {
    for (;;) {
      const Aspect aspect = read_aspect_before("requirement", "'<aspect> requirement'");
      expect_keyword("requirement", "'requirement'");
      expect_char(':', "':' after 'requirement'");
      std::string phrase = read_phrase();
      cot.requirements.push_back({aspect, std::move(phrase)});
      if (try_char(',')) continue;
      expect_char(';', "';' after requirement list");
      return;
    }
  }

  const Requirement& requirement_for(const CotAnnotation& cot, Aspect aspect, std::size_t at) const {
    auto it = std::find_if(cot.requirements.begin(), cot.requirements.end(),
                           [&](const Requirement& r) { return r.aspect == aspect; });
    if (it == cot.requirements.end()) throw MalformedCot(at, "an aspect declared in the requirement list");
    return *it;
  }

  void parse_ad_clause(CotAnnotation& cot) {
    const std::size_t at = pos_;
    const Aspect aspect = read_aspect_until(':', "'<aspect>:' after 'ad in'");
    expect_char(':', "':'");
    std::string phrase = read_phrase();
    expect_char(',', "',' before verdict");
    Verdict verdict;
    if (try_keyword("mismatches") || try_keyword("mismatch")) {
      verdict = Verdict::mismatch;
    } else if (try_keyword("matches") || try_keyword("match")) {
      verdict = Verdict::match;
    } else {
      throw MalformedCot(pos_, "'matches' or 'mismatches'");
    }
    const Requirement& req = requirement_for(cot, aspect, at);
    cot.matches.push_back({aspect, req.phrase, std::move(phrase), verdict});
  }

  void parse_requirement_clause(CotAnnotation& cot) {
    const std::size_t at = pos_;
    const Aspect aspect =
        read_aspect_before("requirement", "'ad in', '<aspect> requirement' or 'Final judgment:'");
    expect_keyword("requirement", "'requirement'");
    if (try_keyword("is missing")) {
      const Requirement& req = requirement_for(cot, aspect, at);
      cot.matches.push_back({aspect, req.phrase, std::nullopt, Verdict::missing});
      return;
    }
    // "<aspect> requirement in query is not met" restates the conclusion and
    // carries no extra information.
    expect_keyword("in query is not met", "'is missing' or 'in query is not met'");
  }

  RelevanceLabel parse_final() {
    RelevanceLabel label;
    if (try_keyword("good")) {
      label = RelevanceLabel::good();
    } else if (try_keyword("bad")) {
      label = RelevanceLabel::bad();
      if (try_char('-')) {
        label.reason = read_aspect_before("mismatch", "'<aspect> Mismatch'");
        expect_keyword("mismatch", "'Mismatch'");
      }
    } else {
      throw MalformedCot(pos_, "'Good' or 'Bad'");
    }
    try_char('.');
    skip_ws();
    if (!at_end()) throw MalformedCot(pos_, "end of text");
    return label;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

CotAnnotation parse_cot(std::string_view text) { return CotParser(text).parse(); }

// ---------------------------------------------------------------------------
// Grounding

std::optional<Span> locate_span(std::string_view phrase, const std::vector<Token>& tokens) {
  const std::vector<Token> needle = whitespace_tokenize(phrase);
  if (needle.empty() || needle.size() > tokens.size()) return std::nullopt;
  for (std::size_t start = 0; start + needle.size() <= tokens.size(); ++start) {
    if (std::equal(needle.begin(), needle.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start))) {
      return Span{start, start + needle.size()};
    }
  }
  return std::nullopt;
}

Factor factor_of(Tag tag) {
  switch (tag) {
    case Tag::b_rele:
    case Tag::i_rele:
      return Factor::positive;
    case Tag::b_irrele:
    case Tag::i_irrele:
      return Factor::negative;
    case Tag::o:
      return Factor::none;
  }
  return Factor::none;
}

namespace {

struct Evidence {
  std::string phrase;
  bool relevant;
};

struct PlacedSpan {
  Span span;
  bool relevant;
};

// Longest-first, then leftmost placement; overlapping spans are dropped.
std::vector<PlacedSpan> place_spans(const std::vector<Evidence>& evidence, const std::vector<Token>& tokens,
                                    Side side, std::vector<SpanNotFound>& warnings) {
  struct Candidate {
    Span span;
    bool relevant;
    std::size_t order;
  };
  std::vector<Candidate> found;
  for (std::size_t i = 0; i < evidence.size(); ++i) {
    auto span = locate_span(evidence[i].phrase, tokens);
    if (!span) {
      warnings.push_back({evidence[i].phrase, side});
      continue;
    }
    found.push_back({*span, evidence[i].relevant, i});
  }
  std::stable_sort(found.begin(), found.end(), [](const Candidate& a, const Candidate& b) {
    const std::size_t la = a.span.second - a.span.first;
    const std::size_t lb = b.span.second - b.span.first;
    if (la != lb) return la > lb;
    return a.span.first < b.span.first;
  });
  std::vector<bool> taken(tokens.size(), false);
  std::vector<PlacedSpan> placed;
  for (const auto& c : found) {
    bool overlap = false;
    for (std::size_t i = c.span.first; i < c.span.second; ++i) overlap = overlap || taken[i];
    if (overlap) continue;
    for (std::size_t i = c.span.first; i < c.span.second; ++i) taken[i] = true;
    placed.push_back({c.span, c.relevant});
  }
  return placed;
}

TagSequence to_tags(const std::vector<PlacedSpan>& spans, std::size_t n) {
  TagSequence seq{std::vector<Tag>(n, Tag::o)};
  for (const auto& s : spans) {
    for (std::size_t i = s.span.first; i < s.span.second; ++i) {
      const bool begin = i == s.span.first;
      seq.tags[i] = s.relevant ? (begin ? Tag::b_rele : Tag::i_rele) : (begin ? Tag::b_irrele : Tag::i_irrele);
    }
  }
  return seq;
}

RegFactorSequence to_factors(const std::vector<PlacedSpan>& spans, std::size_t n) {
  RegFactorSequence seq{std::vector<Factor>(n, Factor::none)};
  for (const auto& s : spans) {
    for (std::size_t i = s.span.first; i < s.span.second; ++i) {
      seq.factors[i] = s.relevant ? Factor::positive : Factor::negative;
    }
  }
  return seq;
}

struct Grounding {
  std::vector<PlacedSpan> query;
  std::vector<PlacedSpan> title;
  std::vector<SpanNotFound> warnings;
};

Grounding ground(const CotAnnotation& cot, const QueryItemPair& pair) {
  std::vector<Evidence> query_evidence;
  for (const auto& req : cot.requirements) {
    const AspectMatch* m = cot.match_for(req.aspect);
    query_evidence.push_back({req.phrase, m != nullptr && m->verdict == Verdict::match});
  }
  std::vector<Evidence> title_evidence;
  for (const auto& m : cot.matches) {
    if (m.verdict == Verdict::missing || !m.title_phrase) continue;
    title_evidence.push_back({*m.title_phrase, m.verdict == Verdict::match});
  }
  Grounding g;
  g.query = place_spans(query_evidence, pair.query, Side::query, g.warnings);
  g.title = place_spans(title_evidence, pair.title, Side::title, g.warnings);
  return g;
}

}  // namespace

DerivedTags derive_bio_tags(const CotAnnotation& cot, const QueryItemPair& pair) {
  Grounding g = ground(cot, pair);
  return {to_tags(g.query, pair.query.size()), to_tags(g.title, pair.title.size()), std::move(g.warnings)};
}

DerivedFactors derive_reg_factors(const CotAnnotation& cot, const QueryItemPair& pair) {
  Grounding g = ground(cot, pair);
  return {to_factors(g.query, pair.query.size()), to_factors(g.title, pair.title.size()),
          std::move(g.warnings)};
}

}  // namespace mkd
