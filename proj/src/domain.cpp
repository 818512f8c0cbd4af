#include "mkd/domain.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

#include "mkd/log.hpp"

namespace mkd {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

struct AspectNames {
  Aspect aspect;
  std::string_view name;
  std::string_view id;
};

constexpr std::array<AspectNames, kNumAspects> kAspectNames = {{
    {Aspect::category, "category", "category"},
    {Aspect::product, "product", "product"},
    {Aspect::brand, "brand", "brand"},
    {Aspect::model_number, "model number", "model_number"},
    {Aspect::store, "store", "store"},
    {Aspect::color, "color", "color"},
    {Aspect::material, "material", "material"},
    {Aspect::main_parts, "main parts", "main_parts"},
    {Aspect::elegance, "elegance", "elegance"},
    {Aspect::season, "season", "season"},
    {Aspect::sets_and_singles, "sets and singles", "sets_and_singles"},
    {Aspect::gender, "gender", "gender"},
    {Aspect::age, "age", "age"},
    {Aspect::other_properties, "other properties", "other_properties"},
}};

}  // namespace

Token::Token(std::string_view text) {
  if (text.empty()) throw std::invalid_argument("token text is empty");
  text_.reserve(text.size());
  for (char c : text) {
    if (is_space(c)) throw std::invalid_argument("token contains whitespace: '" + std::string(text) + "'");
    text_.push_back(lower(c));
  }
}

std::vector<Token> whitespace_tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string join_tokens(const std::vector<Token>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t.text();
  }
  return out;
}

std::string normalize_phrase(std::string_view phrase) {
  std::string out;
  bool pending_space = false;
  for (char c : phrase) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(lower(c));
  }
  return out;
}

QueryItemPair make_pair(std::string pair_id, std::string_view query, std::string_view title,
                        const Tokenizer& tokenize) {
  QueryItemPair pair{tokenize(query), tokenize(title), std::move(pair_id)};
  if (pair.query.size() > kMaxQueryTokens) {
    log().warn("pair {}: query truncated from {} to {} tokens", pair.pair_id, pair.query.size(),
               kMaxQueryTokens);
    pair.query.erase(pair.query.begin() + kMaxQueryTokens, pair.query.end());
  }
  if (pair.title.size() > kMaxTitleTokens) {
    log().warn("pair {}: title truncated from {} to {} tokens", pair.pair_id, pair.title.size(),
               kMaxTitleTokens);
    pair.title.erase(pair.title.begin() + kMaxTitleTokens, pair.title.end());
  }
  return pair;
}

std::string_view aspect_name(Aspect aspect) { return kAspectNames[static_cast<std::size_t>(aspect)].name; }

std::string_view aspect_id(Aspect aspect) { return kAspectNames[static_cast<std::size_t>(aspect)].id; }

std::optional<Aspect> parse_aspect(std::string_view name) {
  const std::string norm = normalize_phrase(name);
  for (const auto& entry : kAspectNames) {
    if (norm == entry.name || norm == entry.id) return entry.aspect;
  }
  return std::nullopt;
}

const AspectMatch* CotAnnotation::match_for(Aspect aspect) const {
  auto it = std::find_if(matches.begin(), matches.end(),
                         [&](const AspectMatch& m) { return m.aspect == aspect; });
  return it == matches.end() ? nullptr : &*it;
}

RelevanceLabel conclude(const std::vector<Requirement>& requirements,
                        const std::vector<AspectMatch>& matches) {
  for (const auto& req : requirements) {
    auto it = std::find_if(matches.begin(), matches.end(),
                           [&](const AspectMatch& m) { return m.aspect == req.aspect; });
    if (it == matches.end() || it->verdict != Verdict::match) return RelevanceLabel::bad(req.aspect);
  }
  return RelevanceLabel::good();
}

std::vector<std::string> validate_annotation(const CotAnnotation& cot) {
  std::vector<std::string> out;
  if (cot.requirements.empty()) out.emplace_back("cot has no requirements");
  for (std::size_t i = 0; i < cot.requirements.size(); ++i) {
    const auto& req = cot.requirements[i];
    if (req.phrase.empty()) out.emplace_back("empty requirement phrase");
    for (std::size_t j = 0; j < i; ++j) {
      if (cot.requirements[j].aspect == req.aspect) {
        out.emplace_back("duplicate requirement aspect: " + std::string(aspect_name(req.aspect)));
      }
    }
  }
  for (const auto& m : cot.matches) {
    auto req = std::find_if(cot.requirements.begin(), cot.requirements.end(),
                            [&](const Requirement& r) { return r.aspect == m.aspect; });
    if (req == cot.requirements.end()) {
      out.emplace_back("match aspect not in requirements: " + std::string(aspect_name(m.aspect)));
    } else if (req->phrase != m.query_phrase) {
      out.emplace_back("match query phrase differs from requirement");
    }
    if (m.query_phrase.empty()) out.emplace_back("empty match query phrase");
    if (m.verdict == Verdict::missing && m.title_phrase.has_value()) {
      out.emplace_back("missing verdict carries a title phrase");
    }
    if (m.verdict != Verdict::missing && (!m.title_phrase.has_value() || m.title_phrase->empty())) {
      out.emplace_back("match/mismatch verdict lacks a title phrase");
    }
  }
  const RelevanceLabel& j = cot.judgment;
  if (j.value == Judgment::good && j.reason.has_value()) out.emplace_back("good judgment carries a reason");
  const RelevanceLabel implied = conclude(cot.requirements, cot.matches);
  if (implied.value != j.value) {
    out.emplace_back("judgment/verdict contradiction");
  } else if (j.value == Judgment::bad && j.reason != implied.reason) {
    out.emplace_back("bad judgment reason is not the first failing aspect");
  }
  return out;
}

std::vector<std::string> validate_record(const TrainRecord& record) {
  std::vector<std::string> out;
  const auto& pair = record.pair;
  const std::size_t lq = pair.query.size();
  const std::size_t lt = pair.title.size();
  if (lq == 0 || lq > kMaxQueryTokens) out.emplace_back("query length out of bounds");
  if (lt == 0 || lt > kMaxTitleTokens) out.emplace_back("title length out of bounds");
  if (pair.pair_id.empty()) out.emplace_back("empty pair id");
  if (record.gold && record.gold->value == Judgment::good && record.gold->reason) {
    out.emplace_back("good label carries a reason");
  }
  if (record.cot) {
    auto cot_violations = validate_annotation(*record.cot);
    out.insert(out.end(), cot_violations.begin(), cot_violations.end());
    if (record.gold && record.gold->value != record.cot->judgment.value) {
      out.emplace_back("gold label disagrees with cot judgment");
    }
  }
  if (record.teacher_score && !(*record.teacher_score > 0.0 && *record.teacher_score < 1.0)) {
    out.emplace_back("teacher score outside (0,1)");
  }
  auto check_tags = [&](const std::optional<TagSequence>& tags, std::size_t n) {
    if (!tags) return;
    if (tags->size() != n) out.emplace_back("tag length mismatch");
    if (!tags->well_formed()) out.emplace_back("tag sequence is not BIO well-formed");
  };
  check_tags(record.query_tags, lq);
  check_tags(record.title_tags, lt);
  if (record.query_factors && record.query_factors->size() != lq) out.emplace_back("factor length mismatch");
  if (record.title_factors && record.title_factors->size() != lt) out.emplace_back("factor length mismatch");
  return out;
}

}  // namespace mkd
