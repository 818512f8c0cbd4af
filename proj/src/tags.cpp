#include "mkd/tags.hpp"

namespace mkd {

namespace {

constexpr std::array<std::string_view, kNumTags> kTagNames = {"B-rele", "I-rele", "B-irrele",
                                                              "I-irrele", "O"};

}  // namespace

std::string_view tag_name(Tag tag) { return kTagNames[static_cast<std::size_t>(tag)]; }

std::optional<Tag> parse_tag(std::string_view name) {
  for (Tag t : kAllTags) {
    if (tag_name(t) == name) return t;
  }
  return std::nullopt;
}

bool tag_transition_allowed(std::optional<Tag> prev, Tag next) {
  if (next == Tag::i_rele) return prev == Tag::b_rele || prev == Tag::i_rele;
  if (next == Tag::i_irrele) return prev == Tag::b_irrele || prev == Tag::i_irrele;
  return true;
}

bool TagSequence::well_formed() const {
  std::optional<Tag> prev;
  for (Tag t : tags) {
    if (!tag_transition_allowed(prev, t)) return false;
    prev = t;
  }
  return true;
}

}  // namespace mkd
