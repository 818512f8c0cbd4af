#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mkd {

/// Token-level evidence labels. The numeric order is the CRF state index.
enum class Tag : std::uint8_t { b_rele = 0, i_rele = 1, b_irrele = 2, i_irrele = 3, o = 4 };

inline constexpr std::size_t kNumTags = 5;

inline constexpr std::array<Tag, kNumTags> kAllTags = {Tag::b_rele, Tag::i_rele, Tag::b_irrele,
                                                       Tag::i_irrele, Tag::o};

std::string_view tag_name(Tag tag);
std::optional<Tag> parse_tag(std::string_view name);

/// True when `next` may directly follow `prev` (std::nullopt = sequence start).
bool tag_transition_allowed(std::optional<Tag> prev, Tag next);

/// BIO sequence over the five evidence labels.
struct TagSequence {
  std::vector<Tag> tags;

  std::size_t size() const { return tags.size(); }
  bool well_formed() const;
  bool operator==(const TagSequence&) const = default;
};

/// Attention regulatory factor: +1 relevant evidence, -1 irrelevant evidence,
/// none for tokens outside any evidence span.
enum class Factor : std::int8_t { negative = -1, none = 0, positive = 1 };

struct RegFactorSequence {
  std::vector<Factor> factors;

  std::size_t size() const { return factors.size(); }
  bool operator==(const RegFactorSequence&) const = default;
};

}  // namespace mkd
