#pragma once

// Synthetic catalog/pair generation and the rule-based oracle teacher.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mkd/domain.hpp"

namespace mkd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-aspect value phrases plus title filler words, one phrase per line in
/// `<dir>/<aspect_id>.txt` and `<dir>/filler.txt`.
class Vocabulary {
 public:
  static Vocabulary load(const std::filesystem::path& dir);

  const std::vector<std::string>& values(Aspect aspect) const {
    return values_[static_cast<std::size_t>(aspect)];
  }
  const std::vector<std::string>& filler() const { return filler_; }

  /// Aspect owning the phrase, if it is a known value.
  std::optional<Aspect> aspect_of(std::string_view phrase) const;
  /// Longest phrase length in tokens.
  std::size_t max_phrase_tokens() const { return max_phrase_tokens_; }

 private:
  std::array<std::vector<std::string>, kNumAspects> values_;
  std::vector<std::string> filler_;
  std::unordered_map<std::string, Aspect> owner_;
  std::size_t max_phrase_tokens_ = 1;
};

struct GenConfig {
  std::uint64_t seed = 7;
  std::size_t n_items = 400;
  std::size_t n_pairs = 7000;
  /// Relative train/valid/test weights applied to n_pairs.
  std::array<double, 3> split = {5.0, 1.0, 1.0};
  std::size_t n_unlabeled = 5000;
  double mismatch_rate = 0.3;
  std::size_t min_aspects_per_query = 2;
  std::size_t max_aspects_per_query = 4;
  double zipf_exponent = 1.1;
  double teacher_noise = 0.05;
  double route_flip_rate = 0.3;
  std::size_t routes = 10;
  /// Share of Bad pairs whose failing aspect is dropped from the title
  /// (verdict "missing") instead of replaced. Never applies to category/product.
  double missing_share = 0.0;
  /// Probability that an optional aspect is present on a catalog item.
  double attribute_rate = 0.45;
  std::size_t max_filler = 3;
  std::size_t intents_per_item = 3;

  /// Throws ConfigError naming the first out-of-range field.
  void validate() const;
};

/// A title slot is either an attribute value or a filler word.
struct TitleSlot {
  std::optional<Aspect> aspect;
  std::string filler;
};

struct CatalogItem {
  std::string item_id;
  std::map<Aspect, std::string> attributes;
  std::vector<TitleSlot> layout;
  std::vector<Token> title;
};

std::vector<Token> render_title(const std::vector<TitleSlot>& layout,
                                const std::map<Aspect, std::string>& attributes);

std::vector<CatalogItem> generate_catalog(const GenConfig& cfg, const Vocabulary& vocab);

struct GeneratedPair {
  QueryItemPair pair;
  RelevanceLabel label;
  CotAnnotation cot;
  std::uint64_t query_frequency = 0;
};

/// Generates `count` pairs (cfg.n_pairs when omitted). query_frequency counts
/// how often the exact query string occurs in the returned sequence.
std::vector<GeneratedPair> generate_pairs(const std::vector<CatalogItem>& catalog, const GenConfig& cfg,
                                          const Vocabulary& vocab,
                                          std::optional<std::size_t> count = std::nullopt);

struct TeacherOutput {
  double p_good = 0.0;
  double p_bad = 0.0;
  RelevanceLabel judgment;
  CotAnnotation cot;
};

/// Residual mass kept for non-judgment vocabulary tokens: p_bad = (1 - p_good) * this.
inline constexpr double kJudgmentMass = 0.95;

/// Noisy oracle standing in for the fine-tuned teacher. `noise_seed` fixes the
/// per-pair jitter so repeated calls agree.
TeacherOutput oracle_predict(const QueryItemPair& pair, const RelevanceLabel& gold, const CotAnnotation& gold_cot,
                             double noise, std::uint64_t noise_seed);

/// Recovers the aspect-matching CoT from raw text using the vocabulary; plays
/// the teacher's role on unlabeled pairs. Returns nullopt when the query holds
/// no known value phrase.
class RuleAnnotator {
 public:
  explicit RuleAnnotator(const Vocabulary& vocab) : vocab_(&vocab) {}

  std::optional<CotAnnotation> annotate(const QueryItemPair& pair) const;

 private:
  struct Segment {
    Aspect aspect;
    std::string phrase;
  };
  std::vector<Segment> segment(const std::vector<Token>& tokens) const;

  const Vocabulary* vocab_;
};

/// Source of sampled CoT routes for a pair.
class RouteGenerator {
 public:
  virtual ~RouteGenerator() = default;
  virtual std::vector<std::string> sample(const QueryItemPair& pair, const CotAnnotation& reference,
                                          std::size_t k) = 0;
};

/// K routes; each, with probability `flip_rate`, has one match/mismatch
/// verdict toggled and its judgment recomputed.
std::vector<std::string> sample_cot_routes(const QueryItemPair& pair, const CotAnnotation& gold_cot,
                                           std::size_t k, double flip_rate, std::uint64_t seed);

class NoisyOracleRoutes : public RouteGenerator {
 public:
  NoisyOracleRoutes(double flip_rate, std::uint64_t seed) : flip_rate_(flip_rate), seed_(seed) {}

  std::vector<std::string> sample(const QueryItemPair& pair, const CotAnnotation& reference,
                                  std::size_t k) override;

 private:
  double flip_rate_;
  std::uint64_t seed_;
};

struct Selection {
  std::optional<CotAnnotation> cot;
  std::optional<std::size_t> index;
  std::size_t malformed = 0;
};

/// First route whose parsed judgment agrees with `target`; unparsable routes
/// are skipped and counted.
Selection self_consistency_select(const std::vector<std::string>& routes, const RelevanceLabel& target);

// Seeding helpers shared by generators.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);
std::uint64_t hash_string(std::string_view text);
/// Uniform double in [0,1) from 53 random bits.
double uniform01(std::mt19937_64& rng);
/// Uniform integer in [0, n).
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n);

}  // namespace mkd
