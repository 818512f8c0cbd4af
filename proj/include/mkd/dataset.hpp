#pragma once

// Line-delimited JSON dataset and sidecar formats, run configuration and the
// output-directory lock.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkd/cotlang.hpp"
#include "mkd/distill.hpp"
#include "mkd/domain.hpp"
#include "mkd/encoders.hpp"
#include "mkd/synth.hpp"

namespace mkd {

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& source, std::size_t line, const std::string& what);
};

/// One dataset line: {pair_id, query, title, label?, reason?, cot?,
/// teacher_score?, query_frequency}. `cot` stays unparsed text.
struct DatasetRow {
  QueryItemPair pair;
  std::optional<RelevanceLabel> label;
  std::optional<std::string> cot;
  std::optional<double> teacher_score;
  std::uint64_t query_frequency = 0;

  bool operator==(const DatasetRow&) const = default;
};

std::string format_row(const DatasetRow& row);
/// Throws DatasetError (with `source` and `line`) on malformed JSON, missing
/// or mistyped fields, and unknown fields.
DatasetRow parse_row(std::string_view text, const std::string& source = "<input>", std::size_t line = 0);

std::vector<DatasetRow> read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRow>& rows);

/// Token-level supervision derived from a row's CoT, keyed by pair id.
struct SidecarRow {
  std::string pair_id;
  TagSequence query_tags;
  TagSequence title_tags;
  RegFactorSequence query_factors;
  RegFactorSequence title_factors;
  std::vector<SpanNotFound> warnings;

  bool operator==(const SidecarRow&) const = default;
};

std::string format_sidecar(const SidecarRow& row);
SidecarRow parse_sidecar(std::string_view text, const std::string& source = "<input>", std::size_t line = 0);
std::vector<SidecarRow> read_sidecar(const std::filesystem::path& path);
void write_sidecar(const std::filesystem::path& path, const std::vector<SidecarRow>& rows);

void write_catalog(const std::filesystem::path& path, const std::vector<CatalogItem>& catalog);

struct RunConfig {
  GenConfig gen;
  EncoderConfig encoder;
  /// Per-architecture loss weights; defaults follow LossWeights::defaults.
  LossWeights interaction_weights = LossWeights::defaults(Arch::interaction);
  LossWeights representation_weights = LossWeights::defaults(Arch::representation);
  TrainOptions train;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::uint64_t head_threshold = 10;
  std::filesystem::path vocab_dir = MKD_DATA_DIR "/vocab";

  const LossWeights& weights(Arch arch) const {
    return arch == Arch::interaction ? interaction_weights : representation_weights;
  }
  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  /// Unknown keys are rejected; relative paths resolve against `base_dir`.
  static RunConfig from_json(std::string_view text, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
  std::string to_json() const;
};

/// Exclusive lock file inside an output directory, released on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace mkd
