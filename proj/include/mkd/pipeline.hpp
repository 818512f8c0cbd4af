#pragma once

// End-to-end data preparation: generation, teaching, CoT parsing and
// assembly of training records.

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "mkd/dataset.hpp"
#include "mkd/eval.hpp"
#include "mkd/synth.hpp"

namespace mkd {

struct GeneratedDataset {
  std::vector<CatalogItem> catalog;
  std::vector<DatasetRow> train;
  std::vector<DatasetRow> valid;
  std::vector<DatasetRow> test;
  /// No label, no CoT.
  std::vector<DatasetRow> unlabeled;
};

/// Split sizes for n records under relative weights; the last split takes
/// the rounding remainder.
std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& weights);

GeneratedDataset generate_dataset(const GenConfig& cfg, const Vocabulary& vocab);

DatasetRow to_row(const GeneratedPair& pair);

struct TeachStats {
  std::size_t input = 0;
  std::size_t kept = 0;
  /// Labeled rows whose routes never agreed with the gold label.
  std::size_t dropped_unaligned = 0;
  /// Unlabeled rows the rule annotator could not read.
  std::size_t dropped_unannotated = 0;
  /// Labeled rows whose gold CoT text failed to parse.
  std::size_t dropped_bad_cot = 0;
  std::size_t malformed_routes = 0;
};

/// Runs the oracle teacher over rows. Labeled rows keep their label and
/// receive the first gold-aligned sampled route; unlabeled rows are read by
/// the rule annotator and receive the first route agreeing with the teacher.
/// Every kept row carries teacher_score = project_score(p_good, p_bad, 1).
std::vector<DatasetRow> teach(const std::vector<DatasetRow>& rows, const GenConfig& cfg, const Vocabulary& vocab,
                              TeachStats* stats = nullptr);

struct ParseStats {
  std::size_t records = 0;
  std::size_t malformed = 0;
  std::size_t span_warnings = 0;
};

/// Parses each row's CoT and derives BIO tags and regulatory factors. Rows
/// with absent or unparsable CoT are counted as malformed and skipped.
std::vector<SidecarRow> derive_sidecar(const std::vector<DatasetRow>& rows, ParseStats* stats = nullptr);

/// Joins rows with their sidecar entries (matched by pair id). When
/// `derive_missing` is set, rows without a sidecar entry but with parsable
/// CoT get their supervision derived in place.
std::vector<TrainRecord> to_train_records(const std::vector<DatasetRow>& rows,
                                          const std::vector<SidecarRow>& sidecar = {}, bool derive_missing = false);

/// Generates, teaches and parses everything an ablation needs, in memory.
AblationData prepare_ablation_data(const RunConfig& config);

}  // namespace mkd
