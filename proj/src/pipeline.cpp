#include "mkd/pipeline.hpp"

#include <cmath>
#include <unordered_map>

#include "mkd/distill.hpp"
#include "mkd/log.hpp"

namespace mkd {

namespace {

constexpr std::uint64_t kUnlabeledStream = 0x756e6c;  // "unl"
constexpr std::uint64_t kTeacherStream = 0x7465616368;
constexpr std::uint64_t kRouteStream = 0x726f757465;

}  // namespace

std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& weights) {
  const double total = weights[0] + weights[1] + weights[2];
  const auto share = [&](double w) {
    return std::min(n, static_cast<std::size_t>(std::llround(static_cast<double>(n) * w / total)));
  };
  const std::size_t train = share(weights[0]);
  const std::size_t valid = std::min(n - train, share(weights[1]));
  return {train, valid, n - train - valid};
}

DatasetRow to_row(const GeneratedPair& pair) {
  DatasetRow row;
  row.pair = pair.pair;
  row.label = pair.label;
  row.cot = serialize_cot(pair.cot);
  row.query_frequency = pair.query_frequency;
  return row;
}

GeneratedDataset generate_dataset(const GenConfig& cfg, const Vocabulary& vocab) {
  cfg.validate();
  GeneratedDataset out;
  out.catalog = generate_catalog(cfg, vocab);
  const auto pairs = generate_pairs(out.catalog, cfg, vocab);
  const auto sizes = split_sizes(pairs.size(), cfg.split);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& target = i < sizes[0] ? out.train : i < sizes[0] + sizes[1] ? out.valid : out.test;
    target.push_back(to_row(pairs[i]));
  }
  if (cfg.n_unlabeled > 0) {
    GenConfig ucfg = cfg;
    ucfg.seed = mix_seed(cfg.seed, kUnlabeledStream, 0);
    for (auto& gp : generate_pairs(out.catalog, ucfg, vocab, cfg.n_unlabeled)) {
      DatasetRow row;
      row.pair = gp.pair;
      row.pair.pair_id = "u" + std::to_string(cfg.seed) + "-" + std::to_string(out.unlabeled.size());
      row.query_frequency = gp.query_frequency;
      out.unlabeled.push_back(std::move(row));
    }
  }
  return out;
}

std::vector<DatasetRow> teach(const std::vector<DatasetRow>& rows, const GenConfig& cfg, const Vocabulary& vocab,
                              TeachStats* stats) {
  TeachStats local;
  TeachStats& s = stats ? *stats : local;
  const RuleAnnotator annotator(vocab);
  std::vector<DatasetRow> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    ++s.input;
    const std::uint64_t key = hash_string(row.pair.pair_id);
    CotAnnotation reference;
    RelevanceLabel target;
    if (row.label) {
      if (!row.cot) {
        // Without a reference CoT the oracle falls back to reading the text.
        auto annotated = annotator.annotate(row.pair);
        if (!annotated) {
          ++s.dropped_bad_cot;
          log().warn("teach: dropping {}: no CoT and the text is not readable", row.pair.pair_id);
          continue;
        }
        reference = *annotated;
      } else {
        try {
          reference = parse_cot(*row.cot);
        } catch (const std::exception& e) {
          ++s.dropped_bad_cot;
          log().warn("teach: dropping {}: gold CoT does not parse ({})", row.pair.pair_id, e.what());
          continue;
        }
      }
      target = *row.label;
    } else {
      auto annotated = annotator.annotate(row.pair);
      if (!annotated) {
        ++s.dropped_unannotated;
        log().info("teach: dropping {}: no known requirement in the query", row.pair.pair_id);
        continue;
      }
      reference = *annotated;
      target = annotated->judgment;
    }
    const TeacherOutput teacher =
        oracle_predict(row.pair, target, reference, cfg.teacher_noise, mix_seed(cfg.seed, kTeacherStream, key));
    const auto routes =
        sample_cot_routes(row.pair, teacher.cot, cfg.routes, cfg.route_flip_rate, mix_seed(cfg.seed, kRouteStream, key));
    // Labeled rows align with the human label; unlabeled rows with the teacher.
    const Selection selected = self_consistency_select(routes, row.label ? *row.label : teacher.judgment);
    s.malformed_routes += selected.malformed;
    if (!selected.cot) {
      ++s.dropped_unaligned;
      log().info("teach: dropping {}: no sampled route agrees with the target judgment", row.pair.pair_id);
      continue;
    }
    DatasetRow taught = row;
    taught.cot = serialize_cot(*selected.cot);
    taught.teacher_score = project_score(teacher.p_good, teacher.p_bad, 1.0);
    out.push_back(std::move(taught));
    ++s.kept;
  }
  return out;
}

namespace {

SidecarRow derive_one(const DatasetRow& row, const CotAnnotation& cot) {
  auto tags = derive_bio_tags(cot, row.pair);
  auto factors = derive_reg_factors(cot, row.pair);
  SidecarRow side;
  side.pair_id = row.pair.pair_id;
  side.query_tags = std::move(tags.query);
  side.title_tags = std::move(tags.title);
  side.query_factors = std::move(factors.query);
  side.title_factors = std::move(factors.title);
  side.warnings = std::move(tags.warnings);
  return side;
}

}  // namespace

std::vector<SidecarRow> derive_sidecar(const std::vector<DatasetRow>& rows, ParseStats* stats) {
  ParseStats local;
  ParseStats& s = stats ? *stats : local;
  std::vector<SidecarRow> out;
  for (const auto& row : rows) {
    ++s.records;
    if (!row.cot) {
      ++s.malformed;
      log().warn("parse-cot: {} has no CoT text", row.pair.pair_id);
      continue;
    }
    try {
      const CotAnnotation cot = parse_cot(*row.cot);
      SidecarRow side = derive_one(row, cot);
      for (const auto& w : side.warnings)
        log().warn("parse-cot: {}: phrase '{}' not found on the {} side", row.pair.pair_id, w.phrase,
                   w.side == Side::query ? "query" : "title");
      s.span_warnings += side.warnings.size();
      out.push_back(std::move(side));
    } catch (const MalformedCot& e) {
      ++s.malformed;
      log().warn("parse-cot: {}: {}", row.pair.pair_id, e.what());
    } catch (const UnknownAspect& e) {
      ++s.malformed;
      log().warn("parse-cot: {}: {}", row.pair.pair_id, e.what());
    }
  }
  return out;
}

std::vector<TrainRecord> to_train_records(const std::vector<DatasetRow>& rows, const std::vector<SidecarRow>& sidecar,
                                          bool derive_missing) {
  std::unordered_map<std::string, const SidecarRow*> by_id;
  for (const auto& s : sidecar) by_id.emplace(s.pair_id, &s);
  std::vector<TrainRecord> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    TrainRecord r;
    r.pair = row.pair;
    r.gold = row.label;
    r.teacher_score = row.teacher_score;
    r.query_frequency = row.query_frequency;
    std::optional<CotAnnotation> cot;
    if (row.cot) {
      try {
        cot = parse_cot(*row.cot);
      } catch (const std::exception&) {
        cot.reset();
      }
    }
    r.cot = cot;
    std::optional<SidecarRow> derived;
    const SidecarRow* side = nullptr;
    if (auto it = by_id.find(row.pair.pair_id); it != by_id.end()) {
      side = it->second;
    } else if (derive_missing && cot) {
      derived = derive_one(row, *cot);
      side = &*derived;
    }
    if (side) {
      if (side->query_tags.size() == row.pair.query.size() && side->title_tags.size() == row.pair.title.size()) {
        r.query_tags = side->query_tags;
        r.title_tags = side->title_tags;
      }
      if (side->query_factors.size() == row.pair.query.size() &&
          side->title_factors.size() == row.pair.title.size()) {
        r.query_factors = side->query_factors;
        r.title_factors = side->title_factors;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

AblationData prepare_ablation_data(const RunConfig& config) {
  const Vocabulary vocab = Vocabulary::load(config.vocab_dir);
  const GeneratedDataset data = generate_dataset(config.gen, vocab);
  TeachStats labeled_stats, pseudo_stats;
  const auto taught_train = teach(data.train, config.gen, vocab, &labeled_stats);
  const auto taught_pseudo = teach(data.unlabeled, config.gen, vocab, &pseudo_stats);
  log().info("teach: labeled kept {}/{}, pseudo kept {}/{}", labeled_stats.kept, labeled_stats.input,
             pseudo_stats.kept, pseudo_stats.input);
  AblationData out;
  out.labeled = to_train_records(taught_train, derive_sidecar(taught_train));
  out.pseudo = to_train_records(taught_pseudo, derive_sidecar(taught_pseudo));
  out.validation = to_train_records(data.valid);
  out.test = to_train_records(data.test);
  return out;
}

}  // namespace mkd
