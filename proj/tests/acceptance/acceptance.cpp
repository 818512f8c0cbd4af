// Acceptance gate: one pass/fail line per criterion. Exit status is nonzero
// when any criterion fails. Pass criterion numbers as arguments to run a
// subset, e.g. `acceptance 1 2 3`.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "generators.hpp"
#include "mkd/cotlang.hpp"
#include "mkd/dataset.hpp"
#include "mkd/distill.hpp"
#include "mkd/eval.hpp"
#include "mkd/gradcheck_suite.hpp"
#include "mkd/pipeline.hpp"
#include "mkd/synth.hpp"
#include "oracles.hpp"

namespace {

using namespace mkd;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int digits = 6) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

// --- 1: score projection and score distillation -----------------------------

Outcome formula_fidelity() {
  const double e = std::exp(1.0);
  const double s = project_score(1.0, 0.0, 1.0);
  bool symmetric = true;
  for (double p : {0.0, 0.25, 0.5, 0.9, 1.0})
    for (double t : {0.5, 1.0, 2.0, 4.0}) symmetric = symmetric && project_score(p, p, t) == 0.5;
  // Hand evaluation of the Bernoulli KL at (0.7310586, 0.5).
  const double st = 0.7310586;
  const double hand_kl = st * std::log(st / 0.5) + (1.0 - st) * std::log((1.0 - st) / 0.5);
  const double kl = score_distill_loss(0.7310586, 0.5, 1.0);

  Outcome v;
  v.pass = std::abs(s - e / (1.0 + e)) <= 1e-6 && std::abs(s - 0.7310586) <= 1e-6 && symmetric &&
           std::abs(kl - 0.11096) <= 1e-4 && std::abs(kl - hand_kl) <= 1e-12;
  v.detail = "project_score(1,0,1)=" + fmt(s, 10) + ", symmetric=" + (symmetric ? "yes" : "no") +
             ", KL=" + fmt(kl, 8);
  return v;
}

// --- 2: CRF against exhaustive enumeration -----------------------------------

Outcome crf_oracle() {
  std::mt19937_64 rng(20241);
  double worst = 0.0;
  std::size_t decode_mismatches = 0;
  constexpr std::size_t kInstances = 500;
  for (std::size_t i = 0; i < kInstances; ++i) {
    const std::size_t len = 1 + uniform_index(rng, 6);
    CrfParams params;
    params.transitions = oracle::random_matrix(rng, kNumTags, kNumTags, 1.0);
    params.start = oracle::random_matrix(rng, 1, kNumTags, 1.0);
    params.end = oracle::random_matrix(rng, 1, kNumTags, 1.0);
    const tensor::Tensor em = oracle::random_matrix(rng, len, kNumTags, 1.5);
    const TagSequence gold = oracle::random_path(rng, len);
    const auto brute = oracle::brute_crf(em, params.transitions, params.start, params.end, gold);
    worst = std::max(worst, std::abs(crf_nll(em, params, gold) - brute.nll));
    decode_mismatches += crf_decode(em, params) != brute.best;
  }
  Outcome v;
  v.pass = worst <= 1e-8 && decode_mismatches == 0;
  v.detail = std::to_string(kInstances) + " instances, max |nll diff|=" + fmt(worst, 3) +
             ", decode mismatches=" + std::to_string(decode_mismatches);
  return v;
}

// --- 3: gradient suite ---------------------------------------------------------

Outcome gradient_suite() {
  auto cases = loss_cases();
  for (auto& c : encoder_cases()) cases.push_back(std::move(c));
  const auto rows = run_gradcheck(cases, 1e-4, 20, 1, kGradCheckTolerance);
  Outcome v;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& row : rows) {
    std::cout << "    " << row.name << ": max rel err " << fmt(row.worst.max_rel_error, 3)
              << (row.passed ? "" : "  FAIL at " + row.worst.worst_parameter) << "\n";
    if (!row.passed) v.pass = false;
    if (!(row.worst.max_rel_error <= worst)) {
      worst = row.worst.max_rel_error;
      worst_name = row.name;
    }
  }
  v.detail = std::to_string(rows.size()) + " entries x 20 instances at eps 1e-4, worst " + fmt(worst, 3) + " (" +
             worst_name + ")";
  return v;
}

// --- 4: metric oracles -----------------------------------------------------------

Outcome metric_oracles() {
  std::mt19937_64 rng(4004);
  double worst_auc = 0.0, worst_ap = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + uniform_index(rng, 199);
    const ScoredSet set = oracle::random_scored_set(rng, n, 1 + uniform_index(rng, 40));
    worst_auc = std::max(worst_auc, std::abs(roc_auc(set) - oracle::pairwise_auc(set)));
    worst_ap = std::max(worst_ap, std::abs(neg_pr_auc(set) - oracle::stepwise_ap(set)));
  }
  ScoredSet example;
  const auto G = RelevanceLabel::good(), B = RelevanceLabel::bad();
  example.push_back(0.9, G, 0);
  example.push_back(0.5, G, 0);
  example.push_back(0.5, B, 0);
  example.push_back(0.2, B, 0);
  const double ex = roc_auc(example);
  Outcome v;
  v.pass = worst_auc <= 1e-9 && worst_ap <= 1e-9 && ex == 0.875;
  v.detail = "100 sets: max ROC diff " + fmt(worst_auc, 3) + ", max AP diff " + fmt(worst_ap, 3) +
             "; example = " + fmt(ex, 10);
  return v;
}

// --- 5: CoT grammar ----------------------------------------------------------------

Outcome cot_round_trip() {
  std::mt19937_64 rng(5005);
  std::size_t failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const CotAnnotation cot = gen::random_annotation(rng);
    try {
      failures += parse_cot(serialize_cot(cot)) != cot;
    } catch (const std::exception&) {
      ++failures;
    }
  }

  bool golden_ok = true;
  std::string golden_note;
  try {
    const auto case1 = read_dataset(std::string(MKD_DATA_DIR) + "/golden/case1.jsonl").at(0);
    const auto c1 = parse_cot(*case1.cot);
    golden_ok = golden_ok && c1.requirements.size() == 3 &&
                c1.requirements[0] == Requirement{Aspect::category, "pajamas"} &&
                c1.requirements[1] == Requirement{Aspect::material, "modal"} &&
                c1.requirements[2] == Requirement{Aspect::gender, "women"} && c1.matches.size() == 3 &&
                c1.matches[1].verdict == mkd::Verdict::mismatch && c1.matches[1].title_phrase == "cotton" &&
                c1.judgment == RelevanceLabel::bad(Aspect::material);
    const auto tags = derive_bio_tags(c1, case1.pair);
    const std::vector<Tag> want = {Tag::b_irrele, Tag::b_rele, Tag::o, Tag::b_rele};
    golden_ok = golden_ok && tags.query.tags == want;

    const auto case2 = read_dataset(std::string(MKD_DATA_DIR) + "/golden/case2.jsonl").at(0);
    const auto c2 = parse_cot(*case2.cot);
    golden_ok = golden_ok && c2.requirements.size() == 2 &&
                c2.requirements[0] == Requirement{Aspect::category, "toiletries"} &&
                c2.requirements[1] == Requirement{Aspect::product, "make curly hair straight"} &&
                c2.matches.size() == 2 && c2.matches[1].title_phrase == "hair straightener" &&
                c2.judgment == RelevanceLabel::good();
  } catch (const std::exception& e) {
    golden_ok = false;
    golden_note = std::string(" (") + e.what() + ")";
  }
  Outcome v;
  v.pass = failures == 0 && golden_ok;
  v.detail = "1000 round trips, " + std::to_string(failures) + " failures; golden cases " +
             (golden_ok ? "match" : "differ") + golden_note;
  return v;
}

// --- 6: self-consistency ------------------------------------------------------------

Outcome self_consistency() {
  const Vocabulary vocab = Vocabulary::load(std::string(MKD_DATA_DIR) + "/vocab");
  GenConfig cfg;
  cfg.route_flip_rate = 0.3;
  cfg.routes = 10;
  const auto catalog = generate_catalog(cfg, vocab);
  const auto pairs = generate_pairs(catalog, cfg, vocab, 10000);
  std::size_t dropped = 0, missed = 0, wrong_index = 0;
  for (const auto& p : pairs) {
    const auto routes = sample_cot_routes(p.pair, p.cot, cfg.routes, cfg.route_flip_rate,
                                          mix_seed(cfg.seed, hash_string(p.pair.pair_id), 0xc07));
    // First aligned route by direct inspection.
    std::optional<std::size_t> first;
    for (std::size_t i = 0; i < routes.size() && !first; ++i) {
      try {
        if (parse_cot(routes[i]).judgment.value == p.label.value) first = i;
      } catch (const std::exception&) {
      }
    }
    const Selection sel = self_consistency_select(routes, p.label);
    if (!sel.cot) ++dropped;
    if (first && !sel.cot) ++missed;
    if (first && sel.index != first) ++wrong_index;
  }
  const double n = static_cast<double>(pairs.size());
  const double expected = std::pow(0.3, 10.0);
  const double se = std::sqrt(expected * (1.0 - expected) / n);
  const double observed = static_cast<double>(dropped) / n;
  Outcome v;
  v.pass = pairs.size() == 10000 && missed == 0 && wrong_index == 0 && std::abs(observed - expected) <= 5.0 * se;
  v.detail = "10000 pairs: dropped " + std::to_string(dropped) + " (rate " + fmt(observed, 3) + " vs " +
             fmt(expected, 3) + " +/- 5 SE " + fmt(5.0 * se, 3) + "), aligned-but-missed " + std::to_string(missed);
  return v;
}

// --- 7-9: end-to-end ablation ---------------------------------------------------------

struct GridRun {
  std::vector<AblationResult> results;  // one per architecture
  double seconds = 0.0;
};

GridRun run_grid() {
  const auto start = Clock::now();
  const RunConfig cfg;
  const AblationData data = prepare_ablation_data(cfg);
  std::cout << "    data: " << data.labeled.size() << " labeled, " << data.pseudo.size() << " pseudo, "
            << data.validation.size() << " valid, " << data.test.size() << " test\n";
  GridRun out;
  for (Arch arch : {Arch::interaction, Arch::representation}) {
    AblationSettings settings;
    settings.encoder = cfg.encoder;
    settings.encoder.arch = arch;
    settings.train = cfg.train;
    settings.seeds = cfg.seeds;
    settings.threshold = cfg.head_threshold;
    out.results.push_back(run_ablation(standard_variants(arch), data, settings, [&](const RunMetrics& r) {
      std::cout << "    " << arch_name(arch) << " " << r.variant << " seed " << r.seed << ": ROC-AUC "
                << fmt(r.roc_auc) << " (head " << fmt(r.head_roc_auc) << ", tail " << fmt(r.tail_roc_auc) << ")\n"
                << std::flush;
    }));
    print_ablation_table(std::cout, out.results.back());
  }
  out.seconds = seconds_since(start);
  return out;
}

const AblationRow& row(const AblationResult& r, const std::string& name) {
  for (const auto& x : r.rows)
    if (x.variant == name) return x;
  throw std::out_of_range("no row " + name);
}

Outcome directional_reproduction(const GridRun& grid) {
  Outcome v;
  for (const auto& r : grid.results) {
    const double full = row(r, "full").roc_auc.mean;
    const double base = row(r, "w/o score&cot").roc_auc.mean;
    const double no_pseudo = row(r, "w/o pseudo data").roc_auc.mean;
    const bool ok = full - base >= 0.01 && no_pseudo < full;
    v.pass = v.pass && ok;
    v.detail += std::string(arch_name(r.arch)) + ": full-baseline " + fmt(100.0 * (full - base), 3) +
                " pts, no-pseudo-full " + fmt(100.0 * (no_pseudo - full), 3) + " pts; ";
  }
  const bool fast = grid.seconds < 30.0 * 60.0;
  v.pass = v.pass && fast;
  v.detail += "runtime " + fmt(grid.seconds / 60.0, 3) + " min";
  return v;
}

Outcome long_tail_direction(const GridRun& grid) {
  Outcome v;
  for (const auto& r : grid.results) {
    std::size_t wins = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
      const auto& full = r.run("full", seed);
      const auto& base = r.run("w/o score&cot", seed);
      const double head_delta = full.head_roc_auc - base.head_roc_auc;
      const double tail_delta = full.tail_roc_auc - base.tail_roc_auc;
      wins += tail_delta >= head_delta;
    }
    v.pass = v.pass && wins >= 2;
    v.detail += std::string(arch_name(r.arch)) + ": tail delta >= head delta in " + std::to_string(wins) + "/3 seeds; ";
  }
  return v;
}

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

Outcome determinism(const GridRun& first) {
  std::cout << "    repeating the grid\n";
  const GridRun second = run_grid();
  std::size_t compared = 0, differing = 0;
  for (std::size_t a = 0; a < first.results.size(); ++a) {
    const auto& x = first.results[a].runs;
    const auto& y = second.results[a].runs;
    if (x.size() != y.size()) return {false, "run counts differ"};
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (auto field : {&RunMetrics::roc_auc, &RunMetrics::neg_pr_auc, &RunMetrics::head_roc_auc,
                         &RunMetrics::tail_roc_auc, &RunMetrics::head_neg_pr_auc, &RunMetrics::tail_neg_pr_auc}) {
        ++compared;
        differing += !same_bits(x[i].*field, y[i].*field);
      }
      ++compared;
      differing += x[i].train_records != y[i].train_records || x[i].variant != y[i].variant || x[i].seed != y[i].seed;
    }
  }
  return {differing == 0, std::to_string(compared) + " metrics compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  const auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

  int failures = 0;
  const auto report = [&](int n, const char* name, const std::function<Outcome()>& check) {
    if (!wanted(n)) return;
    const auto start = Clock::now();
    Outcome v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << n << ". " << name << ": " << v.detail << " ["
              << fmt(seconds_since(start), 3) << " s]\n"
              << std::flush;
  };

  report(1, "formula fidelity", formula_fidelity);
  report(2, "CRF oracle equivalence", crf_oracle);
  report(3, "gradient suite", gradient_suite);
  report(4, "metric oracles", metric_oracles);
  report(5, "CoT grammar round trip", cot_round_trip);
  report(6, "self-consistency contract", self_consistency);

  if (wanted(7) || wanted(8) || wanted(9)) {
    std::optional<GridRun> grid;
    std::string grid_error;
    try {
      grid = run_grid();
    } catch (const std::exception& e) {
      grid_error = e.what();
    }
    const auto with_grid = [&](Outcome (*f)(const GridRun&)) {
      return [&, f]() -> Outcome {
        if (!grid) return {false, "ablation grid failed: " + grid_error};
        return f(*grid);
      };
    };
    report(7, "end-to-end directional reproduction", with_grid(directional_reproduction));
    report(8, "long-tail direction", with_grid(long_tail_direction));
    report(9, "determinism", with_grid(determinism));
  }

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
