// mkd: data generation, teaching, CoT parsing, training, evaluation and
// ablation for the distilled relevance students.
//
// Every command reads and writes inside one work directory (--out). Exit
// codes: 2 config error, 3 unreadable input, 4 mostly malformed CoT, 5
// non-finite loss, 6 single-class evaluation set, 7 gradient check failure.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mkd/dataset.hpp"
#include "mkd/distill.hpp"
#include "mkd/encoders.hpp"
#include "mkd/eval.hpp"
#include "mkd/gradcheck_suite.hpp"
#include "mkd/log.hpp"
#include "mkd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mkd;

namespace {

struct ExitError : std::runtime_error {
  ExitError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> arch;
  std::string out = "work";
  std::optional<std::uint64_t> threshold;
  std::optional<std::string> tagger;
};

RunConfig load_config(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.seed) {
    cfg.gen.seed = *o.seed;
    cfg.train.seed = *o.seed;
  }
  if (o.threshold) cfg.head_threshold = *o.threshold;
  if (o.tagger) cfg.train.tagger = parse_tagger(*o.tagger);
  cfg.validate();
  return cfg;
}

std::vector<Arch> selected_archs(const CommonOptions& o) {
  if (o.arch) return {parse_arch(*o.arch)};
  return {Arch::interaction, Arch::representation};
}

Arch single_arch(const CommonOptions& o) { return o.arch ? parse_arch(*o.arch) : Arch::interaction; }

std::vector<DatasetRow> read_rows(const fs::path& path) {
  if (!fs::exists(path)) throw ExitError(3, "cannot read dataset " + path.string());
  return read_dataset(path);
}

fs::path with_suffix(const fs::path& dir, const fs::path& input, const std::string& suffix) {
  return dir / (input.stem().string() + suffix);
}

/// Taught rows plus their sidecar, when both files exist.
std::vector<TrainRecord> taught_records(const fs::path& out, const std::string& split, bool required) {
  const fs::path rows = out / (split + ".taught.jsonl");
  const fs::path tags = out / (split + ".taught.tags.jsonl");
  if (!fs::exists(rows)) {
    if (required) throw ExitError(3, "missing " + rows.string() + " (run teach first)");
    return {};
  }
  if (!fs::exists(tags)) throw ExitError(3, "missing " + tags.string() + " (run parse-cot first)");
  return to_train_records(read_dataset(rows), read_sidecar(tags));
}

// --- commands --------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
  const Vocabulary vocab = Vocabulary::load(cfg.vocab_dir);
  const GeneratedDataset data = generate_dataset(cfg.gen, vocab);
  write_catalog(out / "catalog.jsonl", data.catalog);
  write_dataset(out / "train.jsonl", data.train);
  write_dataset(out / "valid.jsonl", data.valid);
  write_dataset(out / "test.jsonl", data.test);
  write_dataset(out / "unlabeled.jsonl", data.unlabeled);
  std::cout << "gen-data: catalog " << data.catalog.size() << ", train " << data.train.size() << ", valid "
            << data.valid.size() << ", test " << data.test.size() << ", unlabeled " << data.unlabeled.size()
            << " -> " << out.string() << "\n";
}

void cmd_teach(const RunConfig& cfg, const fs::path& out, std::vector<std::string> inputs) {
  if (inputs.empty()) inputs = {(out / "train.jsonl").string(), (out / "unlabeled.jsonl").string()};
  const Vocabulary vocab = Vocabulary::load(cfg.vocab_dir);
  for (const auto& input : inputs) {
    const auto rows = read_rows(input);
    TeachStats stats;
    const auto taught = teach(rows, cfg.gen, vocab, &stats);
    const fs::path target = with_suffix(out, input, ".taught.jsonl");
    write_dataset(target, taught);
    std::cout << "teach: " << input << ": kept " << stats.kept << "/" << stats.input << " (unaligned "
              << stats.dropped_unaligned << ", unannotated " << stats.dropped_unannotated << ", bad cot "
              << stats.dropped_bad_cot << ", malformed routes " << stats.malformed_routes << ") -> "
              << target.string() << "\n";
  }
}

void cmd_parse_cot(const fs::path& out, std::vector<std::string> inputs) {
  if (inputs.empty())
    inputs = {(out / "train.taught.jsonl").string(), (out / "unlabeled.taught.jsonl").string()};
  bool mostly_malformed = false;
  for (const auto& input : inputs) {
    const auto rows = read_rows(input);
    ParseStats stats;
    const auto sidecar = derive_sidecar(rows, &stats);
    const fs::path target = with_suffix(out, input, ".tags.jsonl");
    write_sidecar(target, sidecar);
    if (stats.records == 0) log().warn("parse-cot: {}: 0 records", input);
    std::cout << "parse-cot: " << input << ": " << stats.records << " records, " << stats.malformed
              << " malformed, " << stats.span_warnings << " span warnings -> " << target.string() << "\n";
    if (stats.malformed * 2 > stats.records) {
      std::cerr << "parse-cot: " << input << ": more than half of the lines are malformed; wrong input file?\n";
      mostly_malformed = true;
    }
  }
  if (mostly_malformed) throw ExitError(4, "mostly malformed CoT input");
}

struct TrainFlags {
  std::optional<double> lambda_score, lambda_cot, lambda_ce;
  bool no_pseudo = false;
  bool pseudo_hard_labels = false;
};

void cmd_train(const RunConfig& cfg, const fs::path& out, Arch arch, const TrainFlags& flags) {
  LossWeights weights = cfg.weights(arch);
  if (flags.lambda_score) weights.score = *flags.lambda_score;
  if (flags.lambda_cot) weights.cot = *flags.lambda_cot;
  if (flags.lambda_ce) weights.ce = *flags.lambda_ce;
  weights.validate();

  std::vector<TrainRecord> records = taught_records(out, "train", true);
  const std::size_t labeled = records.size();
  if (!flags.no_pseudo)
    for (auto& r : taught_records(out, "unlabeled", false)) records.push_back(std::move(r));
  std::vector<TrainRecord> validation;
  if (fs::exists(out / "valid.jsonl")) validation = to_train_records(read_dataset(out / "valid.jsonl"), {}, true);

  std::vector<const QueryItemPair*> pairs;
  for (const auto& r : records) pairs.push_back(&r.pair);
  EncoderConfig ecfg = cfg.encoder;
  ecfg.arch = arch;
  ecfg.init_seed = cfg.train.seed;
  StudentModel model(ecfg, StudentVocab::build(pairs));

  TrainOptions options = cfg.train;
  options.pseudo_hard_labels = flags.pseudo_hard_labels;
  const fs::path log_path = out / ("train-" + std::string(arch_name(arch)) + ".log.jsonl");
  std::ofstream log_file(log_path);
  const auto on_epoch = [&](const EpochMetrics& m) {
    nlohmann::ordered_json j;
    j["epoch"] = m.epoch;
    j["loss_total"] = m.loss_total;
    j["loss_score"] = m.loss_score;
    j["loss_cot"] = m.loss_cot;
    j["loss_ce"] = m.loss_ce;
    j["val_roc_auc"] = std::isnan(m.val_roc_auc) ? nlohmann::ordered_json() : nlohmann::ordered_json(m.val_roc_auc);
    log_file << j.dump() << "\n" << std::flush;
  };
  TrainResult result;
  try {
    result = train(model, records, weights, options, validation.empty() ? nullptr : &validation, on_epoch);
  } catch (const NonFiniteLoss& e) {
    throw ExitError(5, e.what());
  }
  const fs::path ckpt = out / ("model-" + std::string(arch_name(arch)) + ".ckpt");
  save_checkpoint(model, ckpt);
  std::cout << "train: " << arch_name(arch) << " on " << result.records_used << " records (" << labeled
            << " labeled), " << result.epochs.size() << " epochs -> " << ckpt.string() << "\n";
}

std::string pct(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * *v;
  return s.str();
}

nlohmann::ordered_json split_json(const SplitMetrics& m) {
  nlohmann::ordered_json j;
  j["count"] = m.count;
  j["roc_auc"] = m.roc_auc ? nlohmann::ordered_json(*m.roc_auc) : nlohmann::ordered_json();
  j["neg_pr_auc"] = m.neg_pr_auc ? nlohmann::ordered_json(*m.neg_pr_auc) : nlohmann::ordered_json();
  return j;
}

void cmd_eval(const RunConfig& cfg, const fs::path& out, Arch arch, std::string checkpoint, std::string dataset) {
  if (checkpoint.empty()) checkpoint = (out / ("model-" + std::string(arch_name(arch)) + ".ckpt")).string();
  if (dataset.empty()) dataset = (out / "test.jsonl").string();
  StudentModel model = [&] {
    try {
      return load_checkpoint(checkpoint);
    } catch (const CheckpointError& e) {
      throw ExitError(3, e.what());
    }
  }();
  const auto records = to_train_records(read_rows(dataset), {}, true);
  EvalReport report;
  try {
    report = evaluate(model, records, cfg.head_threshold, cfg.train.tagger);
  } catch (const SingleClass& e) {
    throw ExitError(6, e.what());
  }
  const std::string name(arch_name(model.config().arch));
  std::cout << "eval: " << name << " on " << dataset << "\n";
  for (const auto& [label, m] : {std::pair{"overall", report.overall}, {"head", report.head}, {"tail", report.tail}})
    std::cout << "  " << std::left << std::setw(8) << label << " n=" << std::setw(6) << m.count
              << " ROC-AUC " << pct(m.roc_auc) << "  Neg PR-AUC " << pct(m.neg_pr_auc) << "\n";
  nlohmann::ordered_json j;
  j["arch"] = name;
  j["dataset"] = dataset;
  j["overall"] = split_json(report.overall);
  j["head"] = split_json(report.head);
  j["tail"] = split_json(report.tail);
  if (report.tagging) {
    const auto& t = *report.tagging;
    std::cout << "  tagging  span exact match " << pct(t.span_exact_match) << " over " << t.gold_spans
              << " gold spans\n";
    nlohmann::ordered_json per_label;
    for (Tag tag : kAllTags) {
      const auto& s = t.per_label[static_cast<std::size_t>(tag)];
      std::cout << "    " << std::setw(9) << tag_name(tag) << " P " << pct(s.precision) << " R " << pct(s.recall)
                << " F1 " << pct(s.f1) << "\n";
      per_label[std::string(tag_name(tag))] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
    }
    j["tagging"] = {{"gold_spans", t.gold_spans},
                    {"exact_spans", t.exact_spans},
                    {"span_exact_match", t.span_exact_match},
                    {"per_label", per_label}};
  }
  std::ofstream(out / ("eval-" + name + ".json")) << j.dump(2) << "\n";
}

int cmd_gradcheck(const std::vector<double>& eps_list, std::size_t instances, std::uint64_t seed) {
  const auto cases = default_gradcheck_cases();
  std::optional<GradCheckRow> worst;
  std::cout << std::left << std::setw(30) << "entry" << std::setw(10) << "eps" << std::setw(14) << "max rel err"
            << "status\n";
  for (double eps : eps_list) {
    for (const auto& row : run_gradcheck(cases, eps, instances, seed)) {
      std::ostringstream err;
      err << std::scientific << std::setprecision(2) << row.worst.max_rel_error;
      std::cout << std::setw(30) << row.name << std::setw(10) << eps << std::setw(14) << err.str()
                << (row.passed ? "pass" : "FAIL") << "\n";
      if (!row.passed && (!worst || !(row.worst.max_rel_error <= worst->worst.max_rel_error))) worst = row;
    }
  }
  if (worst) {
    std::ostringstream s;
    s << "gradient check failed; worst offender " << worst->name << " (parameter " << worst->worst.worst_parameter
      << "[" << worst->worst.worst_index << "], analytic " << worst->worst.analytic << ", numeric "
      << worst->worst.numeric << ", eps " << worst->eps << ")";
    throw ExitError(7, s.str());
  }
  return 0;
}

AblationData ablation_data_from(const fs::path& out) {
  AblationData data;
  data.labeled = taught_records(out, "train", true);
  data.pseudo = taught_records(out, "unlabeled", false);
  data.validation = to_train_records(read_rows(out / "valid.jsonl"), {}, true);
  data.test = to_train_records(read_rows(out / "test.jsonl"), {}, true);
  return data;
}

void cmd_ablate(const RunConfig& cfg, const fs::path& out, const std::vector<Arch>& archs) {
  const AblationData data = ablation_data_from(out);
  AblationSettings settings;
  settings.encoder = cfg.encoder;
  settings.train = cfg.train;
  settings.seeds = cfg.seeds;
  settings.threshold = cfg.head_threshold;
  std::ofstream jsonl(out / "ablation.jsonl");
  for (Arch arch : archs) {
    settings.encoder.arch = arch;
    auto variants = standard_variants(arch);
    for (auto& v : variants) {
      // Configured weights replace the built-in defaults for the full row;
      // ablated terms stay at zero.
      const LossWeights& w = cfg.weights(arch);
      v.weights.score = v.weights.score == 0.0 ? 0.0 : w.score;
      v.weights.cot = v.weights.cot == 0.0 ? 0.0 : w.cot;
      v.weights.ce = w.ce;
      v.weights.temperature = w.temperature;
    }
    const auto result = run_ablation(variants, data, settings, [&](const RunMetrics& r) {
      std::cout << "ablate: " << arch_name(arch) << " " << r.variant << " seed " << r.seed << ": "
                << r.train_records << " records, ROC-AUC " << pct(r.roc_auc) << "\n"
                << std::flush;
    });
    print_ablation_table(std::cout, result);
    write_ablation_jsonl(jsonl, result);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-dimensional distillation of relevance judgments into small students"};
  app.require_subcommand(1);
  app.fallthrough();
  CommonOptions common;
  app.add_option("--config", common.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "Overrides the generation and training seed");
  app.add_option("--arch", common.arch, "interaction or representation")
      ->check(CLI::IsMember({"interaction", "representation"}));
  app.add_option("--out", common.out, "Work directory")->capture_default_str();
  app.add_option("--threshold", common.threshold, "Head/tail query-frequency threshold");
  app.add_option("--tagger", common.tagger, "crf or softmax")->check(CLI::IsMember({"crf", "softmax"}));

  auto* gen = app.add_subcommand("gen-data", "Generate catalog and train/valid/test/unlabeled splits");
  std::vector<std::string> teach_inputs, parse_inputs;
  auto* teach_cmd = app.add_subcommand("teach", "Attach teacher scores and selected CoT routes");
  teach_cmd->add_option("inputs", teach_inputs, "Datasets (default: train and unlabeled splits)");
  auto* parse_cmd = app.add_subcommand("parse-cot", "Derive BIO tags and regulatory factors from CoT");
  parse_cmd->add_option("inputs", parse_inputs, "Taught datasets (default: taught train and unlabeled)");

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train one student");
  train_cmd->add_option("--lambda-score", train_flags.lambda_score, "Score distillation weight");
  train_cmd->add_option("--lambda-cot", train_flags.lambda_cot, "CoT distillation weight");
  train_cmd->add_option("--lambda-ce", train_flags.lambda_ce, "Cross-entropy weight");
  train_cmd->add_flag("--no-pseudo", train_flags.no_pseudo, "Train on the labeled split only");
  train_cmd->add_flag("--pseudo-hard-labels", train_flags.pseudo_hard_labels,
                      "Use the teacher judgment as CE target on unlabeled records");

  std::string checkpoint, dataset;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("checkpoint", checkpoint, "Checkpoint (default: model-<arch>.ckpt)");
  eval_cmd->add_option("dataset", dataset, "Dataset (default: test split)");

  std::vector<double> eps_list{1e-4};
  std::size_t instances = 20;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every loss and encoder");
  grad_cmd->add_option("--eps", eps_list, "Step sizes")->delimiter(',')->capture_default_str();
  grad_cmd->add_option("--instances", instances, "Random instances per entry")->capture_default_str();

  auto* ablate_cmd = app.add_subcommand("ablate", "Five-variant ablation over the configured seeds");
  auto* repro_cmd = app.add_subcommand("repro", "gen-data, teach, parse-cot, train, eval and ablate in sequence");

  CLI11_PARSE(app, argc, argv);

  try {
    if (grad_cmd->parsed()) return cmd_gradcheck(eps_list, instances, common.seed.value_or(1));

    const RunConfig cfg = [&] {
      try {
        return load_config(common);
      } catch (const ConfigError& e) {
        throw ExitError(2, std::string("config error: ") + e.what());
      } catch (const std::invalid_argument& e) {
        throw ExitError(2, std::string("config error: ") + e.what());
      }
    }();
    const fs::path out = common.out;
    fs::create_directories(out);
    OutputLock lock(out);

    if (gen->parsed()) cmd_gen_data(cfg, out);
    if (teach_cmd->parsed()) cmd_teach(cfg, out, teach_inputs);
    if (parse_cmd->parsed()) cmd_parse_cot(out, parse_inputs);
    if (train_cmd->parsed()) cmd_train(cfg, out, single_arch(common), train_flags);
    if (eval_cmd->parsed()) cmd_eval(cfg, out, single_arch(common), checkpoint, dataset);
    if (ablate_cmd->parsed()) cmd_ablate(cfg, out, selected_archs(common));
    if (repro_cmd->parsed()) {
      cmd_gen_data(cfg, out);
      cmd_teach(cfg, out, {});
      cmd_parse_cot(out, {});
      for (Arch arch : selected_archs(common)) {
        cmd_train(cfg, out, arch, {});
        cmd_eval(cfg, out, arch, "", "");
      }
      cmd_ablate(cfg, out, selected_archs(common));
    }
  } catch (const ExitError& e) {
    std::cerr << "mkd: " << e.what() << "\n";
    return e.code;
  } catch (const DatasetError& e) {
    std::cerr << "mkd: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "mkd: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mkd: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
