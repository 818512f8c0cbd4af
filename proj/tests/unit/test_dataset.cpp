#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mkd/dataset.hpp"
#include "mkd/pipeline.hpp"

namespace mkd {
namespace {

namespace fs = std::filesystem;

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::load(std::string(MKD_DATA_DIR) + "/vocab");
  return v;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mkd_dataset_test";
  fs::create_directories(dir);
  return dir / name;
}

DatasetRow sample_row() {
  DatasetRow row;
  row.pair = make_pair("p7", "red wool coat", "wool coat red winter");
  row.label = RelevanceLabel::bad(Aspect::color);
  row.cot = "some text";
  row.teacher_score = 0.3;
  row.query_frequency = 12;
  return row;
}

TEST(DatasetRow, FormatsFieldsInSchemaOrder) {
  const std::string line = format_row(sample_row());
  const auto j = nlohmann::ordered_json::parse(line);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"pair_id", "query", "title", "label", "reason", "cot", "teacher_score",
                                            "query_frequency"}));
  EXPECT_EQ(j["label"], "Bad");
  EXPECT_EQ(j["reason"], "color");
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(parse_row(line), sample_row());

  DatasetRow bare;
  bare.pair = make_pair("u1", "oak table", "oak table solid");
  EXPECT_EQ(format_row(bare), R"({"pair_id":"u1","query":"oak table","title":"oak table solid","query_frequency":0})");
  EXPECT_EQ(parse_row(format_row(bare)), bare);
}

TEST(DatasetRow, RejectsBadInputWithLocation) {
  const auto fails = [](std::string_view text) {
    try {
      parse_row(text, "train.jsonl", 4);
    } catch (const DatasetError& e) {
      EXPECT_NE(std::string(e.what()).find("train.jsonl:4"), std::string::npos) << e.what();
      return true;
    }
    return false;
  };
  EXPECT_TRUE(fails(R"({"pair_id":"a","query":"x","title":"y","query_frequency":1,"extra":1})"));
  EXPECT_TRUE(fails(R"({"pair_id":"a","query":"x","title":"y"})"));
  EXPECT_TRUE(fails(R"({"pair_id":"a","query":"x","title":"y","query_frequency":-2})"));
  EXPECT_TRUE(fails(R"({"pair_id":"a","query":"x","title":"y","query_frequency":1,"label":"Maybe"})"));
  EXPECT_TRUE(fails(R"({"pair_id":"a","query":"x","title":"y","query_frequency":1,"teacher_score":1.5})"));
  EXPECT_TRUE(fails(R"({"pair_id":"a","query":3,"title":"y","query_frequency":1})"));
  EXPECT_TRUE(fails("{not json"));
  EXPECT_FALSE(fails(R"({"pair_id":"a","query":"x","title":"y","query_frequency":1})"));
}

TEST(DatasetFile, WriteThenReadAndMissingFile) {
  const auto path = scratch("rows.jsonl");
  std::vector<DatasetRow> rows = {sample_row(), sample_row()};
  rows[1].pair.pair_id = "p8";
  rows[1].label.reset();
  rows[1].cot.reset();
  write_dataset(path, rows);
  EXPECT_EQ(read_dataset(path), rows);
  EXPECT_THROW(read_dataset(scratch("absent.jsonl")), DatasetError);
}

TEST(Sidecar, RoundTrip) {
  SidecarRow row;
  row.pair_id = "p1";
  row.query_tags = TagSequence{{Tag::b_irrele, Tag::b_rele}};
  row.title_tags = TagSequence{{Tag::b_rele, Tag::i_rele, Tag::o}};
  row.query_factors = RegFactorSequence{{Factor::negative, Factor::positive}};
  row.title_factors = RegFactorSequence{{Factor::positive, Factor::positive, Factor::none}};
  row.warnings.push_back({"blue", Side::title});
  EXPECT_EQ(parse_sidecar(format_sidecar(row)), row);
  EXPECT_THROW(parse_sidecar(R"({"pair_id":"p1","query_tags":["X"],"title_tags":[],"query_factors":[],"title_factors":[]})"),
               DatasetError);
}

TEST(RunConfig, JsonRoundTripAndRejection) {
  const RunConfig defaults;
  EXPECT_NO_THROW(defaults.validate());
  EXPECT_EQ(RunConfig::from_json(defaults.to_json()).to_json(), defaults.to_json());

  const RunConfig c = RunConfig::from_json(
      R"({"encoder":{"d_model":16,"aggregation":"sum"},"train":{"epochs":3,"tagger":"softmax"},
          "loss_weights":{"representation":{"cot":0.5}},"seeds":[9],"vocab_dir":"vocab"})",
      MKD_DATA_DIR);
  EXPECT_EQ(c.encoder.d_model, 16u);
  EXPECT_EQ(c.encoder.aggregation, Aggregation::sum);
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.train.tagger, Tagger::softmax);
  EXPECT_EQ(c.representation_weights.cot, 0.5);
  EXPECT_EQ(c.representation_weights.score, 1.0);
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{9});
  EXPECT_EQ(c.vocab_dir, fs::path(MKD_DATA_DIR) / "vocab");
  EXPECT_THROW(RunConfig::from_json(R"({"vocab_dir":"nowhere"})", "/"), ConfigError);

  EXPECT_THROW(RunConfig::from_json(R"({"encoder":{"width":3}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"surprise":1})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"encoder":{"d_model":30,"n_heads":4}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"gen":{"mismatch_rate":1.5}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"loss_weights":{"interaction":{"score":-1}}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"seeds":[]})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json("[1,2"), ConfigError);
  EXPECT_THROW(RunConfig::load(scratch("absent.json")), ConfigError);
}

TEST(OutputLock, IsExclusive) {
  const fs::path dir = scratch("locked");
  {
    OutputLock lock(dir);
    EXPECT_TRUE(fs::exists(dir / ".mkd.lock"));
    EXPECT_THROW(OutputLock again(dir), std::runtime_error);
  }
  EXPECT_FALSE(fs::exists(dir / ".mkd.lock"));
  EXPECT_NO_THROW(OutputLock after(dir));
}

TEST(Pipeline, SplitSizes) {
  EXPECT_EQ(split_sizes(100, {8, 1, 1}), (std::array<std::size_t, 3>{80, 10, 10}));
  EXPECT_EQ(split_sizes(7000, {5, 1, 1}), (std::array<std::size_t, 3>{5000, 1000, 1000}));
  const auto odd = split_sizes(10, {1, 1, 1});
  EXPECT_EQ(odd[0] + odd[1] + odd[2], 10u);
}

GenConfig small_gen() {
  GenConfig cfg;
  cfg.n_items = 60;
  cfg.n_pairs = 300;
  cfg.split = {8, 1, 1};
  cfg.n_unlabeled = 120;
  return cfg;
}

TEST(Pipeline, GeneratedSplits) {
  const auto data = generate_dataset(small_gen(), vocab());
  EXPECT_EQ(data.train.size(), 240u);
  EXPECT_EQ(data.valid.size(), 30u);
  EXPECT_EQ(data.test.size(), 30u);
  EXPECT_EQ(data.unlabeled.size(), 120u);
  for (const auto* split : {&data.train, &data.valid, &data.test}) {
    for (const auto& row : *split) {
      ASSERT_TRUE(row.label && row.cot);
      EXPECT_EQ(parse_row(format_row(row)), row);
    }
  }
  for (const auto& row : data.unlabeled) EXPECT_FALSE(row.label || row.cot || row.teacher_score);
  for (const auto& r : to_train_records(data.train, {}, true)) EXPECT_TRUE(validate_record(r).empty());
}

TEST(Pipeline, TeachKeepsScoresInProjectedRange) {
  const GenConfig cfg = small_gen();
  const auto data = generate_dataset(cfg, vocab());
  TeachStats stats;
  const auto taught = teach(data.train, cfg, vocab(), &stats);
  EXPECT_EQ(stats.input, data.train.size());
  EXPECT_EQ(stats.kept + stats.dropped_unaligned + stats.dropped_bad_cot, stats.input);
  for (const auto& row : taught) {
    ASSERT_TRUE(row.teacher_score && row.label && row.cot);
    EXPECT_GT(*row.teacher_score, 0.268);
    EXPECT_LT(*row.teacher_score, 0.732);
    EXPECT_EQ(parse_cot(*row.cot).judgment.value, row.label->value);
  }
  const auto pseudo = teach(data.unlabeled, cfg, vocab());
  EXPECT_FALSE(pseudo.empty());
  for (const auto& row : pseudo) {
    EXPECT_FALSE(row.label);
    ASSERT_TRUE(row.teacher_score && row.cot);
    EXPECT_EQ(parse_cot(*row.cot).judgment.is_good(), *row.teacher_score > 0.5);
  }
}

TEST(Pipeline, NoiselessTeacherAgreesWithGold) {
  GenConfig cfg = small_gen();
  cfg.teacher_noise = 0.0;
  cfg.route_flip_rate = 0.0;
  const auto data = generate_dataset(cfg, vocab());
  TeachStats stats;
  const auto taught = teach(data.train, cfg, vocab(), &stats);
  EXPECT_EQ(taught.size(), data.train.size());
  for (const auto& row : taught) EXPECT_EQ(*row.teacher_score > 0.5, row.label->is_good());
}

TEST(Pipeline, OracleCotHasNoSpanWarnings) {
  const GenConfig cfg = small_gen();
  const auto data = generate_dataset(cfg, vocab());
  ParseStats stats;
  const auto sidecar = derive_sidecar(teach(data.train, cfg, vocab()), &stats);
  EXPECT_EQ(stats.malformed, 0u);
  EXPECT_EQ(stats.span_warnings, 0u);
  EXPECT_EQ(sidecar.size(), stats.records);

  std::vector<DatasetRow> broken = {sample_row()};
  ParseStats broken_stats;
  EXPECT_TRUE(derive_sidecar(broken, &broken_stats).empty());
  EXPECT_EQ(broken_stats.malformed, 1u);
}

TEST(Pipeline, GoldenCaseTagsAndJoin) {
  const auto rows = read_dataset(std::string(MKD_DATA_DIR) + "/golden/case1.jsonl");
  const auto sidecar = derive_sidecar(rows);
  ASSERT_EQ(sidecar.size(), 1u);
  EXPECT_EQ(sidecar[0].query_tags.tags, (std::vector<Tag>{Tag::b_irrele, Tag::b_rele, Tag::o, Tag::b_rele}));
  const auto records = to_train_records(rows, sidecar);
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].query_tags, sidecar[0].query_tags);
  EXPECT_EQ(records[0].title_factors, sidecar[0].title_factors);
  EXPECT_TRUE(records[0].cot);
  EXPECT_FALSE(to_train_records(rows)[0].query_tags);
  EXPECT_TRUE(to_train_records(rows, {}, true)[0].query_tags);
}

TEST(Pipeline, AblationDataIsDeterministic) {
  RunConfig cfg;
  cfg.gen = small_gen();
  const auto a = prepare_ablation_data(cfg);
  const auto b = prepare_ablation_data(cfg);
  ASSERT_EQ(a.labeled.size(), b.labeled.size());
  ASSERT_EQ(a.pseudo.size(), b.pseudo.size());
  EXPECT_FALSE(a.pseudo.empty());
  for (std::size_t i = 0; i < a.pseudo.size(); ++i) {
    EXPECT_EQ(a.pseudo[i].pair, b.pseudo[i].pair);
    EXPECT_EQ(a.pseudo[i].teacher_score, b.pseudo[i].teacher_score);
    EXPECT_FALSE(a.pseudo[i].gold);
  }
  EXPECT_EQ(a.test.size(), 30u);
  for (const auto& r : a.labeled) EXPECT_TRUE(r.gold && r.teacher_score);
}

}  // namespace
}  // namespace mkd
