#include "mkd/dataset.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mkd {

using nlohmann::json;
using nlohmann::ordered_json;

DatasetError::DatasetError(const std::string& source, std::size_t line, const std::string& what)
    : std::runtime_error(source + (line ? ":" + std::to_string(line) : std::string()) + ": " + what) {}

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) throw std::invalid_argument("unknown field '" + key + "'" + where);
}

template <class T>
T required(const json& obj, const char* key) {
  if (!obj.contains(key)) throw std::invalid_argument(std::string("missing field '") + key + "'");
  return obj.at(key).get<T>();
}

std::vector<std::string> read_nonempty_lines(const std::filesystem::path& path, std::vector<std::size_t>& numbers) {
  std::ifstream in(path);
  if (!in) throw DatasetError(path.string(), 0, "cannot open file");
  std::vector<std::string> lines;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    lines.push_back(line);
    numbers.push_back(n);
  }
  if (in.bad()) throw DatasetError(path.string(), n, "read error");
  return lines;
}

template <class Row, class Format>
void write_lines(const std::filesystem::path& path, const std::vector<Row>& rows, Format format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError(path.string(), 0, "cannot write file");
  for (const auto& r : rows) out << format(r) << '\n';
  if (!out) throw DatasetError(path.string(), 0, "write error");
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset rows

std::string format_row(const DatasetRow& row) {
  ordered_json j;
  j["pair_id"] = row.pair.pair_id;
  j["query"] = join_tokens(row.pair.query);
  j["title"] = join_tokens(row.pair.title);
  if (row.label) {
    j["label"] = row.label->is_good() ? "Good" : "Bad";
    if (row.label->reason) j["reason"] = std::string(aspect_id(*row.label->reason));
  }
  if (row.cot) j["cot"] = *row.cot;
  if (row.teacher_score) j["teacher_score"] = *row.teacher_score;
  j["query_frequency"] = row.query_frequency;
  return j.dump();
}

DatasetRow parse_row(std::string_view text, const std::string& source, std::size_t line) {
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw std::invalid_argument("line is not a JSON object");
    reject_unknown(j, {"pair_id", "query", "title", "label", "reason", "cot", "teacher_score", "query_frequency"}, "");
    DatasetRow row;
    auto pair_id = required<std::string>(j, "pair_id");
    if (pair_id.empty()) throw std::invalid_argument("empty pair_id");
    row.pair = make_pair(std::move(pair_id), required<std::string>(j, "query"), required<std::string>(j, "title"));
    if (row.pair.query.empty()) throw std::invalid_argument("empty query");
    if (row.pair.title.empty()) throw std::invalid_argument("empty title");
    if (j.contains("label")) {
      const auto label = j.at("label").get<std::string>();
      if (label == "Good") {
        row.label = RelevanceLabel::good();
      } else if (label == "Bad") {
        row.label = RelevanceLabel::bad();
      } else {
        throw std::invalid_argument("label must be \"Good\" or \"Bad\", got \"" + label + "\"");
      }
    }
    if (j.contains("reason")) {
      if (!row.label || row.label->is_good()) throw std::invalid_argument("reason given without a Bad label");
      const auto name = j.at("reason").get<std::string>();
      auto aspect = parse_aspect(name);
      if (!aspect) throw std::invalid_argument("unknown reason aspect '" + name + "'");
      row.label->reason = aspect;
    }
    if (j.contains("cot")) row.cot = j.at("cot").get<std::string>();
    if (j.contains("teacher_score")) {
      const double s = j.at("teacher_score").get<double>();
      if (!(s > 0.0 && s < 1.0)) throw std::invalid_argument("teacher_score outside (0,1)");
      row.teacher_score = s;
    }
    if (!j.contains("query_frequency")) throw std::invalid_argument("missing field 'query_frequency'");
    const auto& freq = j.at("query_frequency");
    if (!freq.is_number_unsigned()) throw std::invalid_argument("query_frequency must be a non-negative integer");
    row.query_frequency = freq.get<std::uint64_t>();
    return row;
  } catch (const json::exception& e) {
    throw DatasetError(source, line, e.what());
  } catch (const std::invalid_argument& e) {
    throw DatasetError(source, line, e.what());
  }
}

std::vector<DatasetRow> read_dataset(const std::filesystem::path& path) {
  std::vector<std::size_t> numbers;
  const auto lines = read_nonempty_lines(path, numbers);
  std::vector<DatasetRow> rows;
  rows.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) rows.push_back(parse_row(lines[i], path.string(), numbers[i]));
  return rows;
}

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRow>& rows) {
  write_lines(path, rows, format_row);
}

// ---------------------------------------------------------------------------
// Sidecar

namespace {

json tags_json(const TagSequence& tags) {
  json a = json::array();
  for (Tag t : tags.tags) a.push_back(std::string(tag_name(t)));
  return a;
}

json factors_json(const RegFactorSequence& factors) {
  json a = json::array();
  for (Factor f : factors.factors) a.push_back(static_cast<int>(f));
  return a;
}

TagSequence tags_from(const json& a) {
  TagSequence out;
  for (const auto& t : a) {
    const auto name = t.get<std::string>();
    auto tag = parse_tag(name);
    if (!tag) throw std::invalid_argument("unknown tag '" + name + "'");
    out.tags.push_back(*tag);
  }
  return out;
}

RegFactorSequence factors_from(const json& a) {
  RegFactorSequence out;
  for (const auto& f : a) {
    const int v = f.get<int>();
    if (v < -1 || v > 1) throw std::invalid_argument("factor must be -1, 0 or 1");
    out.factors.push_back(static_cast<Factor>(v));
  }
  return out;
}

}  // namespace

std::string format_sidecar(const SidecarRow& row) {
  ordered_json j;
  j["pair_id"] = row.pair_id;
  j["query_tags"] = tags_json(row.query_tags);
  j["title_tags"] = tags_json(row.title_tags);
  j["query_factors"] = factors_json(row.query_factors);
  j["title_factors"] = factors_json(row.title_factors);
  json warnings = json::array();
  for (const auto& w : row.warnings)
    warnings.push_back({{"phrase", w.phrase}, {"side", w.side == Side::query ? "query" : "title"}});
  j["warnings"] = warnings;
  return j.dump();
}

SidecarRow parse_sidecar(std::string_view text, const std::string& source, std::size_t line) {
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw std::invalid_argument("line is not a JSON object");
    reject_unknown(j, {"pair_id", "query_tags", "title_tags", "query_factors", "title_factors", "warnings"}, "");
    SidecarRow row;
    row.pair_id = required<std::string>(j, "pair_id");
    row.query_tags = tags_from(j.at("query_tags"));
    row.title_tags = tags_from(j.at("title_tags"));
    row.query_factors = factors_from(j.at("query_factors"));
    row.title_factors = factors_from(j.at("title_factors"));
    if (j.contains("warnings")) {
      for (const auto& w : j.at("warnings")) {
        const auto side = required<std::string>(w, "side");
        if (side != "query" && side != "title") throw std::invalid_argument("warning side must be query|title");
        row.warnings.push_back({required<std::string>(w, "phrase"), side == "query" ? Side::query : Side::title});
      }
    }
    return row;
  } catch (const json::exception& e) {
    throw DatasetError(source, line, e.what());
  } catch (const std::invalid_argument& e) {
    throw DatasetError(source, line, e.what());
  }
}

std::vector<SidecarRow> read_sidecar(const std::filesystem::path& path) {
  std::vector<std::size_t> numbers;
  const auto lines = read_nonempty_lines(path, numbers);
  std::vector<SidecarRow> rows;
  rows.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) rows.push_back(parse_sidecar(lines[i], path.string(), numbers[i]));
  return rows;
}

void write_sidecar(const std::filesystem::path& path, const std::vector<SidecarRow>& rows) {
  write_lines(path, rows, format_sidecar);
}

void write_catalog(const std::filesystem::path& path, const std::vector<CatalogItem>& catalog) {
  write_lines(path, catalog, [](const CatalogItem& item) {
    ordered_json attrs = ordered_json::object();
    for (const auto& [aspect, value] : item.attributes) attrs[std::string(aspect_id(aspect))] = value;
    ordered_json j;
    j["item_id"] = item.item_id;
    j["attributes"] = attrs;
    j["title"] = join_tokens(item.title);
    return j.dump();
  });
}

// ---------------------------------------------------------------------------
// Run configuration

namespace {

template <class T>
void read_opt(const json& obj, const char* key, T& target) {
  if (obj.contains(key)) target = obj.at(key).get<T>();
}

LossWeights weights_from(const json& j, LossWeights w, const std::string& where) {
  reject_unknown(j, {"score", "cot", "ce", "temperature"}, " in " + where);
  read_opt(j, "score", w.score);
  read_opt(j, "cot", w.cot);
  read_opt(j, "ce", w.ce);
  read_opt(j, "temperature", w.temperature);
  return w;
}

json weights_to(const LossWeights& w) {
  return {{"score", w.score}, {"cot", w.cot}, {"ce", w.ce}, {"temperature", w.temperature}};
}

}  // namespace

void RunConfig::validate() const {
  gen.validate();
  try {
    EncoderConfig e = encoder;
    e.vocab_size = StudentVocab::kNumSpecial;
    e.validate();
    interaction_weights.validate();
    representation_weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (encoder.max_len < kMaxQueryTokens + kMaxTitleTokens + 2)
    throw ConfigError("encoder max_len must be at least " + std::to_string(kMaxQueryTokens + kMaxTitleTokens + 2));
  if (train.batch_size == 0) throw ConfigError("train batch_size must be >= 1");
  const auto& o = train.optimizer;
  if (!(o.lr > 0.0)) throw ConfigError("train lr must be > 0");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0) || !(o.beta2 >= 0.0 && o.beta2 < 1.0))
    throw ConfigError("train betas must lie in [0,1)");
  if (!(o.eps > 0.0)) throw ConfigError("train eps must be > 0");
  if (!(o.weight_decay >= 0.0)) throw ConfigError("train weight_decay must be >= 0");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (!std::filesystem::is_directory(vocab_dir))
    throw ConfigError("vocab_dir '" + vocab_dir.string() + "' is not a directory");
}

RunConfig RunConfig::from_json(std::string_view text, const std::filesystem::path& base_dir) {
  RunConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    reject_unknown(j, {"gen", "encoder", "loss_weights", "train", "seeds", "head_threshold", "vocab_dir"}, "");
    if (j.contains("gen")) {
      const json& g = j.at("gen");
      reject_unknown(g,
                     {"seed", "n_items", "n_pairs", "split", "n_unlabeled", "mismatch_rate", "aspects_per_query",
                      "zipf_exponent", "teacher_noise", "route_flip_rate", "routes", "missing_share",
                      "attribute_rate", "max_filler", "intents_per_item"},
                     " in gen");
      read_opt(g, "seed", c.gen.seed);
      read_opt(g, "n_items", c.gen.n_items);
      read_opt(g, "n_pairs", c.gen.n_pairs);
      read_opt(g, "split", c.gen.split);
      read_opt(g, "n_unlabeled", c.gen.n_unlabeled);
      read_opt(g, "mismatch_rate", c.gen.mismatch_rate);
      if (g.contains("aspects_per_query")) {
        const auto range = g.at("aspects_per_query").get<std::array<std::size_t, 2>>();
        c.gen.min_aspects_per_query = range[0];
        c.gen.max_aspects_per_query = range[1];
      }
      read_opt(g, "zipf_exponent", c.gen.zipf_exponent);
      read_opt(g, "teacher_noise", c.gen.teacher_noise);
      read_opt(g, "route_flip_rate", c.gen.route_flip_rate);
      read_opt(g, "routes", c.gen.routes);
      read_opt(g, "missing_share", c.gen.missing_share);
      read_opt(g, "attribute_rate", c.gen.attribute_rate);
      read_opt(g, "max_filler", c.gen.max_filler);
      read_opt(g, "intents_per_item", c.gen.intents_per_item);
    }
    if (j.contains("encoder")) {
      const json& e = j.at("encoder");
      reject_unknown(e, {"d_model", "n_layers", "n_heads", "d_ff", "max_len", "aggregation"}, " in encoder");
      read_opt(e, "d_model", c.encoder.d_model);
      read_opt(e, "n_layers", c.encoder.n_layers);
      read_opt(e, "n_heads", c.encoder.n_heads);
      read_opt(e, "d_ff", c.encoder.d_ff);
      read_opt(e, "max_len", c.encoder.max_len);
      if (e.contains("aggregation")) c.encoder.aggregation = parse_aggregation(e.at("aggregation").get<std::string>());
    }
    if (j.contains("loss_weights")) {
      const json& w = j.at("loss_weights");
      reject_unknown(w, {"interaction", "representation"}, " in loss_weights");
      if (w.contains("interaction"))
        c.interaction_weights = weights_from(w.at("interaction"), c.interaction_weights, "loss_weights.interaction");
      if (w.contains("representation"))
        c.representation_weights =
            weights_from(w.at("representation"), c.representation_weights, "loss_weights.representation");
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t, {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "tagger"},
                     " in train");
      read_opt(t, "epochs", c.train.epochs);
      read_opt(t, "batch_size", c.train.batch_size);
      read_opt(t, "lr", c.train.optimizer.lr);
      read_opt(t, "beta1", c.train.optimizer.beta1);
      read_opt(t, "beta2", c.train.optimizer.beta2);
      read_opt(t, "eps", c.train.optimizer.eps);
      read_opt(t, "weight_decay", c.train.optimizer.weight_decay);
      if (t.contains("tagger")) c.train.tagger = parse_tagger(t.at("tagger").get<std::string>());
    }
    read_opt(j, "seeds", c.seeds);
    read_opt(j, "head_threshold", c.head_threshold);
    if (j.contains("vocab_dir")) {
      std::filesystem::path p = j.at("vocab_dir").get<std::string>();
      c.vocab_dir = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str(), path.parent_path());
}

std::string RunConfig::to_json() const {
  ordered_json j;
  j["gen"] = {{"seed", gen.seed},
              {"n_items", gen.n_items},
              {"n_pairs", gen.n_pairs},
              {"split", gen.split},
              {"n_unlabeled", gen.n_unlabeled},
              {"mismatch_rate", gen.mismatch_rate},
              {"aspects_per_query", {gen.min_aspects_per_query, gen.max_aspects_per_query}},
              {"zipf_exponent", gen.zipf_exponent},
              {"teacher_noise", gen.teacher_noise},
              {"route_flip_rate", gen.route_flip_rate},
              {"routes", gen.routes},
              {"missing_share", gen.missing_share},
              {"attribute_rate", gen.attribute_rate},
              {"max_filler", gen.max_filler},
              {"intents_per_item", gen.intents_per_item}};
  j["encoder"] = {{"d_model", encoder.d_model},
                  {"n_layers", encoder.n_layers},
                  {"n_heads", encoder.n_heads},
                  {"d_ff", encoder.d_ff},
                  {"max_len", encoder.max_len},
                  {"aggregation", std::string(aggregation_name(encoder.aggregation))}};
  j["loss_weights"] = {{"interaction", weights_to(interaction_weights)},
                       {"representation", weights_to(representation_weights)}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.optimizer.lr},
                {"beta1", train.optimizer.beta1},
                {"beta2", train.optimizer.beta2},
                {"eps", train.optimizer.eps},
                {"weight_decay", train.optimizer.weight_decay},
                {"tagger", std::string(tagger_name(train.tagger))}};
  j["seeds"] = seeds;
  j["head_threshold"] = head_threshold;
  j["vocab_dir"] = vocab_dir.string();
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Lock

OutputLock::OutputLock(const std::filesystem::path& dir) : path_(dir / ".mkd.lock") {
  std::filesystem::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      throw std::runtime_error("output directory " + dir.string() + " is locked (" + path_.string() +
                               " exists); another command may be running");
    throw std::runtime_error("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

}  // namespace mkd
