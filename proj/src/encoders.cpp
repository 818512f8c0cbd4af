#include "mkd/encoders.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

#include "mkd/synth.hpp"

namespace mkd {

using tensor::Graph;
using tensor::Parameter;
using tensor::Tensor;
using tensor::Var;

std::string_view arch_name(Arch arch) {
  return arch == Arch::interaction ? "interaction" : "representation";
}

Arch parse_arch(std::string_view name) {
  if (name == "interaction") return Arch::interaction;
  if (name == "representation") return Arch::representation;
  throw std::invalid_argument("unknown arch '" + std::string(name) + "' (expected interaction|representation)");
}

std::string_view aggregation_name(Aggregation aggregation) {
  return aggregation == Aggregation::mean ? "mean" : "sum";
}

Aggregation parse_aggregation(std::string_view name) {
  if (name == "mean") return Aggregation::mean;
  if (name == "sum") return Aggregation::sum;
  throw std::invalid_argument("unknown aggregation '" + std::string(name) + "' (expected mean|sum)");
}

LengthOverflow::LengthOverflow(std::size_t length, std::size_t max_len)
    : std::length_error("encoded length " + std::to_string(length) + " exceeds max_len " + std::to_string(max_len)) {}

// ---------------------------------------------------------------------------
// Vocabulary

namespace {
const std::vector<std::string> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[Q]", "[T]"};
}

StudentVocab::StudentVocab() : tokens_(kSpecialTokens) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
}

StudentVocab StudentVocab::from_tokens(std::vector<std::string> tokens) {
  StudentVocab v;
  for (auto& t : tokens) {
    if (std::find(kSpecialTokens.begin(), kSpecialTokens.end(), t) != kSpecialTokens.end()) continue;
    if (!v.index_.emplace(t, v.tokens_.size()).second)
      throw std::invalid_argument("duplicate vocabulary token '" + t + "'");
    v.tokens_.push_back(std::move(t));
  }
  return v;
}

StudentVocab StudentVocab::build(const std::vector<const QueryItemPair*>& pairs) {
  std::set<std::string> distinct;
  for (const QueryItemPair* p : pairs) {
    for (const Token& t : p->query) distinct.insert(t.text());
    for (const Token& t : p->title) distinct.insert(t.text());
  }
  return from_tokens(std::vector<std::string>(distinct.begin(), distinct.end()));
}

std::size_t StudentVocab::id(const Token& token) const {
  auto it = index_.find(token.text());
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> StudentVocab::ids(const std::vector<Token>& tokens) const {
  std::vector<std::size_t> out;
  out.reserve(tokens.size());
  for (const Token& t : tokens) out.push_back(id(t));
  return out;
}

// ---------------------------------------------------------------------------
// Model

void EncoderConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("encoder config: " + what); };
  if (vocab_size < StudentVocab::kNumSpecial) fail("vocab_size must cover the special tokens");
  if (d_model == 0) fail("d_model must be positive");
  if (n_heads == 0) fail("n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_layers == 0) fail("n_layers must be positive");
  if (d_ff == 0) fail("d_ff must be positive");
  if (max_len < 3) fail("max_len must be at least 3");
}

namespace {

double normal01(std::mt19937_64& rng) {
  // Box-Muller on 53-bit uniforms; avoids implementation-defined distributions.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string layer_name(std::size_t layer, std::string_view rest) {
  return "layer" + std::to_string(layer) + "." + std::string(rest);
}

std::string head_name(std::size_t layer, std::size_t head, std::string_view rest) {
  return "layer" + std::to_string(layer) + ".head" + std::to_string(head) + "." + std::string(rest);
}

}  // namespace

StudentModel::StudentModel(EncoderConfig config, StudentVocab vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  config_.vocab_size = vocab_.size();
  config_.validate();
  const std::size_t d = config_.d_model;
  const std::size_t dh = d / config_.n_heads;
  std::mt19937_64 rng(mix_seed(config_.init_seed, 0x5eed, 0));
  auto add = [&](std::string name, tensor::Shape shape, double stddev, double fill) {
    Tensor value(shape, fill);
    if (stddev > 0.0)
      for (double& x : value.data()) x = stddev * normal01(rng);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(value), Tensor(shape, 0.0)});
  };
  const double w_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double w_ff = 1.0 / std::sqrt(static_cast<double>(config_.d_ff));

  add("tok_emb", {config_.vocab_size, d}, 0.5, 0.0);
  add("pos_emb", {config_.max_len, d}, 0.1, 0.0);
  add("seg_emb", {2, d}, 0.1, 0.0);
  add("emb_ln.gamma", {1, d}, 0.0, 1.0);
  add("emb_ln.beta", {1, d}, 0.0, 0.0);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
      add(head_name(l, h, "wq"), {d, dh}, w_in, 0.0);
      add(head_name(l, h, "bq"), {1, dh}, 0.0, 0.0);
      add(head_name(l, h, "wk"), {d, dh}, w_in, 0.0);
      add(head_name(l, h, "wv"), {d, dh}, w_in, 0.0);
      add(head_name(l, h, "bv"), {1, dh}, 0.0, 0.0);
      add(head_name(l, h, "wo"), {dh, d}, 1.0 / std::sqrt(static_cast<double>(d)), 0.0);
    }
    add(layer_name(l, "attn.bo"), {1, d}, 0.0, 0.0);
    add(layer_name(l, "ln1.gamma"), {1, d}, 0.0, 1.0);
    add(layer_name(l, "ln1.beta"), {1, d}, 0.0, 0.0);
    add(layer_name(l, "ffn.w1"), {d, config_.d_ff}, w_in, 0.0);
    add(layer_name(l, "ffn.b1"), {1, config_.d_ff}, 0.0, 0.0);
    add(layer_name(l, "ffn.w2"), {config_.d_ff, d}, w_ff, 0.0);
    add(layer_name(l, "ffn.b2"), {1, d}, 0.0, 0.0);
    add(layer_name(l, "ln2.gamma"), {1, d}, 0.0, 1.0);
    add(layer_name(l, "ln2.beta"), {1, d}, 0.0, 0.0);
  }
  if (config_.arch == Arch::interaction) {
    add("rel_head.w", {d, 1}, w_in, 0.0);
    add("rel_head.b", {1, 1}, 0.0, 0.0);
    add("tag_head.w", {d, kNumTags}, w_in, 0.0);
    add("tag_head.b", {1, kNumTags}, 0.0, 0.0);
    add("crf.transitions", {kNumTags, kNumTags}, 0.0, 0.0);
    add("crf.start", {1, kNumTags}, 0.0, 0.0);
    add("crf.end", {1, kNumTags}, 0.0, 0.0);
  } else {
    add("late.w", {1, 1}, 0.0, 1.0);
    add("late.b", {1, 1}, 0.0, 0.0);
  }
}

std::vector<Parameter*> StudentModel::parameter_ptrs() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

Parameter& StudentModel::param(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return params_[it->second];
}

const Parameter& StudentModel::param(std::string_view name) const {
  return const_cast<StudentModel*>(this)->param(name);
}

bool StudentModel::has_param(std::string_view name) const { return index_.find(name) != index_.end(); }

void StudentModel::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Var StudentModel::Bound::operator()(std::string_view name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw std::out_of_range("parameter '" + std::string(name) + "' not bound");
  return it->second;
}

StudentModel::Bound StudentModel::bind(Graph& graph) {
  Bound b;
  for (auto& p : params_) b.vars.emplace(p.name, graph.parameter(p));
  return b;
}

// ---------------------------------------------------------------------------
// Forward passes

Var encode(Graph& g, const StudentModel::Bound& p, const EncoderConfig& config, const std::vector<std::size_t>& ids,
           const std::vector<std::size_t>& segments) {
  const std::size_t n = ids.size();
  if (n > config.max_len) throw LengthOverflow(n, config.max_len);
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;

  Var x = g.add(g.add(g.embedding_lookup(p("tok_emb"), ids), g.embedding_lookup(p("pos_emb"), positions)),
                g.embedding_lookup(p("seg_emb"), segments));
  x = g.layer_norm(x, p("emb_ln.gamma"), p("emb_ln.beta"));

  const std::size_t dh = config.d_model / config.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    Var attn;
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      Var q = g.add_rowwise(g.matmul(x, p(head_name(l, h, "wq"))), p(head_name(l, h, "bq")));
      // No key bias: it shifts each score row by a constant, which softmax cancels.
      Var k = g.matmul(x, p(head_name(l, h, "wk")));
      Var v = g.add_rowwise(g.matmul(x, p(head_name(l, h, "wv"))), p(head_name(l, h, "bv")));
      Var weights = g.row_softmax(g.scale(g.matmul(q, g.transpose(k)), inv_sqrt_dh));
      Var out = g.matmul(g.matmul(weights, v), p(head_name(l, h, "wo")));
      attn = h == 0 ? out : g.add(attn, out);
    }
    attn = g.add_rowwise(attn, p(layer_name(l, "attn.bo")));
    x = g.layer_norm(g.add(x, attn), p(layer_name(l, "ln1.gamma")), p(layer_name(l, "ln1.beta")));
    Var ff = g.gelu(g.add_rowwise(g.matmul(x, p(layer_name(l, "ffn.w1"))), p(layer_name(l, "ffn.b1"))));
    ff = g.add_rowwise(g.matmul(ff, p(layer_name(l, "ffn.w2"))), p(layer_name(l, "ffn.b2")));
    x = g.layer_norm(g.add(x, ff), p(layer_name(l, "ln2.gamma")), p(layer_name(l, "ln2.beta")));
  }
  return x;
}

InteractionOutput interaction_forward(Graph& g, const StudentModel& model, const StudentModel::Bound& p,
                                      const QueryItemPair& pair) {
  const EncoderConfig& config = model.config();
  if (config.arch != Arch::interaction) throw std::logic_error("interaction_forward on a representation model");
  if (pair.query.empty() || pair.title.empty()) throw std::invalid_argument("pair has an empty side");
  const std::size_t lq = pair.query.size();
  const std::size_t lt = pair.title.size();
  if (lq + lt + 2 > config.max_len) throw LengthOverflow(lq + lt + 2, config.max_len);

  std::vector<std::size_t> ids;
  ids.reserve(lq + lt + 2);
  ids.push_back(StudentVocab::kCls);
  for (const Token& t : pair.query) ids.push_back(model.vocab().id(t));
  ids.push_back(StudentVocab::kSep);
  for (const Token& t : pair.title) ids.push_back(model.vocab().id(t));
  std::vector<std::size_t> segments(ids.size(), 0);
  std::fill(segments.begin() + static_cast<std::ptrdiff_t>(lq + 2), segments.end(), 1);

  InteractionOutput out;
  out.hidden = encode(g, p, config, ids, segments);
  out.logit = g.add(g.matmul(g.slice_rows(out.hidden, 0, 1), p("rel_head.w")), p("rel_head.b"));
  Var tokens = g.concat_rows({g.slice_rows(out.hidden, 1, 1 + lq), g.slice_rows(out.hidden, lq + 2, lq + 2 + lt)});
  Var emissions = g.add_rowwise(g.matmul(tokens, p("tag_head.w")), p("tag_head.b"));
  out.query_emissions = g.slice_rows(emissions, 0, lq);
  out.title_emissions = g.slice_rows(emissions, lq, lq + lt);
  return out;
}

Var representation_forward(Graph& g, const StudentModel& model, const StudentModel::Bound& p,
                           const std::vector<Token>& tokens, Side side) {
  const EncoderConfig& config = model.config();
  if (config.arch != Arch::representation) throw std::logic_error("representation_forward on an interaction model");
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (tokens.size() + 1 > config.max_len) throw LengthOverflow(tokens.size() + 1, config.max_len);
  std::vector<std::size_t> ids;
  ids.reserve(tokens.size() + 1);
  ids.push_back(side == Side::query ? StudentVocab::kQueryMarker : StudentVocab::kTitleMarker);
  for (const Token& t : tokens) ids.push_back(model.vocab().id(t));
  const std::vector<std::size_t> segments(ids.size(), 0);
  Var h = encode(g, p, config, ids, segments);
  return g.slice_rows(h, 1, ids.size());
}

Var cross_attention_matrix(Graph& g, Var h_query, Var h_title) {
  return g.matmul(g.row_normalize(h_query), g.transpose(g.row_normalize(h_title)));
}

PooledAttention pooled_attention(Graph& g, Var attention) {
  return {g.reduce_max(attention, tensor::Axis::cols), g.reduce_max(attention, tensor::Axis::rows)};
}

Var late_interaction_score(Graph& g, const StudentModel& model, const StudentModel::Bound& p, Var pooled_query) {
  Var agg = g.reduce_sum(pooled_query);
  if (model.config().aggregation == Aggregation::mean)
    agg = g.scale(agg, 1.0 / static_cast<double>(g.value(pooled_query).size()));
  return g.add(g.mul(agg, p("late.w")), p("late.b"));
}

RepresentationOutput representation_pair_forward(Graph& g, const StudentModel& model, const StudentModel::Bound& p,
                                                 const QueryItemPair& pair) {
  RepresentationOutput out;
  out.h_query = representation_forward(g, model, p, pair.query, Side::query);
  out.h_title = representation_forward(g, model, p, pair.title, Side::title);
  out.attention = cross_attention_matrix(g, out.h_query, out.h_title);
  out.pooled = pooled_attention(g, out.attention);
  out.logit = late_interaction_score(g, model, p, out.pooled.query);
  return out;
}

double predict_logit(const StudentModel& model, const QueryItemPair& pair) {
  Graph g;
  // Binding needs mutable parameters for gradient accumulation; inference
  // never calls backward(), so the model is left untouched.
  auto bound = const_cast<StudentModel&>(model).bind(g);
  if (model.config().arch == Arch::interaction) return g.value(interaction_forward(g, model, bound, pair).logit).item();
  return g.value(representation_pair_forward(g, model, bound, pair).logit).item();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kMagic = "MKD1";
constexpr std::uint32_t kVersion = 1;

template <class T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T le() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return value;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json config_json(const StudentModel& model) {
  const EncoderConfig& c = model.config();
  return {
      {"arch", arch_name(c.arch)},
      {"aggregation", aggregation_name(c.aggregation)},
      {"d_model", c.d_model},
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"d_ff", c.d_ff},
      {"max_len", c.max_len},
      {"init_seed", c.init_seed},
      {"vocab_size", c.vocab_size},
      {"vocab", model.vocab().tokens()},
  };
}

}  // namespace

std::string serialize_checkpoint(const StudentModel& model) {
  std::string out(kMagic);
  put_le<std::uint32_t>(out, kVersion);
  const std::string config = config_json(model).dump();
  put_le<std::uint64_t>(out, config.size());
  out += config;
  put_le<std::uint64_t>(out, model.parameters().size());
  for (const Parameter& p : model.parameters()) {
    put_le<std::uint64_t>(out, p.name.size());
    out += p.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put_le<std::uint64_t>(out, d);
    for (double x : p.value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

void save_checkpoint(const StudentModel& model, const std::filesystem::path& path) {
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw CheckpointError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(model);
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!file) throw CheckpointError("failed writing checkpoint " + path.string());
}

StudentModel deserialize_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw CheckpointError("not an MKD1 checkpoint");
  if (auto v = in.le<std::uint32_t>(); v != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  const auto config_len = in.le<std::uint64_t>();
  nlohmann::json cj;
  try {
    cj = nlohmann::json::parse(in.take(config_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
  EncoderConfig config;
  std::vector<std::string> tokens;
  try {
    config.arch = parse_arch(cj.at("arch").get<std::string>());
    config.aggregation = parse_aggregation(cj.at("aggregation").get<std::string>());
    config.d_model = cj.at("d_model").get<std::size_t>();
    config.n_layers = cj.at("n_layers").get<std::size_t>();
    config.n_heads = cj.at("n_heads").get<std::size_t>();
    config.d_ff = cj.at("d_ff").get<std::size_t>();
    config.max_len = cj.at("max_len").get<std::size_t>();
    config.init_seed = cj.at("init_seed").get<std::uint64_t>();
    config.vocab_size = cj.at("vocab_size").get<std::size_t>();
    tokens = cj.at("vocab").get<std::vector<std::string>>();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
  StudentVocab vocab = StudentVocab::from_tokens(tokens);
  if (vocab.size() != config.vocab_size || vocab.tokens() != tokens)
    throw CheckpointError("checkpoint vocabulary does not match vocab_size");
  StudentModel model(config, std::move(vocab));

  const auto count = in.le<std::uint64_t>();
  if (count != model.parameters().size())
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(model.parameters().size()));
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name(in.take(in.le<std::uint64_t>()));
    if (!model.has_param(name)) throw CheckpointError("unexpected tensor '" + name + "'");
    Parameter& p = model.param(name);
    const auto rank = in.le<std::uint32_t>();
    tensor::Shape shape(rank);
    for (auto& d : shape) d = in.le<std::uint64_t>();
    if (shape != p.value.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + tensor::shape_string(shape) + ", expected " +
                            tensor::shape_string(p.value.shape()));
    for (double& x : p.value.data()) x = std::bit_cast<double>(in.le<std::uint64_t>());
  }
  if (!in.done()) throw CheckpointError("trailing bytes after checkpoint tensors");
  return model;
}

StudentModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw CheckpointError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << file.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace mkd
