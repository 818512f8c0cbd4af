#include "mkd/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "mkd/distill.hpp"
#include "mkd/encoders.hpp"
#include "mkd/synth.hpp"

namespace mkd {

using tensor::Graph;
using tensor::GradCheckResult;
using tensor::Parameter;
using tensor::Tensor;
using tensor::Var;

namespace {

double normal(std::mt19937_64& rng) {
  // Box-Muller on the shared uniform source keeps draws platform-independent.
  const double u1 = std::max(uniform01(rng), 1e-300);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); }

Parameter random_param(std::mt19937_64& rng, std::string name, std::size_t rows, std::size_t cols,
                       double scale = 1.0, double shift = 0.0) {
  Parameter p{std::move(name), Tensor({rows, cols}), Tensor({rows, cols})};
  for (double& v : p.value.data()) v = shift + scale * normal(rng);
  return p;
}

Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (double& v : t.data()) v = normal(rng);
  return t;
}

/// A uniformly chosen allowed tag at each step, so the path is well formed.
TagSequence random_tags(std::mt19937_64& rng, std::size_t length) {
  TagSequence seq;
  std::optional<Tag> prev;
  for (std::size_t i = 0; i < length; ++i) {
    std::vector<Tag> allowed;
    for (Tag t : kAllTags)
      if (tag_transition_allowed(prev, t)) allowed.push_back(t);
    prev = allowed[uniform_index(rng, allowed.size())];
    seq.tags.push_back(*prev);
  }
  return seq;
}

/// Factors with at least one defined entry.
RegFactorSequence random_factors(std::mt19937_64& rng, std::size_t length) {
  RegFactorSequence seq;
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t k = uniform_index(rng, 3);
    seq.factors.push_back(k == 0 ? Factor::negative : k == 1 ? Factor::none : Factor::positive);
  }
  seq.factors[uniform_index(rng, length)] = uniform01(rng) < 0.5 ? Factor::negative : Factor::positive;
  return seq;
}

/// Weighted sum of all entries against a fixed random tensor, which turns
/// any output into a scalar whose gradient touches every entry.
Var probe(Graph& g, Var out, const Tensor& weights) { return g.reduce_sum(g.mul(out, g.constant(weights))); }

GradCheckResult check(std::vector<Parameter>& params, double eps, const std::function<Var(Graph&, std::vector<Var>&)>& f) {
  std::vector<Parameter*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  return tensor::grad_check(
      [&](Graph& g) {
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(g.parameter(p));
        return f(g, vars);
      },
      ptrs, eps);
}

GradCheckCase unary(std::string name, double shift, Var (Graph::*op)(Var)) {
  return {std::move(name), [shift, op](std::mt19937_64& rng, double eps) {
            const std::size_t r = dim(rng, 1, 4), c = dim(rng, 1, 5);
            std::vector<Parameter> ps{random_param(rng, "a", r, c)};
            // Inputs of log/sqrt are kept well inside the domain.
            if (shift > 0.0)
              for (double& v : ps[0].value.data()) v = shift + std::abs(v);
            const Tensor w = random_tensor(rng, r, c);
            return check(ps, eps, [&](Graph& g, std::vector<Var>& v) { return probe(g, (g.*op)(v[0]), w); });
          }};
}

GradCheckCase binary(std::string name, Var (Graph::*op)(Var, Var)) {
  return {std::move(name), [op](std::mt19937_64& rng, double eps) {
            const std::size_t r = dim(rng, 1, 4), c = dim(rng, 1, 5);
            std::vector<Parameter> ps{random_param(rng, "a", r, c), random_param(rng, "b", r, c)};
            const Tensor w = random_tensor(rng, r, c);
            return check(ps, eps, [&](Graph& g, std::vector<Var>& v) { return probe(g, (g.*op)(v[0], v[1]), w); });
          }};
}

}  // namespace

std::vector<GradCheckCase> primitive_cases() {
  std::vector<GradCheckCase> cases;
  cases.push_back({"matmul", [](std::mt19937_64& rng, double eps) {
                     const std::size_t n = dim(rng, 1, 4), k = dim(rng, 1, 4), m = dim(rng, 1, 4);
                     std::vector<Parameter> ps{random_param(rng, "a", n, k), random_param(rng, "b", k, m)};
                     const Tensor w = random_tensor(rng, n, m);
                     return check(ps, eps,
                                  [&](Graph& g, std::vector<Var>& v) { return probe(g, g.matmul(v[0], v[1]), w); });
                   }});
  cases.push_back(binary("add", &Graph::add));
  cases.push_back(binary("sub", &Graph::sub));
  cases.push_back(binary("mul", &Graph::mul));
  cases.push_back({"scale/add_scalar", [](std::mt19937_64& rng, double eps) {
                     const std::size_t r = dim(rng, 1, 4), c = dim(rng, 1, 4);
                     std::vector<Parameter> ps{random_param(rng, "a", r, c)};
                     const double s = normal(rng), t = normal(rng);
                     const Tensor w = random_tensor(rng, r, c);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return probe(g, g.add_scalar(g.scale(v[0], s), t), w);
                     });
                   }});
  cases.push_back({"add_rowwise", [](std::mt19937_64& rng, double eps) {
                     const std::size_t r = dim(rng, 1, 4), c = dim(rng, 1, 4);
                     std::vector<Parameter> ps{random_param(rng, "a", r, c), random_param(rng, "bias", 1, c)};
                     const Tensor w = random_tensor(rng, r, c);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return probe(g, g.add_rowwise(v[0], v[1]), w);
                     });
                   }});
  cases.push_back({"concat/slice/transpose", [](std::mt19937_64& rng, double eps) {
                     const std::size_t r1 = dim(rng, 1, 3), r2 = dim(rng, 1, 3), c = dim(rng, 1, 4);
                     std::vector<Parameter> ps{random_param(rng, "a", r1, c), random_param(rng, "b", r2, c)};
                     const std::size_t begin = uniform_index(rng, r1 + r2);
                     const std::size_t end = begin + 1 + uniform_index(rng, r1 + r2 - begin);
                     const Tensor w = random_tensor(rng, c, end - begin);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return probe(g, g.transpose(g.slice_rows(g.concat_rows({v[0], v[1]}), begin, end)), w);
                     });
                   }});
  cases.push_back(unary("row_softmax", 0.0, &Graph::row_softmax));
  cases.push_back({"logsumexp", [](std::mt19937_64& rng, double eps) {
                     const std::size_t r = dim(rng, 1, 4), c = dim(rng, 1, 5);
                     std::vector<Parameter> ps{random_param(rng, "a", r, c)};
                     const Tensor w = random_tensor(rng, r, 1);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) { return probe(g, g.logsumexp(v[0]), w); });
                   }});
  cases.push_back(unary("gelu", 0.0, &Graph::gelu));
  cases.push_back(unary("sigmoid", 0.0, &Graph::sigmoid));
  cases.push_back(unary("log_sigmoid", 0.0, &Graph::log_sigmoid));
  cases.push_back(unary("log", 0.5, &Graph::log));
  cases.push_back(unary("sqrt", 0.5, &Graph::sqrt));
  cases.push_back(unary("row_normalize", 0.0, &Graph::row_normalize));
  cases.push_back({"relu", [](std::mt19937_64& rng, double eps) {
                     const std::size_t r = dim(rng, 1, 4), c = dim(rng, 1, 5);
                     std::vector<Parameter> ps{random_param(rng, "a", r, c)};
                     // Stay away from the kink at 0.
                     for (double& v : ps[0].value.data()) v += v < 0 ? -0.1 : 0.1;
                     const Tensor w = random_tensor(rng, r, c);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) { return probe(g, g.relu(v[0]), w); });
                   }});
  cases.push_back({"layer_norm", [](std::mt19937_64& rng, double eps) {
                     const std::size_t r = dim(rng, 1, 4), c = dim(rng, 2, 6);
                     std::vector<Parameter> ps{random_param(rng, "x", r, c), random_param(rng, "gamma", 1, c),
                                               random_param(rng, "beta", 1, c)};
                     const Tensor w = random_tensor(rng, r, c);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return probe(g, g.layer_norm(v[0], v[1], v[2]), w);
                     });
                   }});
  cases.push_back({"embedding_lookup", [](std::mt19937_64& rng, double eps) {
                     const std::size_t n = dim(rng, 2, 6), c = dim(rng, 1, 4), len = dim(rng, 1, 6);
                     std::vector<Parameter> ps{random_param(rng, "table", n, c)};
                     std::vector<std::size_t> ids;
                     for (std::size_t i = 0; i < len; ++i) ids.push_back(uniform_index(rng, n));
                     const Tensor w = random_tensor(rng, len, c);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return probe(g, g.embedding_lookup(v[0], ids), w);
                     });
                   }});
  cases.push_back({"reduce_max", [](std::mt19937_64& rng, double eps) {
                     const std::size_t r = dim(rng, 1, 4), c = dim(rng, 1, 4);
                     std::vector<Parameter> ps{random_param(rng, "a", r, c)};
                     const Tensor wr = random_tensor(rng, 1, r), wc = random_tensor(rng, 1, c);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return g.add(probe(g, g.reduce_max(v[0], tensor::Axis::cols), wr),
                                    probe(g, g.reduce_max(v[0], tensor::Axis::rows), wc));
                     });
                   }});
  cases.push_back({"gather", [](std::mt19937_64& rng, double eps) {
                     const std::size_t r = dim(rng, 1, 4), c = dim(rng, 1, 4), k = dim(rng, 1, 6);
                     std::vector<Parameter> ps{random_param(rng, "a", r, c)};
                     std::vector<std::size_t> idx;
                     for (std::size_t i = 0; i < k; ++i) idx.push_back(uniform_index(rng, r * c));
                     const Tensor w = random_tensor(rng, 1, k);
                     return check(ps, eps,
                                  [&](Graph& g, std::vector<Var>& v) { return probe(g, g.gather(v[0], idx), w); });
                   }});
  return cases;
}

namespace {

Parameter crf_param(std::mt19937_64& rng, std::string name, std::size_t rows) {
  return random_param(rng, std::move(name), rows, kNumTags, 0.5);
}

std::vector<Token> random_tokens(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  static const std::vector<std::string> words = {"red", "blue", "wool", "coat", "kids", "men", "lamp", "oak"};
  std::vector<Token> out;
  for (std::size_t i = 0, n = dim(rng, lo, hi); i < n; ++i) out.emplace_back(words[uniform_index(rng, words.size())]);
  return out;
}

/// Small random model plus a pair over its vocabulary.
struct TinySetup {
  std::unique_ptr<StudentModel> model;
  QueryItemPair pair;
};

TinySetup tiny_setup_once(std::mt19937_64& rng, Arch arch) {
  TinySetup s;
  s.pair.pair_id = "gc";
  s.pair.query = random_tokens(rng, 1, 4);
  s.pair.title = random_tokens(rng, 1, 6);
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.max_len = 12;
  cfg.arch = arch;
  cfg.aggregation = uniform01(rng) < 0.5 ? Aggregation::mean : Aggregation::sum;
  cfg.init_seed = rng();
  s.model = std::make_unique<StudentModel>(cfg, StudentVocab::build({&s.pair}));
  // Perturb the CRF parameters so their gradients are not all symmetric.
  if (arch == Arch::interaction)
    for (const char* name : {"crf.transitions", "crf.start", "crf.end"})
      for (double& v : s.model->param(name).value.data()) v = 0.3 * normal(rng);
  return s;
}

/// Smallest gap between a pooled maximum and the runner-up in its row or
/// column of the cross-attention matrix.
double pooled_max_margin(const StudentModel& model, const QueryItemPair& pair) {
  Graph g;
  const auto p = const_cast<StudentModel&>(model).bind(g);
  const Tensor& a = g.value(representation_pair_forward(g, model, p, pair).attention);
  double margin = std::numeric_limits<double>::infinity();
  const auto scan = [&](std::size_t n, auto at) {
    double best = -std::numeric_limits<double>::infinity(), second = best;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = at(i);
      if (v > best) {
        second = best;
        best = v;
      } else if (v > second) {
        second = v;
      }
    }
    if (n > 1) margin = std::min(margin, best - second);
  };
  for (std::size_t r = 0; r < a.rows(); ++r) scan(a.cols(), [&](std::size_t c) { return a(r, c); });
  for (std::size_t c = 0; c < a.cols(); ++c) scan(a.rows(), [&](std::size_t r) { return a(r, c); });
  return margin;
}

// Max pooling is not differentiable at ties, and a step of eps can cross one
// when the runner-up is close. Such draws are outside the domain of the check.
constexpr double kMinPoolingMargin = 5e-3;

TinySetup tiny_setup(std::mt19937_64& rng, Arch arch) {
  for (;;) {
    TinySetup s = tiny_setup_once(rng, arch);
    if (arch == Arch::interaction || pooled_max_margin(*s.model, s.pair) >= kMinPoolingMargin) return s;
  }
}

GradCheckResult check_model(StudentModel& model, double eps, const std::function<Var(Graph&, StudentModel::Bound&)>& f) {
  return tensor::grad_check(
      [&](Graph& g) {
        auto bound = model.bind(g);
        return f(g, bound);
      },
      model.parameter_ptrs(), eps);
}

GradCheckCase combined_case(std::string name, Arch arch, Tagger tagger) {
  return {std::move(name), [arch, tagger](std::mt19937_64& rng, double eps) {
            TinySetup s = tiny_setup(rng, arch);
            TrainRecord rec;
            rec.pair = s.pair;
            rec.gold = uniform01(rng) < 0.5 ? RelevanceLabel::good() : RelevanceLabel::bad();
            rec.teacher_score = 0.05 + 0.9 * uniform01(rng);
            rec.query_tags = random_tags(rng, s.pair.query.size());
            rec.title_tags = random_tags(rng, s.pair.title.size());
            rec.query_factors = random_factors(rng, s.pair.query.size());
            rec.title_factors = random_factors(rng, s.pair.title.size());
            const LossWeights weights{0.5 + uniform01(rng), 0.1 + uniform01(rng), 0.5 + uniform01(rng),
                                      1.0 + 2.0 * uniform01(rng)};
            const ActiveTerms terms{true, true, true, rec.gold->is_good()};
            return check_model(*s.model, eps, [&](Graph& g, StudentModel::Bound& p) {
              const auto out = student_forward(g, *s.model, p, rec.pair);
              return combined_loss(g, rec, out, weights, terms, tagger).total;
            });
          }};
}

}  // namespace

std::vector<GradCheckCase> loss_cases() {
  std::vector<GradCheckCase> cases;
  cases.push_back({"score_distill", [](std::mt19937_64& rng, double eps) {
                     std::vector<Parameter> ps{random_param(rng, "logit", 1, 1, 2.0)};
                     const double s_t = 0.02 + 0.96 * uniform01(rng);
                     const double temp = 0.5 + 3.0 * uniform01(rng);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return score_distill_loss(g, s_t, v[0], temp);
                     });
                   }});
  cases.push_back({"bce", [](std::mt19937_64& rng, double eps) {
                     std::vector<Parameter> ps{random_param(rng, "logit", 1, 1, 2.0)};
                     const bool good = uniform01(rng) < 0.5;
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) { return bce_loss(g, v[0], good); });
                   }});
  cases.push_back({"crf_nll", [](std::mt19937_64& rng, double eps) {
                     const std::size_t len = dim(rng, 1, 7);
                     std::vector<Parameter> ps{random_param(rng, "emissions", len, kNumTags),
                                               crf_param(rng, "transitions", kNumTags), crf_param(rng, "start", 1),
                                               crf_param(rng, "end", 1)};
                     const TagSequence gold = random_tags(rng, len);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return crf_nll(g, v[0], v[1], v[2], v[3], gold);
                     });
                   }});
  cases.push_back({"per_token_tag", [](std::mt19937_64& rng, double eps) {
                     const std::size_t len = dim(rng, 1, 7);
                     std::vector<Parameter> ps{random_param(rng, "emissions", len, kNumTags)};
                     const TagSequence gold = random_tags(rng, len);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return per_token_tag_loss(g, v[0], gold);
                     });
                   }});
  cases.push_back({"attention_regulation", [](std::mt19937_64& rng, double eps) {
                     const std::size_t lq = dim(rng, 1, 5), lt = dim(rng, 1, 7);
                     std::vector<Parameter> ps{random_param(rng, "pooled_query", 1, lq, 0.5),
                                               random_param(rng, "pooled_title", 1, lt, 0.5)};
                     const auto fq = random_factors(rng, lq);
                     const auto ft = random_factors(rng, lt);
                     return check(ps, eps, [&](Graph& g, std::vector<Var>& v) {
                       return attention_regulation_loss(g, v[0], v[1], fq, ft);
                     });
                   }});
  cases.push_back(combined_case("combined:interaction/crf", Arch::interaction, Tagger::crf));
  cases.push_back(combined_case("combined:interaction/softmax", Arch::interaction, Tagger::softmax));
  cases.push_back(combined_case("combined:representation", Arch::representation, Tagger::crf));
  return cases;
}

std::vector<GradCheckCase> encoder_cases() {
  std::vector<GradCheckCase> cases;
  cases.push_back({"interaction_forward", [](std::mt19937_64& rng, double eps) {
                     TinySetup s = tiny_setup(rng, Arch::interaction);
                     const Tensor wq = random_tensor(rng, s.pair.query.size(), kNumTags);
                     const Tensor wt = random_tensor(rng, s.pair.title.size(), kNumTags);
                     return check_model(*s.model, eps, [&](Graph& g, StudentModel::Bound& p) {
                       const auto out = interaction_forward(g, *s.model, p, s.pair);
                       return g.add(out.logit, g.add(probe(g, out.query_emissions, wq), probe(g, out.title_emissions, wt)));
                     });
                   }});
  cases.push_back({"representation_forward", [](std::mt19937_64& rng, double eps) {
                     TinySetup s = tiny_setup(rng, Arch::representation);
                     const Tensor wa = random_tensor(rng, s.pair.query.size(), s.pair.title.size());
                     return check_model(*s.model, eps, [&](Graph& g, StudentModel::Bound& p) {
                       const auto out = representation_pair_forward(g, *s.model, p, s.pair);
                       return g.add(out.logit, probe(g, out.attention, wa));
                     });
                   }});
  return cases;
}

std::vector<GradCheckCase> default_gradcheck_cases() {
  auto cases = primitive_cases();
  for (auto* group : {&loss_cases, &encoder_cases})
    for (auto& c : (*group)()) cases.push_back(std::move(c));
  return cases;
}

std::vector<GradCheckRow> run_gradcheck(const std::vector<GradCheckCase>& cases, double eps, std::size_t instances,
                                        std::uint64_t seed, double tolerance) {
  std::vector<GradCheckRow> rows;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    GradCheckRow row{cases[ci].name, eps, instances, {}, true};
    for (std::size_t k = 0; k < instances; ++k) {
      std::mt19937_64 rng(mix_seed(seed, hash_string(cases[ci].name), k));
      const GradCheckResult r = cases[ci].run(rng, eps);
      if (k == 0 || !(r.max_rel_error <= row.worst.max_rel_error)) row.worst = r;
      // NaN compares false, so it is treated as a failure explicitly.
      if (!(r.max_rel_error < tolerance)) row.passed = false;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mkd
