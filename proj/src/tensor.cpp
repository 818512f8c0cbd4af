#include "mkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mkd::tensor {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

ShapeMismatch::ShapeMismatch(const std::string& op, const Shape& expected, const Shape& got)
    : std::invalid_argument(op + ": shape mismatch, expected " + shape_string(expected) + " got " +
                            shape_string(got)) {}

NonScalarRoot::NonScalarRoot(const Shape& got)
    : std::logic_error("backward root must be a single element, got shape " + shape_string(got)) {}

// ---------------------------------------------------------------------------
// Tensor

namespace {

std::size_t checked_size(const Shape& shape) {
  if (shape.empty() || shape.size() > 3) throw std::invalid_argument("tensor rank must be 1..3");
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive: " + shape_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) { data_.assign(checked_size(shape_), fill); }

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  const std::size_t n = checked_size(shape_);
  if (data_.size() != n) throw ShapeMismatch("Tensor", shape_, {data_.size()});
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeMismatch("item", {1}, shape_);
  return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void Parameter::zero_grad() {
  if (grad.empty() || !grad.same_shape(value)) {
    grad = Tensor(value.shape(), 0.0);
  } else {
    grad.fill(0.0);
  }
}

// ---------------------------------------------------------------------------
// Graph plumbing

namespace {

Shape mat_shape(const Tensor& t) { return {t.rows(), t.cols()}; }

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeMismatch(op, mat_shape(a), mat_shape(b));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var Graph::record(std::vector<std::uint32_t> inputs, Tensor value, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (auto id : inputs) node.requires_grad = node.requires_grad || nodes_[id].requires_grad;
  if (node.requires_grad) node.backward = std::move(backward);
  node.inputs = std::move(inputs);
  nodes_.push_back(std::move(node));
  return Var(static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor* Graph::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(mat_shape(n.value), 0.0);
  return &n.grad;
}

Var Graph::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::parameter(Parameter& param) {
  Node node;
  node.value = param.value;
  node.param = &param;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Graph::backward(Var root) {
  if (nodes_[root.id()].value.size() != 1) throw NonScalarRoot(nodes_[root.id()].value.shape());
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = Tensor(mat_shape(nodes_[root.id()].value), 1.0);
  for (std::int64_t id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, static_cast<std::uint32_t>(id));
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    Parameter& p = *n.param;
    if (p.grad.empty() || !p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape(), 0.0);
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[i];
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Var Graph::matmul(Var a, Var b) {
  const Tensor& A = val(a.id());
  const Tensor& B = val(b.id());
  const std::size_t r = A.rows(), k = A.cols(), c = B.cols();
  if (B.rows() != k) throw ShapeMismatch("matmul", {k, c}, mat_shape(B));
  Tensor out({r, c}, 0.0);
  {
    const double* __restrict pa = A.data().data();
    const double* __restrict pb = B.data().data();
    double* __restrict po = out.data().data();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double aik = pa[i * k + kk];
        const double* brow = pb + kk * c;
        double* orow = po + i * c;
        for (std::size_t j = 0; j < c; ++j) orow[j] += aik * brow[j];
      }
    }
  }
  return record({a.id(), b.id()}, std::move(out), [ia = a.id(), ib = b.id(), r, k, c](Graph& g, std::uint32_t self) {
    const double* __restrict pg = g.nodes_[self].grad.data().data();
    if (Tensor* ga = g.grad_buffer(ia)) {
      const double* __restrict pb = g.val(ib).data().data();
      double* __restrict pga = ga->data().data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += pg[i * c + j] * pb[kk * c + j];
          pga[i * k + kk] += s;
        }
      }
    }
    if (Tensor* gb = g.grad_buffer(ib)) {
      const double* __restrict pa = g.val(ia).data().data();
      double* __restrict pgb = gb->data().data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double aik = pa[i * k + kk];
          for (std::size_t j = 0; j < c; ++j) pgb[kk * c + j] += aik * pg[i * c + j];
        }
      }
    }
  });
}

Var Graph::transpose(Var a) {
  const Tensor& A = val(a.id());
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = A(i, j);
  return record({a.id()}, std::move(out), [ia = a.id(), r, c](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(ia);
    const Tensor& go = g.nodes_[self].grad;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += go(j, i);
  });
}

// ---------------------------------------------------------------------------
// Element-wise

Var Graph::add(Var a, Var b) {
  const Tensor& A = val(a.id());
  const Tensor& B = val(b.id());
  require_same("add", A, B);
  Tensor out(mat_shape(A));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  return record({a.id(), b.id()}, std::move(out), [ia = a.id(), ib = b.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    for (auto id : {ia, ib}) {
      if (Tensor* gx = g.grad_buffer(id))
        for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
    }
  });
}

Var Graph::sub(Var a, Var b) {
  const Tensor& A = val(a.id());
  const Tensor& B = val(b.id());
  require_same("sub", A, B);
  Tensor out(mat_shape(A));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  return record({a.id(), b.id()}, std::move(out), [ia = a.id(), ib = b.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    if (Tensor* ga = g.grad_buffer(ia))
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
    if (Tensor* gb = g.grad_buffer(ib))
      for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] -= go[i];
  });
}

Var Graph::mul(Var a, Var b) {
  const Tensor& A = val(a.id());
  const Tensor& B = val(b.id());
  require_same("mul", A, B);
  Tensor out(mat_shape(A));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return record({a.id(), b.id()}, std::move(out), [ia = a.id(), ib = b.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    if (Tensor* ga = g.grad_buffer(ia)) {
      const Tensor& B = g.val(ib);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * B[i];
    }
    if (Tensor* gb = g.grad_buffer(ib)) {
      const Tensor& A = g.val(ia);
      for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * A[i];
    }
  });
}

Var Graph::scale(Var a, double factor) {
  const Tensor& A = val(a.id());
  Tensor out(mat_shape(A));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * factor;
  return record({a.id()}, std::move(out), [ia = a.id(), factor](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * factor;
  });
}

Var Graph::add_scalar(Var a, double shift) {
  const Tensor& A = val(a.id());
  Tensor out(mat_shape(A));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + shift;
  return record({a.id()}, std::move(out), [ia = a.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
  });
}

Var Graph::add_rowwise(Var a, Var bias) {
  const Tensor& A = val(a.id());
  const Tensor& B = val(bias.id());
  const std::size_t r = A.rows(), c = A.cols();
  if (B.size() != c) throw ShapeMismatch("add_rowwise", {1, c}, B.shape());
  Tensor out(mat_shape(A));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = A(i, j) + B[j];
  return record({a.id(), bias.id()}, std::move(out), [ia = a.id(), ib = bias.id(), r, c](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    if (Tensor* ga = g.grad_buffer(ia))
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
    if (Tensor* gb = g.grad_buffer(ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += go(i, j);
  });
}

namespace {

template <class F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out({a.rows(), a.cols()});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

Var Graph::relu(Var a) {
  Tensor out = map_values(val(a.id()), [](double x) { return x > 0.0 ? x : 0.0; });
  return record({a.id()}, std::move(out), [ia = a.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& x = g.val(ia);
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += x[i] > 0.0 ? go[i] : 0.0;
  });
}

Var Graph::gelu(Var a) {
  Tensor out = map_values(val(a.id()), [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
  return record({a.id()}, std::move(out), [ia = a.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& x = g.val(ia);
    Tensor* ga = g.grad_buffer(ia);
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
      (*ga)[i] += go[i] * (cdf + x[i] * pdf);
    }
  });
}

Var Graph::sigmoid(Var a) {
  Tensor out = map_values(val(a.id()), stable_sigmoid);
  return record({a.id()}, std::move(out), [ia = a.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

Var Graph::log_sigmoid(Var a) {
  Tensor out = map_values(val(a.id()), [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); });
  return record({a.id()}, std::move(out), [ia = a.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& x = g.val(ia);
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * stable_sigmoid(-x[i]);
  });
}

Var Graph::log(Var a) {
  Tensor out = map_values(val(a.id()), [](double x) { return std::log(x); });
  return record({a.id()}, std::move(out), [ia = a.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& x = g.val(ia);
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] / x[i];
  });
}

Var Graph::sqrt(Var a) {
  Tensor out = map_values(val(a.id()), [](double x) { return std::sqrt(x); });
  return record({a.id()}, std::move(out), [ia = a.id()](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += y[i] > 0.0 ? go[i] * 0.5 / y[i] : 0.0;
  });
}

// ---------------------------------------------------------------------------
// Row-structured ops

Var Graph::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = val(parts[0].id()).cols();
  std::size_t r = 0;
  std::vector<std::uint32_t> ids;
  for (Var p : parts) {
    const Tensor& t = val(p.id());
    if (t.cols() != c) throw ShapeMismatch("concat_rows", {t.rows(), c}, mat_shape(t));
    r += t.rows();
    ids.push_back(p.id());
  }
  Tensor out({r, c});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& t = val(p.id());
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += t.size();
  }
  return record(ids, std::move(out), [ids](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t n = g.val(id).size();
      if (Tensor* gx = g.grad_buffer(id))
        for (std::size_t i = 0; i < n; ++i) (*gx)[i] += go[off + i];
      off += n;
    }
  });
}

Var Graph::slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = val(a.id());
  if (begin >= end || end > A.rows()) throw ShapeMismatch("slice_rows", {A.rows(), A.cols()}, {begin, end});
  const std::size_t c = A.cols();
  Tensor out({end - begin, c});
  std::copy(A.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
            A.data().begin() + static_cast<std::ptrdiff_t>(end * c), out.data().begin());
  return record({a.id()}, std::move(out), [ia = a.id(), begin, c](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[begin * c + i] += go[i];
  });
}

Var Graph::row_softmax(Var a) {
  const Tensor& A = val(a.id());
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double m = A(i, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, A(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out(i, j) = std::exp(A(i, j) - m));
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= z;
  }
  return record({a.id()}, std::move(out), [ia = a.id(), r, c](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += go(i, j) * y(i, j);
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += y(i, j) * (go(i, j) - dot);
    }
  });
}

Var Graph::logsumexp(Var a) {
  const Tensor& A = val(a.id());
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double m = A(i, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, A(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(A(i, j) - m);
    out[i] = m + std::log(z);
  }
  return record({a.id()}, std::move(out), [ia = a.id(), r, c](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    const Tensor& x = g.val(ia);
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += go[i] * std::exp(x(i, j) - y[i]);
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = val(x.id());
  const std::size_t r = X.rows(), c = X.cols();
  if (val(gamma.id()).size() != c) throw ShapeMismatch("layer_norm gamma", {1, c}, val(gamma.id()).shape());
  if (val(beta.id()).size() != c) throw ShapeMismatch("layer_norm beta", {1, c}, val(beta.id()).shape());
  const Tensor& G = val(gamma.id());
  const Tensor& B = val(beta.id());
  Tensor out({r, c});
  std::vector<double> xhat(r * c);
  std::vector<double> inv(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += X(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (X(i, j) - mean) * (X(i, j) - mean);
    var /= static_cast<double>(c);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (X(i, j) - mean) * inv[i];
      out(i, j) = G[j] * xhat[i * c + j] + B[j];
    }
  }
  return record({x.id(), gamma.id(), beta.id()}, std::move(out),
                [ix = x.id(), igm = gamma.id(), ibt = beta.id(), r, c, xhat = std::move(xhat),
                 inv = std::move(inv)](Graph& g, std::uint32_t self) {
                  const Tensor& go = g.nodes_[self].grad;
                  if (Tensor* gb = g.grad_buffer(ibt))
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) (*gb)[j] += go(i, j);
                  if (Tensor* gg = g.grad_buffer(igm))
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) (*gg)[j] += go(i, j) * xhat[i * c + j];
                  if (Tensor* gx = g.grad_buffer(ix)) {
                    const Tensor& G = g.val(igm);
                    const double n = static_cast<double>(c);
                    for (std::size_t i = 0; i < r; ++i) {
                      double sum_d = 0.0, sum_dx = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double d = go(i, j) * G[j];
                        sum_d += d;
                        sum_dx += d * xhat[i * c + j];
                      }
                      for (std::size_t j = 0; j < c; ++j) {
                        const double d = go(i, j) * G[j];
                        (*gx)(i, j) += inv[i] * (d - sum_d / n - xhat[i * c + j] * sum_dx / n);
                      }
                    }
                  }
                });
}

Var Graph::embedding_lookup(Var table, const std::vector<std::size_t>& ids) {
  const Tensor& T = val(table.id());
  const std::size_t d = T.cols();
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: no ids");
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= T.rows()) throw ShapeMismatch("embedding_lookup", {T.rows(), d}, {ids[i], d});
    std::copy_n(T.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return record({table.id()}, std::move(out), [it = table.id(), ids, d](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor* gt = g.grad_buffer(it);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) (*gt)(ids[i], j) += go(i, j);
  });
}

Var Graph::row_normalize(Var a) {
  const Tensor& A = val(a.id());
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({r, c}, 0.0);
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += A(i, j) * A(i, j);
    norms[i] = std::sqrt(s);
    if (norms[i] > 0.0)
      for (std::size_t j = 0; j < c; ++j) out(i, j) = A(i, j) / norms[i];
  }
  return record({a.id()}, std::move(out), [ia = a.id(), r, c, norms = std::move(norms)](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i) {
      if (norms[i] <= 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += go(i, j) * y(i, j);
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += (go(i, j) - y(i, j) * dot) / norms[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var Graph::reduce_sum(Var a) {
  const Tensor& A = val(a.id());
  double s = 0.0;
  for (double x : A.data()) s += x;
  return record({a.id()}, Tensor::scalar(s), [ia = a.id()](Graph& g, std::uint32_t self) {
    const double go = g.nodes_[self].grad[0];
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += go;
  });
}

MaxResult Graph::reduce_max_with_argmax(Var a, Axis axis) {
  const Tensor& A = val(a.id());
  const std::size_t r = A.rows(), c = A.cols();
  const bool per_row = axis == Axis::cols;
  const std::size_t n = per_row ? r : c;
  const std::size_t m = per_row ? c : r;
  Tensor out({1, n});
  std::vector<std::size_t> flat(n);
  std::vector<std::size_t> argmax(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_v = per_row ? A(i, 0) : A(0, i);
    for (std::size_t k = 1; k < m; ++k) {
      const double v = per_row ? A(i, k) : A(k, i);
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    out[i] = best_v;
    argmax[i] = best;
    flat[i] = per_row ? i * c + best : best * c + i;
  }
  Var v = record({a.id()}, std::move(out), [ia = a.id(), flat](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < flat.size(); ++i) (*ga)[flat[i]] += go[i];
  });
  return {v, std::move(argmax)};
}

Var Graph::gather(Var a, const std::vector<std::size_t>& indices) {
  const Tensor& A = val(a.id());
  if (indices.empty()) throw std::invalid_argument("gather: no indices");
  Tensor out({1, indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= A.size()) throw ShapeMismatch("gather", A.shape(), {indices[i]});
    out[i] = A[indices[i]];
  }
  return record({a.id()}, std::move(out), [ia = a.id(), indices](Graph& g, std::uint32_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor* ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < indices.size(); ++i) (*ga)[indices[i]] += go[i];
  });
}

Var Graph::custom(const std::vector<Var>& inputs, Tensor value, CustomBackward backward) {
  std::vector<std::uint32_t> ids;
  ids.reserve(inputs.size());
  for (Var v : inputs) ids.push_back(v.id());
  return record(ids, std::move(value), [ids, backward = std::move(backward)](Graph& g, std::uint32_t self) {
    std::vector<Tensor*> grads;
    grads.reserve(ids.size());
    for (auto id : ids) grads.push_back(g.grad_buffer(id));
    backward(g.nodes_[self].grad, grads);
  });
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult grad_check(const std::function<Var(Graph&)>& loss, const std::vector<Parameter*>& params,
                           double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (Parameter* p : params) p->zero_grad();
  {
    Graph g;
    Var root = loss(g);
    g.backward(root);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  auto eval = [&] {
    Graph g;
    return g.value(loss(g)).item();
  };
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = eval();
      p.value[i] = saved - eps;
      const double down = eval();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > result.max_rel_error) {
        result = {rel, p.name, i, a, numeric};
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// AdamW

namespace {

void adamw_update(Parameter& p, std::size_t index, OptimState& state) {
  if (state.first_moment.size() <= index) {
    state.first_moment.emplace_back(p.value.shape(), 0.0);
    state.second_moment.emplace_back(p.value.shape(), 0.0);
  }
  Tensor& m = state.first_moment[index];
  Tensor& v = state.second_moment[index];
  if (!m.same_shape(p.value)) throw ShapeMismatch("adamw_step moment for " + p.name, m.shape(), p.value.shape());
  if (p.grad.empty()) p.zero_grad();
  if (!p.grad.same_shape(p.value)) throw ShapeMismatch("adamw_step grad for " + p.name, p.value.shape(), p.grad.shape());
  const AdamWConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = p.grad[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p.value[i] -= c.lr * c.weight_decay * p.value[i];
    p.value[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
  }
}

}  // namespace

void adamw_step(std::span<Parameter> params, OptimState& state) {
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) adamw_update(params[i], i, state);
}

void adamw_step(const std::vector<Parameter*>& params, OptimState& state) {
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) adamw_update(*params[i], i, state);
}

}  // namespace mkd::tensor
