#pragma once

// Dense float64 tensors with a tape-based reverse-mode autodiff graph.
//
// Every op works on the matrix view of its inputs: the last dimension is the
// column count and all leading dimensions are folded into rows. Results are
// rank-2.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mkd::tensor {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class ShapeMismatch : public std::invalid_argument {
 public:
  ShapeMismatch(const std::string& op, const Shape& expected, const Shape& got);
};

class NonScalarRoot : public std::logic_error {
 public:
  explicit NonScalarRoot(const Shape& got);
};

class Tensor {
 public:
  Tensor() = default;
  /// Rank 1..3, all dimensions positive.
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor({1, 1}, value); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Value of a single-element tensor.
  double item() const;
  void fill(double value);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

/// Handle to a node of a Graph.
class Var {
 public:
  Var() = default;
  std::uint32_t id() const { return id_; }

 private:
  friend class Graph;
  explicit Var(std::uint32_t id) : id_(id) {}
  std::uint32_t id_ = 0;
};

enum class Axis { rows, cols };

struct MaxResult {
  Var value;
  std::vector<std::size_t> argmax;
};

/// Records primitive applications for one forward pass. Nodes are appended in
/// evaluation order, so the tape is topologically sorted by construction.
class Graph {
 public:
  /// Receives the output gradient and one gradient buffer per input
  /// (nullptr when that input does not require a gradient).
  using CustomBackward = std::function<void(const Tensor& out_grad, std::span<Tensor* const> input_grads)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter; backward() accumulates into `param.grad`.
  Var parameter(Parameter& param);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  /// Gradient of the last backward() root w.r.t. `v` (empty if unreached).
  const Tensor& grad(Var v) const { return nodes_[v.id()].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var add_scalar(Var a, double shift);
  /// Adds a 1 x cols bias to every row.
  Var add_rowwise(Var a, Var bias);
  Var concat_rows(const std::vector<Var>& parts);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  Var transpose(Var a);
  Var row_softmax(Var a);
  /// Row-wise log-sum-exp; rows x 1.
  Var logsumexp(Var a);
  Var relu(Var a);
  Var gelu(Var a);
  Var sigmoid(Var a);
  /// log(sigmoid(a)), evaluated stably.
  Var log_sigmoid(Var a);
  Var log(Var a);
  /// Element-wise square root; the derivative at 0 is taken as 0.
  Var sqrt(Var a);
  /// Per-row normalization followed by the 1 x cols affine (gamma, beta).
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  /// Rows of `table` selected by `ids`.
  Var embedding_lookup(Var table, const std::vector<std::size_t>& ids);
  /// Scales each row to unit L2 norm; all-zero rows stay zero.
  Var row_normalize(Var a);
  /// Sum of all entries; 1 x 1.
  Var reduce_sum(Var a);
  /// Axis::cols reduces across columns (one max per row); Axis::rows one max
  /// per column. Result is a 1 x n row. Ties go to the lowest index and the
  /// gradient flows to the argmax only.
  MaxResult reduce_max_with_argmax(Var a, Axis axis);
  Var reduce_max(Var a, Axis axis) { return reduce_max_with_argmax(a, axis).value; }
  /// Entries at flat indices, as a 1 x n row.
  Var gather(Var a, const std::vector<std::size_t>& indices);

  /// Escape hatch for fused ops with a hand-written adjoint.
  Var custom(const std::vector<Var>& inputs, Tensor value, CustomBackward backward);

  /// Reverse sweep from a single-element root. Gradients reach every node on
  /// the tape before the root and are accumulated into bound parameters.
  void backward(Var root);

 private:
  using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var record(std::vector<std::uint32_t> inputs, Tensor value, BackwardFn backward);
  /// Lazily zero-initialized gradient buffer; nullptr when not required.
  Tensor* grad_buffer(std::uint32_t id);
  const Tensor& val(std::uint32_t id) const { return nodes_[id].value; }

  std::vector<Node> nodes_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central differences (f(x+eps) - f(x-eps)) / (2 eps) against backward();
/// relative error uses max(|a|, |b|, 1e-8) as denominator. `loss` must build
/// a fresh forward pass on the given graph from the current parameter values.
GradCheckResult grad_check(const std::function<Var(Graph&)>& loss, const std::vector<Parameter*>& params,
                           double eps);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

/// Decoupled weight decay followed by the bias-corrected Adam update, using
/// each parameter's accumulated `grad`.
void adamw_step(std::span<Parameter> params, OptimState& state);
void adamw_step(const std::vector<Parameter*>& params, OptimState& state);

}  // namespace mkd::tensor
