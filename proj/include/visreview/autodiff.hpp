#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "visreview/tensor.hpp"

namespace vr {

class Tape;

/// A named trainable tensor. Models own these; a Tape binds each one to a
/// leaf node the first time it is used in a pass.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Tensor::Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class BackwardContext;

/// Result of a reverse sweep: one gradient per node that the loss reaches.
class Gradients {
 public:
  /// Gradient of `v`, or zeros of its shape if the sweep never reached it.
  Tensor operator[](Var v) const;
  const Tensor* find(std::size_t id) const;

  /// Number of nodes whose backward rule ran during the sweep.
  std::size_t visited() const noexcept { return visited_; }
  /// Per-node count of backward-rule invocations (instrumentation).
  const std::vector<std::size_t>& visit_counts() const noexcept { return visit_counts_; }

 private:
  friend class Tape;
  friend class BackwardContext;
  const Tape* tape_ = nullptr;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<std::size_t> visit_counts_;
  std::size_t visited_ = 0;
};

/// Accessors handed to a node's backward rule.
class BackwardContext {
 public:
  const Tensor& value(std::size_t id) const;
  const Tensor& grad_output() const { return *grad_out_; }
  bool needs_grad(std::size_t id) const;
  /// Accumulation buffer for an input, zero-initialised on first access.
  Tensor& grad(std::size_t id);

 private:
  friend class Tape;
  BackwardContext(const Tape& tape, Gradients& grads) : tape_(tape), grads_(grads) {}
  const Tape& tape_;
  Gradients& grads_;
  const Tensor* grad_out_ = nullptr;
};

/// Recorded computation graph. Nodes are appended in execution order, so the
/// node sequence is already topologically sorted and a single reverse scan
/// visits every reachable node exactly once.
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Leaf for a model parameter; repeated calls within one tape reuse the node.
  Var param(const Parameter& p);
  std::optional<std::size_t> param_node(const Parameter& p) const;

  /// Appends an op node. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  Gradients backward(Var loss) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> params_;
};

/// Gradients for a list of parameters after a sweep (zeros where unreached).
std::vector<Tensor> parameter_gradients(const Tape& tape, const Gradients& grads,
                                        std::span<Parameter* const> params);

// Recorded ops. Each records a node whose backward rule is the exact
// derivative of the corresponding kernel in tensor.hpp.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var reshape(Var a, Tensor::Shape shape);
/// Stacks equally shaped vectors as the rows of a matrix.
Var stack(std::span<const Var> rows);
/// Adds a length-H vector to every row of a T x H matrix.
Var add_rowwise(Var m, Var v);
/// Adds b[f] to every element of channel f of an F x H x W tensor.
Var add_channel_bias(Var x, Var b);
Var conv2d(Var x, Var kernels, int stride);
Var avg_pool2d(Var x, int window, int stride);
Var global_avg_pool(Var x);
Var concat(Var a, Var b, std::size_t axis);
Var elementwise(Elementwise kind, Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);
Var mish(Var x);
Var softmax(Var x);
Var dropout(Var x, double rate, Mode mode, Rng& rng);
/// Scalar -sum t_i log(max(p_i, 1e-12)); the target is treated as data.
Var cross_entropy(const Tensor& target_onehot, Var predicted);

Gradients backward(Var loss);

/// Outcome of a central-difference comparison.
struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the tape gradient of a scalar function against central
/// differences (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) at every coordinate.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6). The floor sits above the
/// resolution of a double central difference at eps = 1e-5, roughly
/// ulp(f) / eps, so gradients below it are held to 1e-10 absolute instead.
GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-5);

/// Same comparison with respect to model parameters, perturbed in place and
/// restored. When `max_per_tensor` is nonzero, that many coordinates per
/// parameter tensor are sampled (seeded) instead of all of them.
GradCheckResult grad_check_params(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                                  double eps = 1e-5, std::size_t max_per_tensor = 0,
                                  std::uint64_t sample_seed = 0);

double relative_error(double analytic, double numeric);

}  // namespace vr
