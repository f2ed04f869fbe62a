#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deformer/tensor.hpp"

namespace deformer {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using ForwardFn = std::function<Tensor(std::span<const Tensor* const> inputs)>;
// Accumulates into `input_grads[i]` (pre-sized, zero-filled) the gradient for
// input i given the output gradient. Entries for inputs that do not need a
// gradient are null.
using BackwardFn = std::function<void(const Tensor& out_grad, std::span<const Tensor* const> inputs,
                                      const Tensor& output, std::span<Tensor* const> input_grads)>;

/// Gradients produced by Tape::backward, addressable by the Var they belong to.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  // Zero tensor of the right shape when the node did not influence the output.
  const Tensor& of(Var v) const { return grads_.at(v.id()); }

 private:
  std::vector<Tensor> grads_;
};

/// ComputationTape: a topologically ordered record of primitive applications.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// Each node stores its output value and the forward closure that produced it,
/// which is what makes `replay()` possible.
class Tape {
 public:
  explicit Tape(Precision precision = Precision::f64) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }

  // Leaf that receives a gradient.
  Var parameter(Tensor value);
  // Leaf that is treated as constant by backward().
  Var constant(Tensor value);

  Var apply(std::string_view op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }

  // Reverse-mode sweep from `output` seeded with `seed`.
  Gradients backward(Var output, const Tensor& seed) const;
  // Convenience for scalar outputs: seed = 1.
  Gradients backward(Var output) const;

  // Re-executes every non-leaf node from the recorded leaf values and returns
  // the recomputed node values (index-aligned with the tape).
  std::vector<Tensor> replay() const;

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    ForwardFn forward;
    BackwardFn backward;
    bool is_leaf = false;
    bool needs_grad = false;
  };

  Var push_leaf(Tensor value, bool needs_grad);

  Precision precision_;
  std::vector<Node> nodes_;
};

// A mask with one byte per element of the tensor it is applied to; non-zero
// means the element participates.
using ElementMask = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Tensor-level primitives. Each reports its FLOPs to the active FlopCounter.
// ---------------------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor softmax(const Tensor& x, std::size_t axis, const ElementMask* mask = nullptr);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& x);
double gelu_scalar(double x);

// ---------------------------------------------------------------------------
// Differentiable counterparts recorded on the inputs' tape.
// ---------------------------------------------------------------------------
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var add_bias(Var x, Var bias);
Var scale(Var x, double factor);
Var softmax(Var x, std::size_t axis, const ElementMask* mask = nullptr);
Var layer_norm(Var x, Var gain, Var bias, double eps);
Var gelu(Var x);
Var mul(Var a, Var b);
Var log(Var x);
Var sum(Var x);
// Rows of `table` selected by `ids`; gradient scatters back into the table.
Var gather_rows(Var table, std::vector<std::size_t> ids);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
// Scalar x[index] (flat index).
Var pick(Var x, std::size_t index);
// sum_i p_i ln(p_i / max(q_i, floor)) with q constant; entries with p_i = 0 contribute 0.
Var kl_divergence(Var p, const Tensor& q, double floor = 1e-12);
// sum over rows r with row_mask[r] != 0 of ||x_r - target_r||^2, target constant.
Var squared_distance(Var x, const Tensor& target, const std::vector<std::uint8_t>& row_mask);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------
struct GradCheckOptions {
  double eps = 1e-6;
  double threshold = 1e-5;
  // Tensors larger than this are checked on a seeded uniform coordinate sample.
  std::size_t full_check_limit = 10'000;
  std::size_t sample_count = 256;
  std::uint64_t sample_seed = 0x5eed;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates_checked = 0;
  bool sampled = false;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double eps = 0.0;
  double threshold = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
};

// Builds the scalar loss on `tape` from leaf Vars bound to `params`.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

/// Compares backward() against central differences (f(θ+ε) − f(θ−ε)) / 2ε.
/// Relative error per coordinate is |a − n| / max(|a|, |n|, 1e-8).
/// Throws NumericalError when the loss is non-finite at a perturbed point.
GradCheckReport grad_check(const LossBuilder& loss, std::vector<Tensor> params,
                           std::vector<std::string> names = {}, const GradCheckOptions& options = {});

}  // namespace deformer
