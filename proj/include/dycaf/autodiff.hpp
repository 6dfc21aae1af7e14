#pragma once

// Tape-based reverse-mode differentiation over the primitive set. Forward
// calls append nodes in topological order; backward walks the tape in
// reverse, accumulating gradients. Gradients are always carried in double
// precision. No higher-order derivatives.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dycaf/ops.hpp"
#include "dycaf/param_store.hpp"

namespace dycaf {

struct Var {
  i32 id = -1;
  bool valid() const { return id >= 0; }
};

// Parameter name -> gradient tensor (same shape as the parameter).
using GradMap = std::map<std::string, Tensor4>;

enum class OpKind {
  Leaf,
  Conv1x1,
  Depthwise,
  ChannelPool,
  GlobalAvgPool,
  Activation,
  Softmax,
  Resample,
  Concat,
  Slice,
  Ew,
  SumAll,
  Affine,
  UnaryOp,
  Custom,
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. Parameter leaves are memoized per name so repeated lookups share
  // one node; all param() calls on a tape must use the same store.
  Var leaf(Tensor4 value, bool requires_grad = false);
  Var constant(Tensor4 value) { return leaf(std::move(value), false); }
  Var param(const ParamStore& store, const std::string& name);

  // Primitives; semantics match the free functions in ops.hpp.
  Var conv1x1(Var x, Var w, Var b);
  Var depthwise(Var x, Var k);
  Var channel_pool(Var x, PoolMode mode);
  Var global_avg_pool(Var x);
  Var activation(Var x, Act act);
  Var softmax(Var x, SoftmaxAxis axis);
  Var resample(Var x, ResampleMode mode);
  Var concat(const std::vector<Var>& parts);
  Var slice_channels(Var x, i64 from, i64 count);
  Var ew(Var x, Var y, EwOp op);
  Var sum_all(Var x);
  Var affine(Var x, double mul, double add);
  Var unary(Var x, Unary op, double arg = 0.0);

  // Custom node with caller-supplied value and backward rule. The rule
  // receives the upstream gradient and must accumulate into the inputs via
  // accumulate_grad.
  Var custom(std::vector<Var> inputs, Tensor4 value,
             std::function<void(Tape&, const Tensor4&, const std::vector<Var>&)> backward_fn);

  const Tensor4& value(Var v) const { return node(v.id).value; }
  OpKind kind(Var v) const { return node(v.id).kind; }
  bool needs_grad(Var v) const { return node(v.id).needs_grad; }
  i64 size() const { return static_cast<i64>(nodes_.size()); }

  // Reverse pass from a scalar (1,1,1,1) node, seeded with 1. Throws if the
  // tape already holds gradients; call zero_grad between passes.
  void backward(Var scalar_loss);

  // Reverse pass from any node with an explicit seed of the same shape.
  void backward_from(Var node, const Tensor4& seed);

  void zero_grad();

  // Gradient of a node; zeros if nothing reached it.
  Tensor4 grad(Var v) const;

  void accumulate_grad(Var v, const Tensor4& g);

  // Gradients for the named parameters; unused parameters map to zero
  // tensors, names missing from the store are rejected.
  GradMap grads(const std::vector<std::string>& wrt, const ParamStore& store) const;

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<i32> inputs;
    Tensor4 value;
    bool needs_grad = false;
    std::function<void(Tape&, i32)> backward;
  };

  Node& node(i32 id) { return nodes_.at(static_cast<size_t>(id)); }
  const Node& node(i32 id) const { return nodes_.at(static_cast<size_t>(id)); }
  Var push(Node n);
  bool any_needs_grad(const std::vector<i32>& ids) const;
  void run_backward(i32 from);

  std::vector<Node> nodes_;
  std::vector<Tensor4> grads_;
  std::map<std::string, i32> param_ids_;
  const ParamStore* bound_store_ = nullptr;
  bool holds_grads_ = false;
};

// Convenience wrapper matching the reverse pass contract: runs backward from
// `loss` and collects gradients for `wrt`.
GradMap backward(Tape& tape, Var loss, const std::vector<std::string>& wrt,
                 const ParamStore& store);

// Central-difference oracle: perturbs every scalar of every store entry by
// +-eps and evaluates f. 64-bit stores only. Independent of the tape.
GradMap finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                         const ParamStore& store, double eps = 1e-6);

// Relative error measure used by every gradient gate:
// |a - b| / max(1, |a|, |b|).
double rel_err(double a, double b);

// Max rel_err over two gradient maps (same key sets and shapes).
double max_rel_err(const GradMap& a, const GradMap& b);

}  // namespace dycaf
