#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fusecad/tensor.hpp"

namespace fusecad::ad {

enum class OpKind {
  leaf,
  add,
  mul,
  matmul,
  conv2d,
  relu,
  softmax,
  concat,
  pool,
  reshape,
  log,
  sum,
  scale,
  bias_add,
  stop_gradient,
  loss,
};

const char* op_name(OpKind kind);

/// Raised when an op receives incompatible operand shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs);
  ShapeError(const std::string& op, const std::string& detail);
};

/// Raised on misuse of the graph protocol (backward before forward, bad seed).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Node;
using Var = std::shared_ptr<Node>;

/// One vertex of a lazily evaluated computation graph.
///
/// Shapes are inferred when the node is built; values are (re)computed by
/// `forward`. After `backward`, `adjoint` holds d(root)/d(this) contracted
/// with the seed for every node on a gradient-carrying path.
struct Node {
  OpKind kind = OpKind::leaf;
  std::vector<Var> inputs;
  Shape shape;

  TensorPtr leaf;  // set for leaves only
  Tensor out;      // value for non-leaf nodes
  bool evaluated = false;

  bool retain = false;  // force an adjoint even when no leaf below needs one
  bool needs_grad = false;
  std::vector<double> adjoint;

  std::function<void(Node&)> forward_fn;
  std::function<void(Node&)> backward_fn;

  // Per-op caches filled in forward and consumed in backward.
  std::vector<double> scratch;
  std::vector<std::size_t> index_scratch;

  const Tensor& value() const;
  std::span<const double> grad() const { return adjoint; }
  bool has_grad() const noexcept { return !adjoint.empty(); }
};

/// Evaluates every node reachable from `root` in topological order.
Tensor forward(const Var& root);

/// Reverse sweep from `root`; gradients accumulate (+=) into every leaf tensor
/// that requires them. Callers zero parameter gradients between steps.
void backward(const Var& root, const Tensor& seed);
/// Convenience for scalar roots: seed of one.
void backward(const Var& root);

// ---- leaves -------------------------------------------------------------

/// Wraps a shared tensor; gradients flow into it when it requires them.
Var param(TensorPtr tensor);
/// A constant leaf that never receives a gradient.
Var constant(Tensor value);
/// Identical values, but backward never propagates past this node.
Var stop_gradient(const Var& x);

// ---- elementwise ---------------------------------------------------------

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var relu(const Var& x);
Var log(const Var& x);
/// Adds a vector over the last axis.
Var bias_add(const Var& x, const Var& bias);

// ---- structural ------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var reshape(const Var& x, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var sum(const Var& x);
/// Softmax over the last axis.
Var softmax(const Var& x);

// ---- spatial (NCHW) ---------------------------------------------------------

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// x: [B, C, H, W], weight: [O, C / groups, K, K], bias: [O] or null.
Var conv2d(const Var& x, const Var& weight, const Var& bias, ConvOptions options = {});
/// 2x2 window, stride 2; trailing odd row/column is dropped.
Var max_pool2(const Var& x);
/// [B, C, H, W] -> [B, C]
Var global_avg_pool(const Var& x);

// ---- loss ---------------------------------------------------------------------

/// Mean over the batch of weights[y] * -log(clamp(softmax(logits)[y])),
/// computed via log-sum-exp. Probabilities are clamped to [1e-12, 1 - 1e-12].
Var weighted_cross_entropy(const Var& logits, std::vector<int> labels,
                           std::vector<double> class_weights);

inline constexpr double kProbabilityClamp = 1e-12;

}  // namespace fusecad::ad
