#include <algorithm>
#include <unordered_set>
#include <utility>

#include "fusecad/autodiff.hpp"

namespace fusecad::ad {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::concat: return "concat";
    case OpKind::pool: return "pool";
    case OpKind::reshape: return "reshape";
    case OpKind::log: return "log";
    case OpKind::sum: return "sum";
    case OpKind::scale: return "scale";
    case OpKind::bias_add: return "bias_add";
    case OpKind::stop_gradient: return "stop_gradient";
    case OpKind::loss: return "loss";
  }
  return "unknown";
}

ShapeError::ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
    : std::invalid_argument(op + ": incompatible shapes " + shape_string(lhs) + " and " + shape_string(rhs)) {}

ShapeError::ShapeError(const std::string& op, const std::string& detail)
    : std::invalid_argument(op + ": " + detail) {}

const Tensor& Node::value() const {
  if (leaf) return *leaf;
  if (!evaluated) throw GraphError(std::string("value of unevaluated ") + op_name(kind) + " node");
  return out;
}

namespace {

std::vector<Node*> topological_order(const Var& root) {
  std::vector<Node*> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

Tensor forward(const Var& root) {
  if (!root) throw GraphError("forward on null graph");
  for (Node* node : topological_order(root)) {
    if (node->leaf) continue;
    if (node->out.shape() != node->shape) node->out = Tensor(node->shape);
    node->forward_fn(*node);
    node->evaluated = true;
  }
  return root->value();
}

void backward(const Var& root, const Tensor& seed) {
  if (!root) throw GraphError("backward on null graph");
  if (!root->leaf && !root->evaluated) throw GraphError("backward called before forward");
  if (seed.shape() != root->shape)
    throw GraphError("seed shape " + shape_string(seed.shape()) + " does not match output shape " +
                     shape_string(root->shape));

  const auto order = topological_order(root);
  // A node carries an adjoint when some trainable (or retained) leaf lies
  // below it and the root reaches it without crossing a stop_gradient.
  std::unordered_set<const Node*> reached{root.get()};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!reached.count(node) || node->kind == OpKind::stop_gradient) continue;
    for (const auto& in : node->inputs) reached.insert(in.get());
  }
  for (Node* node : order) {
    if (node->leaf) {
      node->needs_grad = node->leaf->requires_grad() || node->retain;
    } else if (node->kind == OpKind::stop_gradient) {
      node->needs_grad = node->retain;
    } else {
      node->needs_grad = node->retain ||
                         std::any_of(node->inputs.begin(), node->inputs.end(),
                                     [](const Var& in) { return in->needs_grad; });
    }
  }
  for (Node* node : order) {
    node->needs_grad = node->needs_grad && reached.count(node);
    if (node->needs_grad)
      node->adjoint.assign(shape_size(node->shape), 0.0);
    else
      node->adjoint.clear();
  }
  if (!root->needs_grad) return;
  std::copy(seed.data().begin(), seed.data().end(), root->adjoint.begin());

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->needs_grad) continue;
    if (node->leaf) {
      if (node->leaf->requires_grad()) {
        auto g = node->leaf->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += node->adjoint[i];
      }
      continue;
    }
    const bool feeds_grad = std::any_of(node->inputs.begin(), node->inputs.end(),
                                        [](const Var& in) { return in->needs_grad; });
    if (node->backward_fn && feeds_grad) node->backward_fn(*node);
  }
}

void backward(const Var& root) {
  Tensor seed(root->shape);
  std::fill(seed.data().begin(), seed.data().end(), 1.0);
  backward(root, seed);
}

Var param(TensorPtr tensor) {
  if (!tensor) throw GraphError("param: null tensor");
  auto node = std::make_shared<Node>();
  node->kind = OpKind::leaf;
  node->shape = tensor->shape();
  node->leaf = std::move(tensor);
  return node;
}

Var constant(Tensor value) {
  value.set_requires_grad(false);
  return param(std::make_shared<Tensor>(std::move(value)));
}

Var stop_gradient(const Var& x) {
  auto node = std::make_shared<Node>();
  node->kind = OpKind::stop_gradient;
  node->inputs = {x};
  node->shape = x->shape;
  node->forward_fn = [](Node& self) {
    auto src = self.inputs[0]->value().data();
    std::copy(src.begin(), src.end(), self.out.data().begin());
  };
  return node;
}

}  // namespace fusecad::ad
