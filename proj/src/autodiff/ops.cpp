#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "fusecad/autodiff.hpp"

namespace fusecad::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

Var make_node(OpKind kind, std::vector<Var> inputs, Shape shape) {
  auto node = std::make_shared<Node>();
  node->kind = kind;
  node->inputs = std::move(inputs);
  node->shape = std::move(shape);
  return node;
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a->shape != b->shape) throw ShapeError(op, a->shape, b->shape);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  auto node = make_node(OpKind::add, {a, b}, a->shape);
  node->forward_fn = [](Node& self) {
    auto x = self.inputs[0]->value().data();
    auto y = self.inputs[1]->value().data();
    auto out = self.out.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  };
  node->backward_fn = [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->needs_grad) continue;
      for (std::size_t i = 0; i < self.adjoint.size(); ++i) in->adjoint[i] += self.adjoint[i];
    }
  };
  return node;
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  auto node = make_node(OpKind::mul, {a, b}, a->shape);
  node->forward_fn = [](Node& self) {
    auto x = self.inputs[0]->value().data();
    auto y = self.inputs[1]->value().data();
    auto out = self.out.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  };
  node->backward_fn = [](Node& self) {
    auto& a = self.inputs[0];
    auto& b = self.inputs[1];
    auto x = a->value().data();
    auto y = b->value().data();
    if (a->needs_grad)
      for (std::size_t i = 0; i < self.adjoint.size(); ++i) a->adjoint[i] += self.adjoint[i] * y[i];
    if (b->needs_grad)
      for (std::size_t i = 0; i < self.adjoint.size(); ++i) b->adjoint[i] += self.adjoint[i] * x[i];
  };
  return node;
}

Var scale(const Var& x, double factor) {
  auto node = make_node(OpKind::scale, {x}, x->shape);
  node->forward_fn = [factor](Node& self) {
    auto in = self.inputs[0]->value().data();
    auto out = self.out.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * in[i];
  };
  node->backward_fn = [factor](Node& self) {
    auto& in = self.inputs[0]->adjoint;
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) in[i] += factor * self.adjoint[i];
  };
  return node;
}

Var relu(const Var& x) {
  auto node = make_node(OpKind::relu, {x}, x->shape);
  node->forward_fn = [](Node& self) {
    auto in = self.inputs[0]->value().data();
    auto out = self.out.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  };
  node->backward_fn = [](Node& self) {
    auto in = self.inputs[0]->value().data();
    auto& g = self.inputs[0]->adjoint;
    for (std::size_t i = 0; i < self.adjoint.size(); ++i)
      if (in[i] > 0.0) g[i] += self.adjoint[i];
  };
  return node;
}

Var log(const Var& x) {
  auto node = make_node(OpKind::log, {x}, x->shape);
  node->forward_fn = [](Node& self) {
    auto in = self.inputs[0]->value().data();
    auto out = self.out.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(in[i]);
  };
  node->backward_fn = [](Node& self) {
    auto in = self.inputs[0]->value().data();
    auto& g = self.inputs[0]->adjoint;
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) g[i] += self.adjoint[i] / in[i];
  };
  return node;
}

Var bias_add(const Var& x, const Var& bias) {
  if (bias->shape.size() != 1 || x->shape.empty() || x->shape.back() != bias->shape[0])
    throw ShapeError("bias_add", x->shape, bias->shape);
  auto node = make_node(OpKind::bias_add, {x, bias}, x->shape);
  node->forward_fn = [](Node& self) {
    auto in = self.inputs[0]->value().data();
    auto b = self.inputs[1]->value().data();
    auto out = self.out.data();
    const std::size_t n = b.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] + b[i % n];
  };
  node->backward_fn = [](Node& self) {
    auto& x = self.inputs[0];
    auto& b = self.inputs[1];
    if (x->needs_grad)
      for (std::size_t i = 0; i < self.adjoint.size(); ++i) x->adjoint[i] += self.adjoint[i];
    if (b->needs_grad) {
      const std::size_t n = b->adjoint.size();
      for (std::size_t i = 0; i < self.adjoint.size(); ++i) b->adjoint[i % n] += self.adjoint[i];
    }
  };
  return node;
}

Var matmul(const Var& a, const Var& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
    throw ShapeError("matmul", a->shape, b->shape);
  const auto m = static_cast<Eigen::Index>(a->shape[0]);
  const auto k = static_cast<Eigen::Index>(a->shape[1]);
  const auto n = static_cast<Eigen::Index>(b->shape[1]);
  auto node = make_node(OpKind::matmul, {a, b}, {a->shape[0], b->shape[1]});
  node->forward_fn = [m, k, n](Node& self) {
    ConstMatMap x(self.inputs[0]->value().data().data(), m, k);
    ConstMatMap y(self.inputs[1]->value().data().data(), k, n);
    MatMap out(self.out.data().data(), m, n);
    out.noalias() = x * y;
  };
  node->backward_fn = [m, k, n](Node& self) {
    auto& a = self.inputs[0];
    auto& b = self.inputs[1];
    ConstMatMap g(self.adjoint.data(), m, n);
    if (a->needs_grad) {
      ConstMatMap y(b->value().data().data(), k, n);
      MatMap ga(a->adjoint.data(), m, k);
      ga.noalias() += g * y.transpose();
    }
    if (b->needs_grad) {
      ConstMatMap x(a->value().data().data(), m, k);
      MatMap gb(b->adjoint.data(), k, n);
      gb.noalias() += x.transpose() * g;
    }
  };
  return node;
}

Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != shape_size(x->shape)) throw ShapeError("reshape", x->shape, shape);
  auto node = make_node(OpKind::reshape, {x}, std::move(shape));
  node->forward_fn = [](Node& self) {
    auto in = self.inputs[0]->value().data();
    std::copy(in.begin(), in.end(), self.out.data().begin());
  };
  node->backward_fn = [](Node& self) {
    auto& g = self.inputs[0]->adjoint;
    for (std::size_t i = 0; i < self.adjoint.size(); ++i) g[i] += self.adjoint[i];
  };
  return node;
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& first = parts.front()->shape;
  if (axis >= first.size()) throw ShapeError("concat", "axis out of range for " + shape_string(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p->shape.size() != first.size()) throw ShapeError("concat", first, p->shape);
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && p->shape[d] != first[d]) throw ShapeError("concat", first, p->shape);
    shape[axis] += p->shape[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<std::size_t> chunk;
  for (const auto& p : parts) chunk.push_back(p->shape[axis] * inner);
  const std::size_t row = shape[axis] * inner;

  auto node = make_node(OpKind::concat, parts, shape);
  node->forward_fn = [outer, chunk, row](Node& self) {
    auto out = self.out.data();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      auto in = self.inputs[p]->value().data();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(in.begin() + o * chunk[p], chunk[p], out.begin() + o * row + offset);
      offset += chunk[p];
    }
  };
  node->backward_fn = [outer, chunk, row](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      auto& in = self.inputs[p];
      if (in->needs_grad) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunk[p]; ++i)
            in->adjoint[o * chunk[p] + i] += self.adjoint[o * row + offset + i];
      }
      offset += chunk[p];
    }
  };
  return node;
}

Var sum(const Var& x) {
  auto node = make_node(OpKind::sum, {x}, {1});
  node->forward_fn = [](Node& self) {
    auto in = self.inputs[0]->value().data();
    double total = 0.0;
    for (double v : in) total += v;
    self.out[0] = total;
  };
  node->backward_fn = [](Node& self) {
    for (double& g : self.inputs[0]->adjoint) g += self.adjoint[0];
  };
  return node;
}

Var softmax(const Var& x) {
  if (x->shape.empty()) throw ShapeError("softmax", "rank-0 input");
  const std::size_t width = x->shape.back();
  auto node = make_node(OpKind::softmax, {x}, x->shape);
  node->forward_fn = [width](Node& self) {
    auto in = self.inputs[0]->value().data();
    auto out = self.out.data();
    for (std::size_t r = 0; r < out.size(); r += width) {
      const double peak = *std::max_element(in.begin() + r, in.begin() + r + width);
      double total = 0.0;
      for (std::size_t i = 0; i < width; ++i) total += out[r + i] = std::exp(in[r + i] - peak);
      for (std::size_t i = 0; i < width; ++i) out[r + i] /= total;
    }
  };
  node->backward_fn = [width](Node& self) {
    auto s = self.out.data();
    auto& g = self.inputs[0]->adjoint;
    for (std::size_t r = 0; r < s.size(); r += width) {
      double dot = 0.0;
      for (std::size_t i = 0; i < width; ++i) dot += self.adjoint[r + i] * s[r + i];
      for (std::size_t i = 0; i < width; ++i) g[r + i] += s[r + i] * (self.adjoint[r + i] - dot);
    }
  };
  return node;
}

Var weighted_cross_entropy(const Var& logits, std::vector<int> labels, std::vector<double> class_weights) {
  if (logits->shape.size() != 2) throw ShapeError("loss", "logits must be [batch, classes], got " + shape_string(logits->shape));
  const std::size_t batch = logits->shape[0];
  const std::size_t classes = logits->shape[1];
  if (labels.size() != batch)
    throw ShapeError("loss", "label count " + std::to_string(labels.size()) + " vs batch " + std::to_string(batch));
  if (class_weights.size() != classes)
    throw ShapeError("loss", "class weight count " + std::to_string(class_weights.size()) + " vs classes " +
                                 std::to_string(classes));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ShapeError("loss", "label out of range");

  const double log_lo = std::log(kProbabilityClamp);
  const double log_hi = std::log1p(-kProbabilityClamp);
  auto node = make_node(OpKind::loss, {logits}, {1});
  // scratch: softmax probabilities; index_scratch: 1 where the clamp is inactive
  node->forward_fn = [=](Node& self) {
    auto z = self.inputs[0]->value().data();
    self.scratch.resize(z.size());
    self.index_scratch.assign(batch, 1);
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* row = z.data() + b * classes;
      const double peak = *std::max_element(row, row + classes);
      double acc = 0.0;
      for (std::size_t c = 0; c < classes; ++c) acc += std::exp(row[c] - peak);
      const double lse = peak + std::log(acc);
      for (std::size_t c = 0; c < classes; ++c) self.scratch[b * classes + c] = std::exp(row[c] - lse);
      double log_p = row[labels[b]] - lse;
      if (log_p < log_lo || log_p > log_hi) {
        log_p = std::clamp(log_p, log_lo, log_hi);
        self.index_scratch[b] = 0;
      }
      total += class_weights[labels[b]] * -log_p;
    }
    self.out[0] = total / static_cast<double>(batch);
  };
  node->backward_fn = [=](Node& self) {
    auto& g = self.inputs[0]->adjoint;
    const double upstream = self.adjoint[0] / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      if (!self.index_scratch[b]) continue;
      const double w = class_weights[labels[b]] * upstream;
      for (std::size_t c = 0; c < classes; ++c) {
        const double target = static_cast<int>(c) == labels[b] ? 1.0 : 0.0;
        g[b * classes + c] += w * (self.scratch[b * classes + c] - target);
      }
    }
  };
  return node;
}

}  // namespace fusecad::ad
