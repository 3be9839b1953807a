#include <Eigen/Core>
#include <algorithm>
#include <limits>

#include "fusecad/autodiff.hpp"

namespace fusecad::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kernel, stride, padding, groups;
  std::size_t out_height, out_width;

  std::size_t group_in() const { return channels / groups; }
  std::size_t group_out() const { return out_channels / groups; }
  std::size_t col_rows() const { return group_in() * kernel * kernel; }
  std::size_t col_cols() const { return out_height * out_width; }
  std::size_t col_size() const { return col_rows() * col_cols(); }
};

void im2col(const double* image, const ConvGeometry& g, std::size_t group, double* col) {
  const std::size_t plane = g.height * g.width;
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.group_in(); ++c) {
    const double* src = image + (group * g.group_in() + c) * plane;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* dst = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
          double* row = dst + oy * g.out_width;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(row, g.out_width, 0.0);
            continue;
          }
          const double* line = src + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? 0.0 : line[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, std::size_t group, double* image_grad) {
  const std::size_t plane = g.height * g.width;
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.group_in(); ++c) {
    double* dst = image_grad + (group * g.group_in() + c) * plane;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* src = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* line = dst + static_cast<std::size_t>(iy) * g.width;
          const double* row = src + oy * g.out_width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) line[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, ConvOptions options) {
  if (x->shape.size() != 4) throw ShapeError("conv2d", "input must be [B, C, H, W], got " + shape_string(x->shape));
  if (weight->shape.size() != 4 || weight->shape[2] != weight->shape[3])
    throw ShapeError("conv2d", "weight must be [O, C/groups, K, K], got " + shape_string(weight->shape));
  if (options.stride == 0 || options.groups == 0) throw ShapeError("conv2d", "stride and groups must be positive");

  ConvGeometry g{};
  g.batch = x->shape[0];
  g.channels = x->shape[1];
  g.height = x->shape[2];
  g.width = x->shape[3];
  g.out_channels = weight->shape[0];
  g.kernel = weight->shape[2];
  g.stride = options.stride;
  g.padding = options.padding;
  g.groups = options.groups;
  if (g.channels % g.groups || g.out_channels % g.groups || weight->shape[1] != g.group_in())
    throw ShapeError("conv2d", x->shape, weight->shape);
  if (g.height + 2 * g.padding < g.kernel || g.width + 2 * g.padding < g.kernel)
    throw ShapeError("conv2d", x->shape, weight->shape);
  if (bias && (bias->shape.size() != 1 || bias->shape[0] != g.out_channels))
    throw ShapeError("conv2d", weight->shape, bias->shape);
  g.out_height = (g.height + 2 * g.padding - g.kernel) / g.stride + 1;
  g.out_width = (g.width + 2 * g.padding - g.kernel) / g.stride + 1;

  auto node = std::make_shared<Node>();
  node->kind = OpKind::conv2d;
  node->inputs = {x, weight};
  if (bias) node->inputs.push_back(bias);
  node->shape = {g.batch, g.out_channels, g.out_height, g.out_width};

  node->forward_fn = [g](Node& self) {
    const auto rows = static_cast<Eigen::Index>(g.col_rows());
    const auto cols = static_cast<Eigen::Index>(g.col_cols());
    const auto gout = static_cast<Eigen::Index>(g.group_out());
    const double* in = self.inputs[0]->value().data().data();
    const double* w = self.inputs[1]->value().data().data();
    double* out = self.out.data().data();
    self.scratch.resize(g.batch * g.groups * g.col_size());
    const std::size_t in_stride = g.channels * g.height * g.width;
    const std::size_t out_stride = g.out_channels * g.col_cols();
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        double* col = self.scratch.data() + (b * g.groups + grp) * g.col_size();
        im2col(in + b * in_stride, g, grp, col);
        ConstMatMap wm(w + grp * g.group_out() * g.col_rows(), gout, rows);
        ConstMatMap cm(col, rows, cols);
        MatMap om(out + b * out_stride + grp * g.group_out() * g.col_cols(), gout, cols);
        om.noalias() = wm * cm;
      }
    }
    if (self.inputs.size() > 2) {
      auto bvals = self.inputs[2]->value().data();
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          double* plane = out + b * out_stride + o * g.col_cols();
          for (std::size_t i = 0; i < g.col_cols(); ++i) plane[i] += bvals[o];
        }
    }
  };

  node->backward_fn = [g](Node& self) {
    const auto rows = static_cast<Eigen::Index>(g.col_rows());
    const auto cols = static_cast<Eigen::Index>(g.col_cols());
    const auto gout = static_cast<Eigen::Index>(g.group_out());
    auto& x = self.inputs[0];
    auto& w = self.inputs[1];
    const std::size_t in_stride = g.channels * g.height * g.width;
    const std::size_t out_stride = g.out_channels * g.col_cols();
    std::vector<double> dcol(x->needs_grad ? g.col_size() : 0);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        const double* col = self.scratch.data() + (b * g.groups + grp) * g.col_size();
        ConstMatMap dout(self.adjoint.data() + b * out_stride + grp * g.group_out() * g.col_cols(), gout, cols);
        if (w->needs_grad) {
          MatMap dw(w->adjoint.data() + grp * g.group_out() * g.col_rows(), gout, rows);
          dw.noalias() += dout * ConstMatMap(col, rows, cols).transpose();
        }
        if (x->needs_grad) {
          ConstMatMap wm(w->value().data().data() + grp * g.group_out() * g.col_rows(), gout, rows);
          MatMap dc(dcol.data(), rows, cols);
          dc.noalias() = wm.transpose() * dout;
          col2im(dcol.data(), g, grp, x->adjoint.data() + b * in_stride);
        }
      }
    }
    if (self.inputs.size() > 2 && self.inputs[2]->needs_grad) {
      auto& db = self.inputs[2]->adjoint;
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          const double* plane = self.adjoint.data() + b * out_stride + o * g.col_cols();
          double acc = 0.0;
          for (std::size_t i = 0; i < g.col_cols(); ++i) acc += plane[i];
          db[o] += acc;
        }
    }
  };
  return node;
}

Var max_pool2(const Var& x) {
  if (x->shape.size() != 4 || x->shape[2] < 2 || x->shape[3] < 2)
    throw ShapeError("pool", "max_pool2 needs [B, C, H>=2, W>=2], got " + shape_string(x->shape));
  const std::size_t planes = x->shape[0] * x->shape[1];
  const std::size_t h = x->shape[2], w = x->shape[3];
  const std::size_t oh = h / 2, ow = w / 2;
  auto node = std::make_shared<Node>();
  node->kind = OpKind::pool;
  node->inputs = {x};
  node->shape = {x->shape[0], x->shape[1], oh, ow};
  node->forward_fn = [=](Node& self) {
    auto in = self.inputs[0]->value().data();
    auto out = self.out.data();
    self.index_scratch.resize(out.size());
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = p * h * w + 2 * oy * w + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
              if (in[idx] > in[best]) best = idx;
            }
          const std::size_t o = p * oh * ow + oy * ow + ox;
          out[o] = in[best];
          self.index_scratch[o] = best;
        }
    }
  };
  node->backward_fn = [](Node& self) {
    auto& g = self.inputs[0]->adjoint;
    for (std::size_t o = 0; o < self.adjoint.size(); ++o) g[self.index_scratch[o]] += self.adjoint[o];
  };
  return node;
}

Var global_avg_pool(const Var& x) {
  if (x->shape.size() != 4) throw ShapeError("pool", "global_avg_pool needs [B, C, H, W], got " + shape_string(x->shape));
  const std::size_t planes = x->shape[0] * x->shape[1];
  const std::size_t area = x->shape[2] * x->shape[3];
  auto node = std::make_shared<Node>();
  node->kind = OpKind::pool;
  node->inputs = {x};
  node->shape = {x->shape[0], x->shape[1]};
  node->forward_fn = [=](Node& self) {
    auto in = self.inputs[0]->value().data();
    for (std::size_t p = 0; p < planes; ++p) {
      double acc = 0.0;
      for (std::size_t i = 0; i < area; ++i) acc += in[p * area + i];
      self.out[p] = acc / static_cast<double>(area);
    }
  };
  node->backward_fn = [=](Node& self) {
    auto& g = self.inputs[0]->adjoint;
    for (std::size_t p = 0; p < planes; ++p) {
      const double share = self.adjoint[p] / static_cast<double>(area);
      for (std::size_t i = 0; i < area; ++i) g[p * area + i] += share;
    }
  };
  return node;
}

}  // namespace fusecad::ad
