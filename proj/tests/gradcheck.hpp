#pragma once
// Central finite-difference oracle, independent of the backward rules.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fusecad/autodiff.hpp"
#include "fusecad/rng.hpp"

namespace fusecad::testing {

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-5});
}

inline ad::TensorPtr random_tensor(Rng& rng, ad::Shape shape, bool requires_grad = true, double scale = 1.0) {
  auto t = std::make_shared<ad::Tensor>(ad::Tensor::zeros(std::move(shape), requires_grad));
  for (double& v : t->data()) v = scale * normal(rng);
  return t;
}

/// Projects a (possibly non-scalar) output onto a fixed random direction.
inline double project(const ad::Tensor& out, const std::vector<double>& direction) {
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * direction[i];
  return acc;
}

struct GradCheck {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

/// Compares backward() against central differences for every element of
/// every tensor in `leaves`. `build` must construct a fresh graph.
inline GradCheck gradient_check(const std::function<ad::Var()>& build, const std::vector<ad::TensorPtr>& leaves,
                                Rng& rng, double eps = 1e-6) {
  auto root = build();
  ad::forward(root);
  std::vector<double> direction(ad::shape_size(root->shape));
  for (double& d : direction) d = normal(rng);
  for (auto& leaf : leaves) leaf->drop_grad();
  ad::backward(root, ad::Tensor(root->shape, direction));

  GradCheck result;
  for (auto& leaf : leaves) {
    const std::vector<double> analytic(leaf->grad().begin(), leaf->grad().end());
    for (std::size_t i = 0; i < leaf->size(); ++i) {
      const double saved = (*leaf)[i];
      (*leaf)[i] = saved + eps;
      const double up = project(ad::forward(build()), direction);
      (*leaf)[i] = saved - eps;
      const double down = project(ad::forward(build()), direction);
      (*leaf)[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace fusecad::testing
