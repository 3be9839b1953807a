#pragma once

#include <array>
#include <stdexcept>
#include <string>

namespace fusecad::nn {

/// Per-class loss weights, indexed by label (0 benign, 1 malignant).
struct ClassWeights {
  double benign = 0.2;
  double malignant = 1.0;

  double operator[](int label) const { return label == 1 ? malignant : benign; }
  bool operator==(const ClassWeights&) const = default;
};

/// weights[y] * -(y log p + (1 - y) log(1 - p)), p clamped to [1e-12, 1 - 1e-12].
double weighted_bce(double p, int y, ClassWeights weights);

/// dL/dp of `weighted_bce`; zero where the clamp is active.
double weighted_bce_grad(double p, int y, ClassWeights weights);

}  // namespace fusecad::nn
