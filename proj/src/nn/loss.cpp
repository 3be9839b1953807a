#include "fusecad/nn/loss.hpp"

#include <algorithm>
#include <cmath>

#include "fusecad/autodiff.hpp"

namespace fusecad::nn {

namespace {

void check_label(int y) {
  if (y != 0 && y != 1) throw std::invalid_argument("binary label must be 0 or 1, got " + std::to_string(y));
}

constexpr double kLo = ad::kProbabilityClamp;
constexpr double kHi = 1.0 - ad::kProbabilityClamp;

}  // namespace

double weighted_bce(double p, int y, ClassWeights weights) {
  check_label(y);
  const double q = std::clamp(p, kLo, kHi);
  return weights[y] * -(y * std::log(q) + (1 - y) * std::log1p(-q));
}

double weighted_bce_grad(double p, int y, ClassWeights weights) {
  check_label(y);
  if (p < kLo || p > kHi) return 0.0;
  return y == 1 ? -weights[y] / p : weights[y] / (1.0 - p);
}

}  // namespace fusecad::nn
