#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "fusecad/image.hpp"
#include "fusecad/kdl/kdl.hpp"
#include "fusecad/nn/model.hpp"

namespace fusecad::gradcam {

/// Row-major map with values in [0, 1].
struct Heatmap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

struct GradcamResult {
  Heatmap heatmap;
  int target_class = 0;
  std::size_t unit = 0;               // parameterized layer whose activation was used
  std::vector<double> channel_weights;
  std::vector<double> raw;            // ReLU(weighted sum) before upsampling, [h * w]
  std::size_t raw_width = 0;
  std::size_t raw_height = 0;
};

/// Last convolution of the last dense block, or the last convolution when
/// the model has no dense block.
std::size_t default_layer(const nn::ModelGraph& graph);

/// Builds class logits [1, classes] from a forward pass of `graph`.
using LogitsFn = std::function<ad::Var(const nn::ForwardResult&)>;

/// Grad-CAM of `unit` for one input [C, H, W]. `target_class` < 0 selects
/// the predicted class. Throws std::invalid_argument for a dense unit.
GradcamResult gradcam(const nn::ModelGraph& graph, const ad::Tensor& input, int target_class,
                      std::optional<std::size_t> unit, const LogitsFn& logits);
/// Plain model: logits are the graph's own.
GradcamResult gradcam(const nn::ModelGraph& model, const ad::Tensor& input, int target_class = -1,
                      std::optional<std::size_t> unit = std::nullopt);
/// KDL model: the student is explained; `cue` is the consult's [p0, p1] (or
/// empty for an unaided model or one with an attached consult).
GradcamResult gradcam(const kdl::KdlModel& model, const ad::Tensor& input, int target_class = -1,
                      std::optional<std::size_t> unit = std::nullopt, const std::vector<double>& cue = {});

/// Bilinear resize with half-pixel centres and edge clamping.
Heatmap resize_bilinear(const Heatmap& map, std::size_t width, std::size_t height);
/// Divides by the maximum; an all-zero map stays all-zero.
void normalize_max(Heatmap& map);

/// Blue (0) to red (1) linear colormap.
Rgb colormap(double value);
/// Per channel: round((1 - alpha) * gray + alpha * colormap(value)).
RgbImage overlay(const GrayImage& image, const Heatmap& map, double alpha);
void write_overlay(const std::filesystem::path& path, const GrayImage& image, const Heatmap& map, double alpha);
/// Float64 FCT1 file with one tensor "heatmap" of shape [height, width].
void write_heatmap(const std::filesystem::path& path, const Heatmap& map);

}  // namespace fusecad::gradcam
