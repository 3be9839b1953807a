#include "fusecad/gradcam/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fusecad/serialize.hpp"

namespace fusecad::gradcam {

std::size_t default_layer(const nn::ModelGraph& graph) {
  const auto& layers = graph.layers();
  const auto& units = graph.units();
  std::optional<std::size_t> block;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == nn::LayerKind::dense_block) block = i;
  std::optional<std::size_t> pick;
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (!units[u].spatial) continue;
    if (!block || units[u].layer == *block) pick = u;
  }
  if (!pick) throw std::invalid_argument("model has no convolutional layer to explain");
  return *pick;
}

GradcamResult gradcam(const nn::ModelGraph& graph, const ad::Tensor& input, int target_class,
                      std::optional<std::size_t> unit, const LogitsFn& logits_fn) {
  if (input.shape() != graph.input_shape()) throw ad::ShapeError("gradcam input", input.shape(), graph.input_shape());
  const std::size_t u = unit ? *unit : default_layer(graph);
  if (u >= graph.units().size()) throw std::invalid_argument("no parameterized layer " + std::to_string(u));
  if (!graph.units()[u].spatial)
    throw std::invalid_argument("layer " + graph.units()[u].name + " is not spatial; Grad-CAM needs a convolution");

  ad::Shape batched{1};
  batched.insert(batched.end(), input.shape().begin(), input.shape().end());
  const auto pass = graph.forward(ad::constant(ad::Tensor(batched, input.values())));
  const ad::Var activation = pass.unit_outputs[u];
  activation->retain = true;
  const ad::Var logits = logits_fn(pass);
  const ad::Tensor values = ad::forward(logits);
  const std::size_t classes = values.dim(1);

  GradcamResult result;
  result.unit = u;
  if (target_class < 0) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (values.values()[c] > values.values()[best]) best = c;
    target_class = static_cast<int>(best);
  }
  if (static_cast<std::size_t>(target_class) >= classes)
    throw std::invalid_argument("target class " + std::to_string(target_class) + " out of range");
  result.target_class = target_class;

  std::vector<double> pick(classes, 0.0);
  pick[static_cast<std::size_t>(target_class)] = 1.0;
  const ad::Var score = ad::sum(ad::mul(logits, ad::constant(ad::Tensor({1, classes}, pick))));
  ad::forward(score);
  ad::backward(score);

  const ad::Tensor& a = activation->value();
  const std::size_t channels = a.dim(1), h = a.dim(2), w = a.dim(3), area = h * w;
  const auto grad = activation->grad();
  result.channel_weights.assign(channels, 0.0);
  result.raw.assign(area, 0.0);
  result.raw_width = w;
  result.raw_height = h;
  if (!grad.empty()) {
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < area; ++i) s += grad[c * area + i];
      result.channel_weights[c] = s / static_cast<double>(area);
    }
  }
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < area; ++i) result.raw[i] += result.channel_weights[c] * a.values()[c * area + i];
  for (double& v : result.raw) v = std::max(v, 0.0);

  Heatmap coarse{w, h, result.raw};
  result.heatmap = resize_bilinear(coarse, input.dim(2), input.dim(1));
  normalize_max(result.heatmap);
  return result;
}

namespace {

/// Copy whose parameters all have requires_grad off, so the backward sweep
/// only reaches the retained activation and leaves the caller's buffers alone.
nn::ModelGraph frozen_copy(const nn::ModelGraph& model) {
  nn::ModelGraph copy = model;
  copy.freeze(1.0, 0);
  return copy;
}

}  // namespace

GradcamResult gradcam(const nn::ModelGraph& model, const ad::Tensor& input, int target_class,
                      std::optional<std::size_t> unit) {
  const nn::ModelGraph copy = frozen_copy(model);
  return gradcam(copy, input, target_class, unit, [](const nn::ForwardResult& pass) { return pass.logits; });
}

GradcamResult gradcam(const kdl::KdlModel& model, const ad::Tensor& input, int target_class,
                      std::optional<std::size_t> unit, const std::vector<double>& cue) {
  kdl::KdlModel copy = model;
  copy.student().freeze(1.0, 0);
  copy.head().freeze(1.0, 0);
  ad::Shape batched{1};
  batched.insert(batched.end(), input.shape().begin(), input.shape().end());
  nn::Batch batch;
  // the consult path sees the same input as the student
  batch.inputs = ad::constant(ad::Tensor(batched, input.values()));
  if (!cue.empty()) {
    if (cue.size() != kdl::kCueWidth) throw std::invalid_argument("cue must hold two probabilities");
    batch.aux = ad::constant(ad::Tensor({1, kdl::kCueWidth}, cue));
  }
  return gradcam(copy.student(), input, target_class, unit,
                 [&](const nn::ForwardResult& pass) { return copy.head_logits(pass, batch); });
}

Heatmap resize_bilinear(const Heatmap& map, std::size_t width, std::size_t height) {
  if (map.width == 0 || map.height == 0 || width == 0 || height == 0) throw std::invalid_argument("empty heatmap");
  Heatmap out{width, height, std::vector<double>(width * height)};
  auto coord = [](std::size_t o, std::size_t n_out, std::size_t n_in, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, n_in - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, height, map.height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, width, map.width, x0, x1, fx);
      const double top = (1.0 - fx) * map.at(x0, y0) + fx * map.at(x1, y0);
      const double bottom = (1.0 - fx) * map.at(x0, y1) + fx * map.at(x1, y1);
      out.values[y * width + x] = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

void normalize_max(Heatmap& map) {
  double peak = 0.0;
  for (double v : map.values) peak = std::max(peak, v);
  if (peak <= 0.0) {
    std::fill(map.values.begin(), map.values.end(), 0.0);
    return;
  }
  for (double& v : map.values) v = std::clamp(v / peak, 0.0, 1.0);
}

Rgb colormap(double value) {
  const double v = std::clamp(value, 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255.0 * v)), 0,
          static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - v)))};
}

RgbImage overlay(const GrayImage& image, const Heatmap& map, double alpha) {
  if (image.width() != map.width || image.height() != map.height)
    throw std::invalid_argument("heatmap " + std::to_string(map.width) + "x" + std::to_string(map.height) +
                                " does not match image " + std::to_string(image.width()) + "x" +
                                std::to_string(image.height()));
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  RgbImage out{image.width(), image.height(), std::vector<Rgb>(image.width() * image.height())};
  auto blend = [alpha](double gray, double color) {
    return static_cast<std::uint8_t>(std::lround((1.0 - alpha) * gray + alpha * color));
  };
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double g = image.pixels()[i];
    const Rgb c = colormap(map.values[i]);
    out.pixels[i] = {blend(g, c.r), blend(g, c.g), blend(g, c.b)};
  }
  return out;
}

void write_overlay(const std::filesystem::path& path, const GrayImage& image, const Heatmap& map, double alpha) {
  write_ppm(path, overlay(image, map, alpha));
}

void write_heatmap(const std::filesystem::path& path, const Heatmap& map) {
  ad::save_fct(path, {{"heatmap", ad::Tensor({map.height, map.width}, map.values)}});
}

}  // namespace fusecad::gradcam
