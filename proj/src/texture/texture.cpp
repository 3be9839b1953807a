#include "fusecad/texture.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fusecad {

GrayImage lbp_image(const GrayImage& image) {
  static constexpr int kDx[8] = {-1, 0, 1, 1, 1, 0, -1, -1};
  static constexpr int kDy[8] = {-1, -1, -1, 0, 1, 1, 1, 0};
  GrayImage out(image.width(), image.height());
  for (std::size_t y = 0; y < image.height(); ++y) {
    for (std::size_t x = 0; x < image.width(); ++x) {
      const auto centre = image.at(x, y);
      unsigned code = 0;
      for (int k = 0; k < 8; ++k) {
        const auto n = image.clamped(static_cast<std::ptrdiff_t>(x) + kDx[k], static_cast<std::ptrdiff_t>(y) + kDy[k]);
        code = (code << 1) | (n >= centre ? 1u : 0u);
      }
      out.at(x, y) = static_cast<std::uint8_t>(code);
    }
  }
  return out;
}

namespace {

const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

// One Haar analysis pass over `n` samples spaced `stride` apart: lows land in
// the first half, highs in the second.
void haar_pass(double* data, std::size_t n, std::size_t stride, std::vector<double>& tmp) {
  tmp.resize(n);
  const std::size_t half = n / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double a = data[2 * i * stride];
    const double b = data[(2 * i + 1) * stride];
    tmp[i] = (a + b) * kInvSqrt2;
    tmp[half + i] = (a - b) * kInvSqrt2;
  }
  for (std::size_t i = 0; i < n; ++i) data[i * stride] = tmp[i];
}

void haar_inverse_pass(double* data, std::size_t n, std::size_t stride, std::vector<double>& tmp) {
  tmp.resize(n);
  const std::size_t half = n / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double lo = data[i * stride];
    const double hi = data[(half + i) * stride];
    tmp[2 * i] = (lo + hi) * kInvSqrt2;
    tmp[2 * i + 1] = (lo - hi) * kInvSqrt2;
  }
  for (std::size_t i = 0; i < n; ++i) data[i * stride] = tmp[i];
}

}  // namespace

FloatPlane dwt_image(const GrayImage& image) {
  FloatPlane plane;
  plane.pad_right = image.width() % 2;
  plane.pad_bottom = image.height() % 2;
  plane.width = image.width() + plane.pad_right;
  plane.height = image.height() + plane.pad_bottom;
  plane.values.resize(plane.width * plane.height);
  for (std::size_t y = 0; y < plane.height; ++y)
    for (std::size_t x = 0; x < plane.width; ++x)
      plane.at(x, y) = image.clamped(static_cast<std::ptrdiff_t>(x), static_cast<std::ptrdiff_t>(y));

  std::vector<double> tmp;
  for (std::size_t y = 0; y < plane.height; ++y) haar_pass(&plane.at(0, y), plane.width, 1, tmp);
  for (std::size_t x = 0; x < plane.width; ++x) haar_pass(&plane.at(x, 0), plane.height, plane.width, tmp);
  return plane;
}

FloatPlane inverse_dwt(const FloatPlane& coefficients) {
  if (coefficients.width % 2 || coefficients.height % 2)
    throw std::invalid_argument("inverse_dwt: coefficient plane must have even sides");
  FloatPlane plane = coefficients;
  std::vector<double> tmp;
  for (std::size_t x = 0; x < plane.width; ++x) haar_inverse_pass(&plane.at(x, 0), plane.height, plane.width, tmp);
  for (std::size_t y = 0; y < plane.height; ++y) haar_inverse_pass(&plane.at(0, y), plane.width, 1, tmp);
  return plane;
}

FusionObject::FusionObject(std::size_t width, std::size_t height, std::vector<double> planes)
    : width_(width), height_(height), planes_(std::move(planes)) {
  if (planes_.size() != kChannels * width_ * height_)
    throw std::invalid_argument("fusion object: plane data does not match (w, h, 3)");
}

std::span<const double> FusionObject::channel(std::size_t c) const {
  if (c >= kChannels) throw std::out_of_range("fusion object has 3 channels");
  return std::span<const double>(planes_).subspan(c * width_ * height_, width_ * height_);
}

ad::Tensor FusionObject::to_tensor() const { return ad::Tensor({kChannels, height_, width_}, planes_); }

FusionObject FusionObject::from_tensor(const ad::Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != kChannels) throw std::invalid_argument("fusion tensor must be [3, H, W]");
  return FusionObject(t.dim(2), t.dim(1), t.values());
}

FusionObject fuse(const GrayImage& us, const GrayImage& lbp, const FloatPlane& dwt) {
  const std::size_t w = us.width(), h = us.height();
  if (lbp.width() != w || lbp.height() != h || dwt.width - dwt.pad_right != w || dwt.height - dwt.pad_bottom != h)
    throw std::invalid_argument("fuse: dimension mismatch between US " + std::to_string(w) + "x" + std::to_string(h) +
                                ", LBP " + std::to_string(lbp.width()) + "x" + std::to_string(lbp.height()) +
                                " and DWT " + std::to_string(dwt.width - dwt.pad_right) + "x" +
                                std::to_string(dwt.height - dwt.pad_bottom));
  std::vector<double> planes(3 * w * h);
  double lo = dwt.at(0, 0), hi = lo;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      lo = std::min(lo, dwt.at(x, y));
      hi = std::max(hi, dwt.at(x, y));
    }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      planes[i] = us.at(x, y) / 255.0;
      planes[w * h + i] = lbp.at(x, y) / 255.0;
      planes[2 * w * h + i] = hi > lo ? (dwt.at(x, y) - lo) / (hi - lo) : 0.0;
    }
  }
  return FusionObject(w, h, std::move(planes));
}

FusionObject featurize(const GrayImage& us) { return fuse(us, lbp_image(us), dwt_image(us)); }

InputMode parse_input_mode(const std::string& text) {
  if (text == "raw") return InputMode::raw;
  if (text == "augmented") return InputMode::augmented;
  if (text == "fused") return InputMode::fused;
  throw std::invalid_argument("unknown input mode '" + text + "' (expected raw, augmented or fused)");
}

std::string to_string(InputMode mode) {
  switch (mode) {
    case InputMode::raw: return "raw";
    case InputMode::augmented: return "augmented";
    case InputMode::fused: return "fused";
  }
  return "?";
}

ad::Tensor area_resize(const ad::Tensor& planes, std::size_t out_height, std::size_t out_width) {
  if (planes.rank() != 3) throw std::invalid_argument("area_resize expects [C, H, W]");
  const std::size_t channels = planes.dim(0), in_h = planes.dim(1), in_w = planes.dim(2);
  if (in_h == out_height && in_w == out_width) return planes;

  // Overlap of output cell [o*s, (o+1)*s) with input cell [i, i+1), in input units.
  auto weights = [](std::size_t in, std::size_t out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> table(out);
    const double s = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double a = o * s, b = (o + 1) * s;
      for (auto i = static_cast<std::size_t>(std::floor(a)); i < in && static_cast<double>(i) < b; ++i) {
        const double overlap = std::min(b, i + 1.0) - std::max(a, static_cast<double>(i));
        if (overlap > 0) table[o].emplace_back(i, overlap / s);
      }
    }
    return table;
  };
  const auto wy = weights(in_h, out_height);
  const auto wx = weights(in_w, out_width);
  ad::Tensor out({channels, out_height, out_width});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t oy = 0; oy < out_height; ++oy)
      for (std::size_t ox = 0; ox < out_width; ++ox) {
        double acc = 0.0;
        for (auto [iy, fy] : wy[oy])
          for (auto [ix, fx] : wx[ox]) acc += fy * fx * planes[(c * in_h + iy) * in_w + ix];
        out[(c * out_height + oy) * out_width + ox] = acc;
      }
  return out;
}

std::vector<ad::Tensor> model_views(const FusionObject& fusion, InputMode mode, std::size_t resolution) {
  const ad::Tensor small = area_resize(fusion.to_tensor(), resolution, resolution);
  const std::size_t area = resolution * resolution;
  auto replicate = [&](std::size_t source) {
    ad::Tensor view({3, resolution, resolution});
    for (std::size_t c = 0; c < 3; ++c)
      std::copy_n(small.data().begin() + source * area, area, view.data().begin() + c * area);
    return view;
  };
  switch (mode) {
    case InputMode::raw: return {replicate(0)};
    case InputMode::augmented: return {replicate(0), replicate(1), replicate(2)};
    case InputMode::fused: return {small};
  }
  return {};
}

}  // namespace fusecad
