#pragma once
// Reference implementations written directly from the definitions, used only
// to check the production kernels.

#include <cmath>

#include "fusecad/image.hpp"
#include "fusecad/rng.hpp"

namespace fusecad::testing {

inline GrayImage random_image(Rng& rng, std::size_t w, std::size_t h, int lo = 0, int hi = 255) {
  GrayImage img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) img.at(x, y) = static_cast<std::uint8_t>(uniform_int(rng, lo, hi));
  return img;
}

/// Per-pixel double loop over explicit neighbour coordinates.
inline GrayImage naive_lbp(const GrayImage& img) {
  const int w = static_cast<int>(img.width()), h = static_cast<int>(img.height());
  auto pixel = [&](int x, int y) {
    if (x < 0) x = 0;
    if (y < 0) y = 0;
    if (x >= w) x = w - 1;
    if (y >= h) y = h - 1;
    return static_cast<int>(img.pixels()[static_cast<std::size_t>(y * w + x)]);
  };
  GrayImage out(img.width(), img.height());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int c = pixel(x, y);
      const int ring[8] = {pixel(x - 1, y - 1), pixel(x, y - 1), pixel(x + 1, y - 1), pixel(x + 1, y),
                           pixel(x + 1, y + 1), pixel(x, y + 1), pixel(x - 1, y + 1), pixel(x - 1, y)};
      int code = 0;
      for (int k = 0; k < 8; ++k)
        if (ring[k] >= c) code += 1 << (7 - k);
      out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = static_cast<std::uint8_t>(code);
    }
  }
  return out;
}

/// Closed form per 2x2 block [a b; c d] of an even-sided image.
inline FloatPlane block_haar_oracle(const GrayImage& img) {
  const std::size_t w = img.width(), h = img.height(), hw = w / 2, hh = h / 2;
  FloatPlane out{w, h, std::vector<double>(w * h)};
  for (std::size_t by = 0; by < hh; ++by)
    for (std::size_t bx = 0; bx < hw; ++bx) {
      const double a = img.at(2 * bx, 2 * by), b = img.at(2 * bx + 1, 2 * by);
      const double c = img.at(2 * bx, 2 * by + 1), d = img.at(2 * bx + 1, 2 * by + 1);
      out.at(bx, by) = (a + b + c + d) / 2;
      out.at(hw + bx, by) = (a - b + c - d) / 2;
      out.at(bx, hh + by) = (a + b - c - d) / 2;
      out.at(hw + bx, hh + by) = (a - b - c + d) / 2;
    }
  return out;
}

}  // namespace fusecad::testing
