#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fusecad/image.hpp"
#include "fusecad/tensor.hpp"

namespace fusecad {

/// Radius-1, 8-neighbour local binary pattern. Bit 7 is the top-left
/// neighbour, continuing clockwise; a bit is set when neighbour >= centre.
/// Borders use edge replication.
GrayImage lbp_image(const GrayImage& image);

/// Single-level orthonormal 2D Haar transform (rows, then columns), tiled as
/// LL | LH over HL | HH so the plane keeps the (even-padded) input size.
/// Odd sides are padded by replicating the last column/row.
FloatPlane dwt_image(const GrayImage& image);

/// Inverse of `dwt_image`; returns the padded-size reconstruction.
FloatPlane inverse_dwt(const FloatPlane& coefficients);

/// Three normalized planes (raw US, LBP, DWT), each in [0, 1], stored
/// channel-major. Logical shape is (w, h, 3).
class FusionObject {
 public:
  static constexpr std::size_t kChannels = 3;

  FusionObject(std::size_t width, std::size_t height, std::vector<double> planes);

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::span<const double> channel(std::size_t c) const;
  const std::vector<double>& planes() const noexcept { return planes_; }

  /// [3, height, width] tensor.
  ad::Tensor to_tensor() const;
  static FusionObject from_tensor(const ad::Tensor& t);

 private:
  std::size_t width_;
  std::size_t height_;
  std::vector<double> planes_;
};

/// channel 0 = us / 255, channel 1 = lbp / 255, channel 2 = min-max(dwt).
/// A padded DWT plane is cropped back to the image size.
FusionObject fuse(const GrayImage& us, const GrayImage& lbp, const FloatPlane& dwt);

/// lbp + dwt + fuse in one call.
FusionObject featurize(const GrayImage& us);

/// How a nodule is presented to a network.
enum class InputMode { raw, augmented, fused };

InputMode parse_input_mode(const std::string& text);
std::string to_string(InputMode mode);

/// Box-filter (area averaging) resize of every plane of a [C, H, W] tensor.
ad::Tensor area_resize(const ad::Tensor& planes, std::size_t out_height, std::size_t out_width);

/// Network inputs ([3, r, r] each) for one nodule. `raw` replicates the US
/// plane on all channels; `augmented` yields three single-modality views
/// (US, LBP, DWT, each replicated); `fused` stacks the three modalities.
std::vector<ad::Tensor> model_views(const FusionObject& fusion, InputMode mode, std::size_t resolution);

}  // namespace fusecad
