#include "fusecad/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace fusecad {

GrayImage::GrayImage(std::size_t width, std::size_t height, std::uint8_t fill)
    : GrayImage(width, height, std::vector<std::uint8_t>(width * height, fill)) {}

GrayImage::GrayImage(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
  if (width_ < 8 || height_ < 8)
    throw ImageError("image must be at least 8x8, got " + std::to_string(width_) + "x" + std::to_string(height_));
  if (pixels_.size() != width_ * height_) throw ImageError("pixel count does not match image dimensions");
}

std::uint8_t GrayImage::clamped(std::ptrdiff_t x, std::ptrdiff_t y) const {
  x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(width_) - 1);
  y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(height_) - 1);
  return pixels_[static_cast<std::size_t>(y) * width_ + static_cast<std::size_t>(x)];
}

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reads the whitespace/comment separated header fields of a netpbm file.
struct HeaderReader {
  const std::string& bytes;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::string token() {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#') ++pos;
    if (start == pos) throw ImageError("truncated netpbm header");
    return bytes.substr(start, pos - start);
  }

  std::size_t number() {
    const auto t = token();
    if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
      throw ImageError("bad netpbm header field '" + t + "'");
    return std::stoul(t);
  }
};

}  // namespace

GrayImage parse_pgm(const std::string& bytes) {
  HeaderReader header{bytes};
  if (header.token() != "P5") throw ImageError("not a binary PGM (P5)");
  const auto width = header.number();
  const auto height = header.number();
  const auto maxval = header.number();
  if (maxval == 0 || maxval > 255) throw ImageError("only 8-bit PGM is supported");
  ++header.pos;  // single whitespace after maxval
  if (bytes.size() < header.pos + width * height) throw ImageError("truncated PGM payload");
  std::vector<std::uint8_t> pixels(bytes.begin() + static_cast<std::ptrdiff_t>(header.pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(header.pos + width * height));
  if (maxval != 255)
    for (auto& p : pixels) p = static_cast<std::uint8_t>(std::lround(255.0 * std::min<std::size_t>(p, maxval) / maxval));
  return GrayImage(width, height, std::move(pixels));
}

GrayImage read_pgm(const std::filesystem::path& path) {
  try {
    return parse_pgm(slurp(path));
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

std::string encode_pgm(const GrayImage& image) {
  std::string out = "P5\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  out.append(image.pixels().begin(), image.pixels().end());
  return out;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write " + path.string());
  out << encode_pgm(image);
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  for (const auto& px : image.pixels) {
    const char rgb[3] = {static_cast<char>(px.r), static_cast<char>(px.g), static_cast<char>(px.b)};
    out.write(rgb, 3);
  }
  if (!out) throw ImageError("write failed for " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  HeaderReader header{bytes};
  if (header.token() != "P6") throw ImageError(path.string() + ": not a binary PPM (P6)");
  RgbImage image;
  image.width = header.number();
  image.height = header.number();
  if (header.number() != 255) throw ImageError(path.string() + ": only 8-bit PPM is supported");
  ++header.pos;
  if (bytes.size() < header.pos + 3 * image.width * image.height) throw ImageError(path.string() + ": truncated PPM");
  image.pixels.resize(image.width * image.height);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data() + header.pos + 3 * i);
    image.pixels[i] = {p[0], p[1], p[2]};
  }
  return image;
}

GrayImage to_gray(const FloatPlane& plane) {
  const auto [lo, hi] = std::minmax_element(plane.values.begin(), plane.values.end());
  std::vector<std::uint8_t> pixels(plane.values.size(), 0);
  if (*hi > *lo) {
    const double span = *hi - *lo;
    for (std::size_t i = 0; i < pixels.size(); ++i)
      pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (plane.values[i] - *lo) / span));
  }
  return GrayImage(plane.width, plane.height, std::move(pixels));
}

}  // namespace fusecad
