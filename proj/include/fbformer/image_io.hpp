#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace fbf {

/// 8-bit image with interleaved channels (1 = gray, 3 = RGB).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, 0) {}

  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

using Rgb = std::array<std::uint8_t, 3>;

/// Reads a PNG as gray (for gray sources) or RGB (for colour sources).
/// Throws DataError when the file is missing or not a PNG.
Image read_png(const std::string& path);
/// Reads a single-channel label PNG; colour label files are a DataError.
Image read_label_png(const std::string& path);
/// Writes a gray or RGB PNG. Output bytes depend only on the pixels.
void write_png(const std::string& path, const Image& image);

/// "#rrggbb" <-> Rgb.
Rgb parse_rgb(const std::string& hex);
std::string rgb_hex(const Rgb& c);

}  // namespace fbf
