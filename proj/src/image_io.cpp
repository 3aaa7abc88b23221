#include "fbformer/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>

#include "fbformer/tensor.hpp"

namespace fbf {

namespace {

Image read_with_format(const std::string& path, bool labels) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot read PNG '" + path + "': " + img.message);
  }
  const bool colour = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  if (labels && colour) {
    png_image_free(&img);
    throw DataError("label file '" + path + "' must be a single-channel index PNG");
  }
  img.format = colour ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image out(static_cast<int>(img.width), static_cast<int>(img.height), colour ? 3 : 1);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    throw DataError("cannot decode PNG '" + path + "': " + img.message);
  }
  return out;
}

}  // namespace

Image read_png(const std::string& path) { return read_with_format(path, false); }

Image read_label_png(const std::string& path) { return read_with_format(path, true); }

void write_png(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw UsageError("write_png: unsupported channel count " + std::to_string(image.channels));
  }
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path + "': " + img.message);
  }
}

Rgb parse_rgb(const std::string& hex) {
  std::string s = hex;
  if (!s.empty() && s[0] == '#') s = s.substr(1);
  if (s.size() != 6 || s.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos) {
    throw ConfigError("'" + hex + "' is not a #rrggbb colour");
  }
  const unsigned long v = std::stoul(s, nullptr, 16);
  return {static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v)};
}

std::string rgb_hex(const Rgb& c) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

}  // namespace fbf
