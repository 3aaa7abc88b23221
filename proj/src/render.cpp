#include "fbformer/render.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>

#include "fbformer/tensor.hpp"

namespace fbf {

namespace {

using Glyph = std::array<std::uint8_t, 7>;

// Each row is 5 bits, most significant bit on the left.
const std::map<char, Glyph>& font() {
  static const std::map<char, Glyph> f = {
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}}, {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {'?', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04}}, {' ', {0, 0, 0, 0, 0, 0, 0}},
  };
  return f;
}

void put(Image& img, int x, int y, const Rgb& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int k = 0; k < 3; ++k) img.at(x, y, k) = c[k];
}

}  // namespace

int draw_text(Image& img, int x, int y, const std::string& text, const Rgb& colour) {
  int cx = x;
  for (char ch : text) {
    const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    auto it = font().find(u);
    const Glyph& g = it != font().end() ? it->second : font().at('?');
    for (int r = 0; r < 7; ++r) {
      for (int b = 0; b < 5; ++b) {
        if (g[r] & (0x10 >> b)) put(img, cx + b, y + r, colour);
      }
    }
    cx += 6;
  }
  return cx - x;
}

GridLayout grid_layout(const RenderInput& in) {
  GridLayout g;
  g.rows = static_cast<int>(in.images.size());
  g.cols = 2 + static_cast<int>(in.sets.size());
  g.panel_w = in.width;
  g.panel_h = in.height;
  return g;
}

Image render_grid(const RenderInput& in, const std::vector<Rgb>& palette) {
  const std::size_t hw = static_cast<std::size_t>(in.height) * in.width;
  if (in.height < 1 || in.width < 1) throw ConfigError("render: empty panel size");
  if (in.ground_truth.size() != in.images.size()) {
    throw ConfigError("render: " + std::to_string(in.images.size()) + " images but " +
                      std::to_string(in.ground_truth.size()) + " ground-truth maps");
  }
  auto check_map = [&](const std::vector<std::int32_t>& m, const std::string& what) {
    if (m.size() != hw) throw ConfigError("render: " + what + " does not match the panel size");
    for (auto v : m) {
      if (v < 0 || static_cast<std::size_t>(v) >= palette.size()) {
        throw ConfigError("render: palette has no colour for class " + std::to_string(v) + " in " + what);
      }
    }
  };
  for (std::size_t s = 0; s < in.images.size(); ++s) {
    if (in.images[s].size() != 3 * hw) throw ConfigError("render: image size does not match the panel size");
    check_map(in.ground_truth[s], "ground truth " + std::to_string(s));
  }
  for (const auto& set : in.sets) {
    if (set.maps.size() != in.images.size()) {
      throw ConfigError("render: set '" + set.name + "' has " + std::to_string(set.maps.size()) +
                        " maps for " + std::to_string(in.images.size()) + " samples");
    }
    for (std::size_t s = 0; s < set.maps.size(); ++s) check_map(set.maps[s], set.name + " " + std::to_string(s));
  }

  const GridLayout g = grid_layout(in);
  Image img(g.width(), g.height(), 3);
  std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{96});

  std::vector<std::string> titles = {"input", "ground truth"};
  for (const auto& set : in.sets) titles.push_back(set.name);
  for (int c = 0; c < g.cols; ++c) {
    // Clip the title to the panel width.
    const std::size_t max_chars = static_cast<std::size_t>(std::max(1, g.panel_w / 6));
    draw_text(img, g.panel_x(c), 2, titles[c].substr(0, max_chars), Rgb{255, 255, 255});
  }

  auto paint_labels = [&](int row, int col, const std::vector<std::int32_t>& m) {
    for (int y = 0; y < in.height; ++y)
      for (int x = 0; x < in.width; ++x)
        put(img, g.panel_x(col) + x, g.panel_y(row) + y, palette[m[static_cast<std::size_t>(y) * in.width + x]]);
  };
  for (int r = 0; r < g.rows; ++r) {
    const auto& im = in.images[r];
    for (int y = 0; y < in.height; ++y) {
      for (int x = 0; x < in.width; ++x) {
        Rgb c{};
        for (int k = 0; k < 3; ++k) {
          const double v = (static_cast<double>(im[k * hw + static_cast<std::size_t>(y) * in.width + x]) + 1.0) * 127.5;
          c[k] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
        put(img, g.panel_x(0) + x, g.panel_y(r) + y, c);
      }
    }
    paint_labels(r, 1, in.ground_truth[r]);
    for (std::size_t s = 0; s < in.sets.size(); ++s) paint_labels(r, 2 + static_cast<int>(s), in.sets[s].maps[r]);
  }
  return img;
}

void render_predictions(const std::string& path, const RenderInput& in, const std::vector<Rgb>& palette) {
  write_png(path, render_grid(in, palette));
}

}  // namespace fbf
