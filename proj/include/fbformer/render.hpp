#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbformer/image_io.hpp"

namespace fbf {

/// Per-sample label maps produced by one method.
struct PredictionSet {
  std::string name;
  std::vector<std::vector<std::int32_t>> maps;
};

struct RenderInput {
  int height = 0;
  int width = 0;
  /// Per sample, 3 x H x W planar values in [-1, 1].
  std::vector<std::vector<float>> images;
  std::vector<std::vector<std::int32_t>> ground_truth;
  std::vector<PredictionSet> sets;
};

/// Panel layout: one row per sample; columns are the input, the ground truth,
/// then each prediction set. A legend strip above the grid names the columns.
struct GridLayout {
  static constexpr int kPad = 2;
  static constexpr int kLegend = 11;
  int rows = 0;
  int cols = 0;
  int panel_w = 0;
  int panel_h = 0;

  int width() const { return cols * (panel_w + kPad) + kPad; }
  int height() const { return kLegend + rows * (panel_h + kPad) + kPad; }
  int panel_x(int col) const { return kPad + col * (panel_w + kPad); }
  int panel_y(int row) const { return kLegend + kPad + row * (panel_h + kPad); }
};

GridLayout grid_layout(const RenderInput& in);

/// Palette-mapped RGB grid. Throws ConfigError when a label has no palette
/// entry and when map sizes disagree.
Image render_grid(const RenderInput& in, const std::vector<Rgb>& palette);
void render_predictions(const std::string& path, const RenderInput& in, const std::vector<Rgb>& palette);

/// Draws upper-cased text with a 5x7 bitmap font; returns the pixel width.
int draw_text(Image& img, int x, int y, const std::string& text, const Rgb& colour);

}  // namespace fbf
