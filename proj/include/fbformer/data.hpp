#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fbformer/image_io.hpp"
#include "fbformer/rng.hpp"
#include "fbformer/tensor.hpp"

namespace fbf {

/// On-disk dataset: root/images/<stem>.png, root/labels/<stem>.png and a
/// root/dataset.toml manifest with `name`, `class_names` and `palette`.
struct DatasetSpec {
  std::string root;
  std::string name;
  std::vector<std::string> class_names;
  std::vector<Rgb> palette;
  /// Sorted file stems present in both images/ and labels/.
  std::vector<std::string> stems;

  int class_count() const { return static_cast<int>(class_names.size()); }
};

DatasetSpec load_dataset(const std::string& root);
void write_dataset_manifest(const DatasetSpec& spec);

/// A full image with its mask. `image` is 3 x H x W planar, scaled to [-1, 1].
struct Sample {
  std::string id;
  int height = 0;
  int width = 0;
  std::vector<float> image;
  std::vector<std::int32_t> labels;
};

/// Converts 8-bit pixels to the planar [-1, 1] layout (gray is replicated).
std::vector<float> image_to_planar(const Image& image);
/// Loads one pair and validates sizes and label range (DataError naming the stem).
Sample load_sample(const DatasetSpec& spec, const std::string& stem);

struct SampleTile {
  std::string source;
  int x = 0;
  int y = 0;
  int size = 0;
  std::vector<float> image;          // 3 x size x size
  std::vector<std::int32_t> labels;  // size x size

  bool operator==(const SampleTile&) const = default;
};

/// Non-overlapping tiles in row-major order. H and W must be multiples of `tile`.
std::vector<SampleTile> tile_image(const Sample& sample, int tile);
/// Inverse of tile_image.
Sample stitch_tiles(const std::vector<SampleTile>& tiles, int height, int width);
/// Every tile of every sample in the dataset, in stem order.
std::vector<SampleTile> load_tiles(const DatasetSpec& spec, int tile);

struct Fold {
  std::vector<std::size_t> train, val, test;
};

struct SplitPlan {
  std::string protocol;
  std::vector<Fold> folds;
};

/// Cross-validation folds over items grouped by `groups[i]` (the source image
/// of item i); a group never straddles two lists of a fold.
///   drosophila-5fold: groups shuffled into 5 parts; fold k tests part k,
///                     validates on part k+1 (mod 5), trains on the rest.
///   ratio-3fold:      groups shuffled into 3 parts; fold k tests part k and
///                     trains on the other two, less a 10% validation carve-out.
SplitPlan build_folds(std::span<const std::string> groups, const std::string& protocol,
                      std::uint64_t seed);

/// Flips and a rotation in {-90, 0, +90} degrees (counter-clockwise positive).
struct Transform {
  bool hflip = false;
  bool vflip = false;
  int rotation = 0;
};

Transform random_transform(Rng& rng);
/// Applies hflip, then vflip, then the rotation. A +90 rotation of a T x T
/// tile maps out[y][x] = in[x][T-1-y]; -90 maps out[y][x] = in[T-1-x][y].
SampleTile apply_transform(const SampleTile& tile, const Transform& t);
SampleTile augment(const SampleTile& tile, Rng& rng);

struct Batch {
  Tensor images;                     // N x 3 x T x T
  std::vector<std::int32_t> labels;  // N x T x T
};

Batch make_batch(const std::vector<SampleTile>& tiles, std::span<const std::size_t> indices,
                 DType dtype);

// -- synthetic data ------------------------------------------------------------

/// Voronoi "cells" with dark membranes along cell boundaries.
struct SyntheticCellConfig {
  std::uint64_t seed = 0;
  int image_size = 256;
  int count = 20;
  /// 2: membrane/background. 5: membrane, mitochondria, synapse,
  /// glia/extracellular, intracellular.
  int classes = 2;
  int cells_min = 8;
  int cells_max = 16;
  /// Width of the membrane band straddling each cell boundary, in pixels.
  double membrane_thickness = 3.0;
  double noise_std = 0.05;
};

struct SyntheticPair {
  Image image;
  Image labels;
};

/// Cell centres of image `index`, in pixel coordinates (pixel centres at +0.5).
std::vector<std::array<double, 2>> synthetic_seeds(const SyntheticCellConfig& cfg, int index);
SyntheticPair generate_synthetic_image(const SyntheticCellConfig& cfg, int index);
/// Writes the dataset under `root` (images/, labels/, dataset.toml).
DatasetSpec generate_synthetic(const SyntheticCellConfig& cfg, const std::string& root);
std::vector<std::string> synthetic_class_names(int classes);
std::vector<Rgb> synthetic_palette(int classes);

}  // namespace fbf
