#include "fbformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "fbformer/config.hpp"

namespace fs = std::filesystem;

namespace fbf {

DatasetSpec load_dataset(const std::string& root) {
  const fs::path base(root);
  const fs::path manifest = base / "dataset.toml";
  if (!fs::exists(manifest)) throw DataError("dataset manifest '" + manifest.string() + "' not found");
  DatasetSpec spec;
  spec.root = root;
  KeyValueConfig kv;
  try {
    kv = KeyValueConfig::load(manifest.string());
    spec.name = kv.has("name") ? kv.get_string("name") : base.filename().string();
    spec.class_names = kv.get_list("class_names");
    for (const auto& hex : kv.get_list("palette")) spec.palette.push_back(parse_rgb(hex));
  } catch (const ConfigError& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  if (spec.class_names.size() < 2) throw DataError(manifest.string() + ": need at least 2 classes");
  if (spec.palette.size() != spec.class_names.size()) {
    throw DataError(manifest.string() + ": palette has " + std::to_string(spec.palette.size()) +
                    " colours for " + std::to_string(spec.class_names.size()) + " classes");
  }
  const fs::path images = base / "images", labels = base / "labels";
  if (!fs::is_directory(images) || !fs::is_directory(labels)) {
    throw DataError("dataset '" + root + "' needs images/ and labels/ directories");
  }
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.path().extension() != ".png") continue;
    const std::string stem = entry.path().stem().string();
    if (!fs::exists(labels / (stem + ".png"))) {
      throw DataError("image '" + stem + "' has no label mask in " + labels.string());
    }
    spec.stems.push_back(stem);
  }
  std::sort(spec.stems.begin(), spec.stems.end());
  if (spec.stems.empty()) throw DataError("dataset '" + root + "' contains no images");
  return spec;
}

void write_dataset_manifest(const DatasetSpec& spec) {
  const fs::path path = fs::path(spec.root) / "dataset.toml";
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "name = \"" << spec.name << "\"\n";
  out << "class_names = [";
  for (std::size_t i = 0; i < spec.class_names.size(); ++i) {
    out << (i ? ", " : "") << '"' << spec.class_names[i] << '"';
  }
  out << "]\npalette = [";
  for (std::size_t i = 0; i < spec.palette.size(); ++i) {
    out << (i ? ", " : "") << '"' << rgb_hex(spec.palette[i]) << '"';
  }
  out << "]\n";
}

std::vector<float> image_to_planar(const Image& image) {
  const std::size_t hw = static_cast<std::size_t>(image.width) * image.height;
  std::vector<float> out(3 * hw);
  for (int c = 0; c < 3; ++c) {
    const int src = image.channels == 1 ? 0 : c;
    for (std::size_t i = 0; i < hw; ++i) {
      out[c * hw + i] = static_cast<float>(image.pixels[i * image.channels + src]) / 127.5f - 1.0f;
    }
  }
  return out;
}

Sample load_sample(const DatasetSpec& spec, const std::string& stem) {
  const fs::path base(spec.root);
  const Image img = read_png((base / "images" / (stem + ".png")).string());
  const Image lab = read_label_png((base / "labels" / (stem + ".png")).string());
  if (img.width != lab.width || img.height != lab.height) {
    throw DataError("sample '" + stem + "': image is " + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + " but its label is " + std::to_string(lab.width) +
                    "x" + std::to_string(lab.height));
  }
  Sample s;
  s.id = stem;
  s.height = img.height;
  s.width = img.width;
  s.image = image_to_planar(img);
  s.labels.resize(lab.pixels.size());
  for (std::size_t i = 0; i < lab.pixels.size(); ++i) {
    const int v = lab.pixels[i];
    if (v >= spec.class_count()) {
      throw DataError("sample '" + stem + "': label " + std::to_string(v) + " at (" +
                      std::to_string(i % lab.width) + ", " + std::to_string(i / lab.width) +
                      ") exceeds class count " + std::to_string(spec.class_count()));
    }
    s.labels[i] = v;
  }
  return s;
}

std::vector<SampleTile> tile_image(const Sample& sample, int tile) {
  if (tile < 1) throw ConfigError("tile size must be positive");
  if (sample.height % tile != 0 || sample.width % tile != 0) {
    throw DataError("sample '" + sample.id + "' is " + std::to_string(sample.width) + "x" +
                    std::to_string(sample.height) + ", not a multiple of tile size " +
                    std::to_string(tile) + "; pad or crop it first");
  }
  const std::size_t hw = static_cast<std::size_t>(sample.width) * sample.height;
  const std::size_t tt = static_cast<std::size_t>(tile) * tile;
  std::vector<SampleTile> out;
  for (int ty = 0; ty < sample.height; ty += tile) {
    for (int tx = 0; tx < sample.width; tx += tile) {
      SampleTile t;
      t.source = sample.id;
      t.x = tx;
      t.y = ty;
      t.size = tile;
      t.image.resize(3 * tt);
      t.labels.resize(tt);
      for (int y = 0; y < tile; ++y) {
        for (int x = 0; x < tile; ++x) {
          const std::size_t src = static_cast<std::size_t>(ty + y) * sample.width + tx + x;
          const std::size_t dst = static_cast<std::size_t>(y) * tile + x;
          for (int c = 0; c < 3; ++c) t.image[c * tt + dst] = sample.image[c * hw + src];
          t.labels[dst] = sample.labels[src];
        }
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

Sample stitch_tiles(const std::vector<SampleTile>& tiles, int height, int width) {
  Sample s;
  s.height = height;
  s.width = width;
  const std::size_t hw = static_cast<std::size_t>(width) * height;
  s.image.assign(3 * hw, 0.0f);
  s.labels.assign(hw, 0);
  for (const auto& t : tiles) {
    if (t.x + t.size > width || t.y + t.size > height) {
      throw DataError("tile at (" + std::to_string(t.x) + ", " + std::to_string(t.y) +
                      ") lies outside a " + std::to_string(width) + "x" + std::to_string(height) +
                      " canvas");
    }
    if (s.id.empty()) s.id = t.source;
    const std::size_t tt = static_cast<std::size_t>(t.size) * t.size;
    for (int y = 0; y < t.size; ++y) {
      for (int x = 0; x < t.size; ++x) {
        const std::size_t dst = static_cast<std::size_t>(t.y + y) * width + t.x + x;
        const std::size_t src = static_cast<std::size_t>(y) * t.size + x;
        for (int c = 0; c < 3; ++c) s.image[c * hw + dst] = t.image[c * tt + src];
        s.labels[dst] = t.labels[src];
      }
    }
  }
  return s;
}

std::vector<SampleTile> load_tiles(const DatasetSpec& spec, int tile) {
  std::vector<SampleTile> out;
  for (const auto& stem : spec.stems) {
    auto tiles = tile_image(load_sample(spec, stem), tile);
    std::move(tiles.begin(), tiles.end(), std::back_inserter(out));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
std::vector<std::vector<std::string>> chunk(const std::vector<std::string>& items, int parts) {
  std::vector<std::vector<std::string>> out(parts);
  const std::size_t n = items.size();
  for (int p = 0; p < parts; ++p) {
    const std::size_t lo = n * p / parts, hi = n * (p + 1) / parts;
    out[p].assign(items.begin() + static_cast<std::ptrdiff_t>(lo),
                  items.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  return out;
}

}  // namespace

SplitPlan build_folds(std::span<const std::string> groups, const std::string& protocol,
                      std::uint64_t seed) {
  int parts = 0;
  if (protocol == "drosophila-5fold") {
    parts = 5;
  } else if (protocol == "ratio-3fold") {
    parts = 3;
  } else {
    throw ConfigError("unknown fold protocol '" + protocol + "' (valid: drosophila-5fold, ratio-3fold)");
  }
  std::vector<std::string> unique(groups.begin(), groups.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  if (static_cast<int>(unique.size()) < parts) {
    throw DataError(protocol + " needs at least " + std::to_string(parts) + " source images, got " +
                    std::to_string(unique.size()));
  }
  Rng rng = Rng(seed).derive(fnv1a64("folds"));
  rng.shuffle(unique);
  const auto chunks = chunk(unique, parts);

  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);
  auto collect = [&](const std::vector<std::string>& gs) {
    std::vector<std::size_t> out;
    for (const auto& g : gs) out.insert(out.end(), members[g].begin(), members[g].end());
    std::sort(out.begin(), out.end());
    return out;
  };

  SplitPlan plan;
  plan.protocol = protocol;
  for (int k = 0; k < parts; ++k) {
    Fold f;
    f.test = collect(chunks[k]);
    if (parts == 5) {
      const int v = (k + 1) % parts;
      f.val = collect(chunks[v]);
      std::vector<std::string> train;
      for (int j = 0; j < parts; ++j) {
        if (j != k && j != v) train.insert(train.end(), chunks[j].begin(), chunks[j].end());
      }
      f.train = collect(train);
    } else {
      std::vector<std::string> train;
      for (int j = 0; j < parts; ++j) {
        if (j != k) train.insert(train.end(), chunks[j].begin(), chunks[j].end());
      }
      const auto n_val = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(train.size()))));
      const std::vector<std::string> val(train.end() - static_cast<std::ptrdiff_t>(n_val), train.end());
      train.resize(train.size() - n_val);
      f.train = collect(train);
      f.val = collect(val);
    }
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

// ---------------------------------------------------------------------------

Transform random_transform(Rng& rng) {
  Transform t;
  t.hflip = rng.coin();
  t.vflip = rng.coin();
  t.rotation = static_cast<int>(rng.below(3)) * 90 - 90;
  return t;
}

namespace {

template <class T>
std::vector<T> transform_plane(const T* in, int n, const Transform& t) {
  std::vector<T> a(in, in + static_cast<std::size_t>(n) * n), b(a.size());
  auto idx = [n](int x, int y) { return static_cast<std::size_t>(y) * n + x; };
  if (t.hflip) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) b[idx(x, y)] = a[idx(n - 1 - x, y)];
    a.swap(b);
  }
  if (t.vflip) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) b[idx(x, y)] = a[idx(x, n - 1 - y)];
    a.swap(b);
  }
  if (t.rotation == 90) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) b[idx(x, y)] = a[idx(n - 1 - y, x)];
    a.swap(b);
  } else if (t.rotation == -90) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) b[idx(x, y)] = a[idx(y, n - 1 - x)];
    a.swap(b);
  }
  return a;
}

}  // namespace

SampleTile apply_transform(const SampleTile& tile, const Transform& t) {
  if (t.rotation != 0 && t.rotation != 90 && t.rotation != -90) {
    throw UsageError("rotation must be -90, 0 or 90 degrees");
  }
  const int n = tile.size;
  const std::size_t tt = static_cast<std::size_t>(n) * n;
  if (tile.labels.size() != tt || tile.image.size() != 3 * tt) {
    throw DataError("sample '" + tile.source + "' tile at (" + std::to_string(tile.x) + ", " +
                    std::to_string(tile.y) + "): buffers do not match a " + std::to_string(n) + "x" +
                    std::to_string(n) + " tile");
  }
  SampleTile out = tile;
  for (int c = 0; c < 3; ++c) {
    const auto plane = transform_plane(tile.image.data() + c * tt, n, t);
    std::copy(plane.begin(), plane.end(), out.image.begin() + static_cast<std::ptrdiff_t>(c * tt));
  }
  out.labels = transform_plane(tile.labels.data(), n, t);
  return out;
}

SampleTile augment(const SampleTile& tile, Rng& rng) { return apply_transform(tile, random_transform(rng)); }

Batch make_batch(const std::vector<SampleTile>& tiles, std::span<const std::size_t> indices,
                 DType dtype) {
  if (indices.empty()) throw UsageError("make_batch: empty batch");
  const int t = tiles.at(indices[0]).size;
  const std::size_t tt = static_cast<std::size_t>(t) * t;
  Batch b;
  b.images = Tensor::zeros({static_cast<std::int64_t>(indices.size()), 3, t, t}, dtype);
  b.labels.reserve(indices.size() * tt);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto dst = b.images.data<T>();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto& tile = tiles.at(indices[i]);
      if (tile.size != t) throw DataError("make_batch: tile '" + tile.source + "' has a different size");
      for (std::size_t j = 0; j < 3 * tt; ++j) dst[i * 3 * tt + j] = static_cast<T>(tile.image[j]);
      b.labels.insert(b.labels.end(), tile.labels.begin(), tile.labels.end());
    }
  });
  return b;
}

// ---------------------------------------------------------------------------

std::vector<std::string> synthetic_class_names(int classes) {
  if (classes == 2) return {"membrane", "background"};
  if (classes == 5) return {"membrane", "mitochondria", "synapse", "glia/extracellular", "intracellular"};
  throw ConfigError("synthetic data supports 2 or 5 classes, got " + std::to_string(classes));
}

std::vector<Rgb> synthetic_palette(int classes) {
  if (classes == 2) return {Rgb{255, 255, 255}, Rgb{0, 0, 0}};
  if (classes == 5) {
    return {Rgb{255, 255, 255}, Rgb{230, 60, 60}, Rgb{250, 200, 40}, Rgb{60, 120, 230}, Rgb{40, 40, 40}};
  }
  throw ConfigError("synthetic data supports 2 or 5 classes, got " + std::to_string(classes));
}

namespace {

void validate(const SyntheticCellConfig& cfg) {
  if (cfg.image_size < 8) throw ConfigError("synthetic image_size must be >= 8");
  if (cfg.count < 1) throw ConfigError("synthetic count must be >= 1");
  if (cfg.cells_min < 2 || cfg.cells_max < cfg.cells_min) {
    throw ConfigError("synthetic cell range must satisfy 2 <= cells_min <= cells_max");
  }
  if (!(cfg.membrane_thickness > 0.0)) throw ConfigError("membrane_thickness must be positive");
  if (cfg.noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  synthetic_class_names(cfg.classes);
}

}  // namespace

std::vector<std::array<double, 2>> synthetic_seeds(const SyntheticCellConfig& cfg, int index) {
  validate(cfg);
  Rng rng = Rng(cfg.seed).derive(static_cast<std::uint64_t>(index), 1);
  const int n = cfg.cells_min + static_cast<int>(rng.below(cfg.cells_max - cfg.cells_min + 1));
  std::vector<std::array<double, 2>> seeds(n);
  for (auto& s : seeds) s = {rng.uniform(0.0, cfg.image_size), rng.uniform(0.0, cfg.image_size)};
  return seeds;
}

SyntheticPair generate_synthetic_image(const SyntheticCellConfig& cfg, int index) {
  const auto seeds = synthetic_seeds(cfg, index);
  Rng rng = Rng(cfg.seed).derive(static_cast<std::uint64_t>(index), 2);
  const int size = cfg.image_size;
  const int n = static_cast<int>(seeds.size());
  const bool five = cfg.classes == 5;
  enum : int { kMembrane = 0, kMito = 1, kSynapse = 2, kGlia = 3, kIntra = 4 };

  // Per-cell appearance.
  std::vector<bool> glia(n, false);
  std::vector<double> shade(n);
  for (int i = 0; i < n; ++i) {
    shade[i] = rng.uniform(-0.05, 0.05);
    if (five) glia[i] = rng.uniform() < 0.2;
  }
  struct Blob {
    double cx, cy, rx, ry;
  };
  std::vector<Blob> mitos;
  if (five) {
    const double scale = size / 64.0;
    for (int i = 0; i < n; ++i) {
      if (glia[i]) continue;
      const int count = static_cast<int>(rng.below(3));
      for (int m = 0; m < count; ++m) {
        mitos.push_back({seeds[i][0] + rng.uniform(-2.0, 2.0) * scale,
                         seeds[i][1] + rng.uniform(-2.0, 2.0) * scale, rng.uniform(0.8, 1.6) * scale,
                         rng.uniform(0.5, 1.0) * scale});
      }
    }
  }

  const double half = cfg.membrane_thickness / 2.0;
  std::vector<int> cell(static_cast<std::size_t>(size) * size);
  std::vector<double> boundary(cell.size());
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i) {
        const double d = (px - seeds[i][0]) * (px - seeds[i][0]) + (py - seeds[i][1]) * (py - seeds[i][1]);
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      // Distance to the bisector with every other seed; the minimum is the
      // distance to the cell boundary.
      double dist = std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i) {
        if (i == best) continue;
        const double dx = seeds[i][0] - seeds[best][0], dy = seeds[i][1] - seeds[best][1];
        const double len = std::sqrt(dx * dx + dy * dy);
        if (len == 0.0) continue;
        const double di = (px - seeds[i][0]) * (px - seeds[i][0]) + (py - seeds[i][1]) * (py - seeds[i][1]);
        dist = std::min(dist, (di - best_d) / (2.0 * len));
      }
      cell[static_cast<std::size_t>(y) * size + x] = best;
      boundary[static_cast<std::size_t>(y) * size + x] = dist;
    }
  }

  SyntheticPair out{Image(size, size, 1), Image(size, size, 1)};
  // Synapses: small disks centred on membrane pixels.
  std::vector<std::array<double, 2>> synapses;
  if (five) {
    const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    for (int s = 0, tries = 0; s < count && tries < 1000; ++tries) {
      const int x = static_cast<int>(rng.below(size)), y = static_cast<int>(rng.below(size));
      if (boundary[static_cast<std::size_t>(y) * size + x] > half) continue;
      synapses.push_back({x + 0.5, y + 0.5});
      ++s;
    }
  }
  const double syn_r = std::max(1.5, cfg.membrane_thickness);
  static constexpr double kIntensity[5] = {0.15, 0.35, 0.05, 0.55, 0.75};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      const double px = x + 0.5, py = y + 0.5;
      int label = boundary[i] <= half ? kMembrane : (five ? (glia[cell[i]] ? kGlia : kIntra) : 1);
      if (five) {
        if (label == kIntra) {
          for (const auto& b : mitos) {
            const double u = (px - b.cx) / b.rx, v = (py - b.cy) / b.ry;
            if (u * u + v * v <= 1.0) {
              label = kMito;
              break;
            }
          }
        }
        for (const auto& s : synapses) {
          if ((px - s[0]) * (px - s[0]) + (py - s[1]) * (py - s[1]) <= syn_r * syn_r) {
            label = kSynapse;
            break;
          }
        }
      }
      const int shade_class = five ? label : (label == kMembrane ? kMembrane : kIntra);
      double v = kIntensity[shade_class] + shade[cell[i]] + cfg.noise_std * rng.normal();
      v = std::clamp(v, 0.0, 1.0);
      out.image.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      out.labels.pixels[i] = static_cast<std::uint8_t>(label);
    }
  }
  return out;
}

DatasetSpec generate_synthetic(const SyntheticCellConfig& cfg, const std::string& root) {
  validate(cfg);
  const fs::path base(root);
  std::error_code ec;
  fs::create_directories(base / "images", ec);
  if (!ec) fs::create_directories(base / "labels", ec);
  if (ec) throw DataError("cannot create dataset directories under '" + root + "': " + ec.message());
  DatasetSpec spec;
  spec.root = root;
  spec.name = "synthetic";
  spec.class_names = synthetic_class_names(cfg.classes);
  spec.palette = synthetic_palette(cfg.classes);
  for (int i = 0; i < cfg.count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "cell_%04d", i);
    const auto pair = generate_synthetic_image(cfg, i);
    write_png((base / "images" / (std::string(stem) + ".png")).string(), pair.image);
    write_png((base / "labels" / (std::string(stem) + ".png")).string(), pair.labels);
    spec.stems.push_back(stem);
  }
  write_dataset_manifest(spec);
  return spec;
}

}  // namespace fbf
