#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "fbformer/data.hpp"
#include "fbformer/image_io.hpp"
#include "support.hpp"

using namespace fbf;
using fbf::testing::TempDir;

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Sample blank_sample(const std::string& id, int h, int w) {
  Sample s;
  s.id = id;
  s.height = h;
  s.width = w;
  s.image.assign(static_cast<std::size_t>(3) * h * w, 0.0f);
  s.labels.assign(static_cast<std::size_t>(h) * w, 0);
  return s;
}

Sample random_sample(const std::string& id, int h, int w, std::uint64_t seed, int classes = 3) {
  Rng rng(seed);
  Sample s = blank_sample(id, h, w);
  for (auto& v : s.image) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : s.labels) v = static_cast<std::int32_t>(rng.below(classes));
  return s;
}

std::vector<std::int64_t> histogram(const std::vector<std::int32_t>& labels, int classes) {
  std::vector<std::int64_t> h(classes, 0);
  for (auto v : labels) ++h[v];
  return h;
}

/// Tile re-indexed by rotating pixel centres about the tile centre (y down,
/// counter-clockwise positive as displayed), computed with trigonometry.
SampleTile rotate_oracle(const SampleTile& t, int degrees) {
  SampleTile out = t;
  const int n = t.size;
  const double th = degrees * M_PI / 180.0;
  const double c = std::round(std::cos(th)), s = std::round(std::sin(th));
  for (int oy = 0; oy < n; ++oy)
    for (int ox = 0; ox < n; ++ox) {
      const double u = ox + 0.5 - n / 2.0, v = oy + 0.5 - n / 2.0;
      // Displayed CCW rotation with y down maps input (x, y) to (c x + s y, -s x + c y).
      const double ix = c * u - s * v, iy = s * u + c * v;
      const int sx = static_cast<int>(std::lround(ix + n / 2.0 - 0.5));
      const int sy = static_cast<int>(std::lround(iy + n / 2.0 - 0.5));
      const auto src = static_cast<std::size_t>(sy) * n + sx, dst = static_cast<std::size_t>(oy) * n + ox;
      out.labels[dst] = t.labels[src];
      for (int ch = 0; ch < 3; ++ch) out.image[ch * n * n + dst] = t.image[ch * n * n + src];
    }
  return out;
}

}  // namespace

// -- tiling ------------------------------------------------------------------------

TEST_CASE("tiling counts") {
  CHECK(tile_image(blank_sample("a", 1024, 1024), 256).size() == 16);
  CHECK(tile_image(blank_sample("b", 512, 512), 256).size() == 4);
  std::size_t isbi = 0;
  for (int i = 0; i < 30; ++i) isbi += tile_image(blank_sample("s" + std::to_string(i), 512, 512), 256).size();
  CHECK(isbi == 120);
  const auto one = random_sample("c", 256, 256, 1);
  const auto tiles = tile_image(one, 256);
  REQUIRE(tiles.size() == 1);
  CHECK(tiles[0].image == one.image);
  CHECK(tiles[0].labels == one.labels);
}

TEST_CASE("tiles are row-major and stitch back exactly") {
  const auto s = random_sample("img", 96, 64, 2);
  const auto tiles = tile_image(s, 32);
  REQUIRE(tiles.size() == 6);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    CHECK(tiles[i].x == static_cast<int>(i % 2) * 32);
    CHECK(tiles[i].y == static_cast<int>(i / 2) * 32);
    CHECK(tiles[i].source == "img");
  }
  CHECK(tiles[3].labels[5 * 32 + 7] == s.labels[(32 + 5) * 64 + 32 + 7]);
  const auto back = stitch_tiles(tiles, 96, 64);
  CHECK(back.image == s.image);
  CHECK(back.labels == s.labels);
}

TEST_CASE("non-divisible sizes suggest padding or cropping") {
  try {
    tile_image(blank_sample("odd", 300, 256), 256);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("odd") != std::string::npos);
    CHECK((msg.find("pad") != std::string::npos || msg.find("crop") != std::string::npos));
  }
}

// -- folds -------------------------------------------------------------------------

TEST_CASE("drosophila-style folds") {
  std::vector<std::string> groups;
  for (int img = 0; img < 20; ++img)
    for (int t = 0; t < 16; ++t) groups.push_back("img" + std::to_string(img));
  REQUIRE(groups.size() == 320);
  const auto plan = build_folds(groups, "drosophila-5fold", 0);
  REQUIRE(plan.folds.size() == 5);
  std::multiset<std::size_t> tested;
  for (const auto& f : plan.folds) {
    CHECK(f.train.size() == 192);
    CHECK(f.val.size() == 64);
    CHECK(f.test.size() == 64);
    std::set<std::size_t> all(f.train.begin(), f.train.end());
    all.insert(f.val.begin(), f.val.end());
    all.insert(f.test.begin(), f.test.end());
    CHECK(all.size() == 320);
    // No source image straddles two lists.
    std::set<std::string> tr, va, te;
    for (auto i : f.train) tr.insert(groups[i]);
    for (auto i : f.val) va.insert(groups[i]);
    for (auto i : f.test) te.insert(groups[i]);
    for (const auto& g : te) CHECK((tr.count(g) == 0 && va.count(g) == 0));
    for (const auto& g : va) CHECK(tr.count(g) == 0);
    tested.insert(f.test.begin(), f.test.end());
  }
  CHECK(tested.size() == 320);
  CHECK(std::set<std::size_t>(tested.begin(), tested.end()).size() == 320);
  for (std::size_t k = 0; k < 5; ++k) CHECK(plan.folds[k].val == plan.folds[(k + 1) % 5].test);
}

TEST_CASE("ratio-3fold partitions with a validation carve-out") {
  std::vector<std::string> groups;
  for (int i = 0; i < 1032; ++i) groups.push_back("im" + std::to_string(i));
  const auto plan = build_folds(groups, "ratio-3fold", 5);
  REQUIRE(plan.folds.size() == 3);
  std::multiset<std::size_t> tested;
  for (const auto& f : plan.folds) {
    CHECK(f.test.size() == 344);
    CHECK(f.val.size() == 69);
    CHECK(f.train.size() == 688 - 69);
    std::set<std::size_t> all(f.train.begin(), f.train.end());
    all.insert(f.val.begin(), f.val.end());
    all.insert(f.test.begin(), f.test.end());
    CHECK(all.size() == 1032);
    tested.insert(f.test.begin(), f.test.end());
  }
  CHECK(std::set<std::size_t>(tested.begin(), tested.end()).size() == 1032);
  CHECK(tested.size() == 1032);
}

TEST_CASE("folds are deterministic and seed dependent") {
  std::vector<std::string> groups;
  for (int i = 0; i < 30; ++i) groups.push_back("g" + std::to_string(i));
  const auto a = build_folds(groups, "ratio-3fold", 1), b = build_folds(groups, "ratio-3fold", 1);
  const auto c = build_folds(groups, "ratio-3fold", 2);
  for (int k = 0; k < 3; ++k) {
    CHECK(a.folds[k].train == b.folds[k].train);
    CHECK(a.folds[k].test == b.folds[k].test);
  }
  CHECK(a.folds[0].test != c.folds[0].test);
  CHECK_THROWS_AS(build_folds(groups, "leave-one-out", 1), ConfigError);
  std::vector<std::string> few = {"a", "b", "c", "d"};
  CHECK_THROWS_AS(build_folds(few, "drosophila-5fold", 1), DataError);
}

// -- augmentation ------------------------------------------------------------------

TEST_CASE("augmentation") {
  const auto tiles = tile_image(random_sample("t", 8, 8, 3, 4), 8);
  const auto& t = tiles[0];
  CHECK(apply_transform(t, Transform{}) == t);
  Transform h;
  h.hflip = true;
  CHECK(apply_transform(apply_transform(t, h), h) == t);
  const auto hf = apply_transform(t, h);
  CHECK(hf.labels[2 * 8 + 0] == t.labels[2 * 8 + 7]);
  Transform v;
  v.vflip = true;
  CHECK(apply_transform(t, v).labels[0] == t.labels[7 * 8]);

  for (int deg : {90, -90}) {
    Transform r;
    r.rotation = deg;
    CHECK(apply_transform(t, r) == rotate_oracle(t, deg));
  }
  Transform plus, minus;
  plus.rotation = 90;
  minus.rotation = -90;
  CHECK(apply_transform(apply_transform(t, plus), minus) == t);

  Rng rng(10);
  std::set<int> rotations;
  int hf_count = 0;
  for (int i = 0; i < 200; ++i) {
    const auto tr = random_transform(rng);
    rotations.insert(tr.rotation);
    hf_count += tr.hflip;
    const auto a = augment(t, rng);
    CHECK(histogram(a.labels, 4) == histogram(t.labels, 4));
    std::vector<float> sorted_a = a.image, sorted_t = t.image;
    std::sort(sorted_a.begin(), sorted_a.end());
    std::sort(sorted_t.begin(), sorted_t.end());
    CHECK(sorted_a == sorted_t);
  }
  CHECK(rotations == std::set<int>{-90, 0, 90});
  CHECK(hf_count > 60);
  CHECK(hf_count < 140);
}

TEST_CASE("batches") {
  const auto tiles = tile_image(random_sample("b", 16, 16, 4), 8);
  const std::vector<std::size_t> idx = {3, 0};
  const auto b = make_batch(tiles, idx, DType::f32);
  CHECK(b.images.shape() == Shape{2, 3, 8, 8});
  CHECK(b.labels.size() == 128);
  CHECK(b.images.at(5) == tiles[3].image[5]);
  CHECK(b.labels[64 + 9] == tiles[0].labels[9]);
}

// -- images and datasets -----------------------------------------------------------

TEST_CASE("png round trip") {
  TempDir dir("png");
  Image gray(5, 3, 1), rgb(4, 4, 3);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) gray.pixels[i] = static_cast<std::uint8_t>(i * 17);
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) rgb.pixels[i] = static_cast<std::uint8_t>(255 - i);
  write_png(dir / "g.png", gray);
  write_png(dir / "c.png", rgb);
  CHECK(read_png(dir / "g.png") == gray);
  CHECK(read_png(dir / "c.png") == rgb);
  CHECK(read_label_png(dir / "g.png") == gray);
  CHECK_THROWS_AS(read_label_png(dir / "c.png"), DataError);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), DataError);
  std::ofstream(dir / "junk.png") << "not a png";
  CHECK_THROWS_AS(read_png(dir / "junk.png"), DataError);
  CHECK(parse_rgb("#10a0ff") == Rgb{0x10, 0xa0, 0xff});
  CHECK(rgb_hex({1, 2, 255}) == "#0102ff");
  CHECK_THROWS_AS(parse_rgb("#10a0f"), ConfigError);
}

TEST_CASE("planar conversion") {
  Image g(2, 1, 1);
  g.pixels = {0, 255};
  const auto p = image_to_planar(g);
  REQUIRE(p.size() == 6);
  CHECK(p[0] == -1.0f);
  CHECK(p[1] == 1.0f);
  CHECK(p[2] == p[0]);
  CHECK(p[5] == p[1]);
}

TEST_CASE("synthetic generation is deterministic") {
  TempDir a("syn_a"), b("syn_b");
  SyntheticCellConfig cfg;
  cfg.seed = 7;
  cfg.count = 3;
  cfg.image_size = 64;
  generate_synthetic(cfg, a.str());
  generate_synthetic(cfg, b.str());
  for (const char* rel : {"images/cell_0000.png", "labels/cell_0002.png", "dataset.toml"}) {
    const auto x = read_bytes(a / rel);
    CHECK_FALSE(x.empty());
    CHECK(x == read_bytes(b / rel));
  }
  const auto spec = load_dataset(a.str());
  CHECK(spec.stems == std::vector<std::string>{"cell_0000", "cell_0001", "cell_0002"});
  CHECK(spec.class_names.front() == "membrane");
  CHECK(spec.class_count() == 2);
  const auto s = load_sample(spec, "cell_0001");
  CHECK(s.height == 64);
  for (auto v : s.labels) CHECK((v == 0 || v == 1));
  CHECK(load_tiles(spec, 32).size() == 12);

  cfg.seed = 8;
  CHECK(generate_synthetic_image(cfg, 0).image != generate_synthetic_image({7, 64, 3}, 0).image);
}

TEST_CASE("five-class synthetic data uses every class") {
  SyntheticCellConfig cfg;
  cfg.classes = 5;
  cfg.image_size = 128;
  std::set<int> seen;
  for (int i = 0; i < 4; ++i)
    for (auto v : generate_synthetic_image(cfg, i).labels.pixels) seen.insert(v);
  CHECK(seen == std::set<int>{0, 1, 2, 3, 4});
}

TEST_CASE("membrane band matches a brute-force distance oracle") {
  SyntheticCellConfig cfg;
  cfg.image_size = 32;
  cfg.cells_min = 3;
  cfg.cells_max = 5;
  cfg.membrane_thickness = 4.0;
  const int n = cfg.image_size;
  for (int index = 0; index < 3; ++index) {
    const auto seeds = synthetic_seeds(cfg, index);
    auto nearest = [&](double x, double y) {
      int best = 0;
      double bd = INFINITY;
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        const double d = std::hypot(x - seeds[i][0], y - seeds[i][1]);
        if (d < bd) {
          bd = d;
          best = static_cast<int>(i);
        }
      }
      return best;
    };
    // Fine sample grid (step 1/8 px) with a margin so boundaries just outside the image count.
    const double step = 0.125, margin = 4.0;
    struct P {
      double x, y;
      int cell;
    };
    std::vector<P> grid;
    for (double y = -margin; y <= n + margin; y += step)
      for (double x = -margin; x <= n + margin; x += step) grid.push_back({x, y, nearest(x, y)});
    const auto labels = generate_synthetic_image(cfg, index).labels;
    int membrane = 0, lo = 0, hi = 0;
    const double half = cfg.membrane_thickness / 2;
    for (int py = 0; py < n; ++py)
      for (int px = 0; px < n; ++px) {
        const double cx = px + 0.5, cy = py + 0.5;
        const int own = nearest(cx, cy);
        double d = INFINITY;
        for (const auto& g : grid)
          if (g.cell != own) d = std::min(d, std::hypot(g.x - cx, g.y - cy));
        // A grid point of another cell lies within step/sqrt(2) of the true boundary.
        lo += d <= half - step;
        hi += d <= half + step;
        const bool m = labels.at(px, py) == 0;
        membrane += m;
        if (d <= half - step) CHECK(m);
        if (d > half + step) CHECK_FALSE(m);
      }
    CHECK(membrane >= lo);
    CHECK(membrane <= hi);
    CHECK(membrane > 0);
  }
}

TEST_CASE("dataset validation errors name the sample") {
  TempDir dir("bad");
  SyntheticCellConfig cfg;
  cfg.count = 2;
  cfg.image_size = 32;
  const auto spec = generate_synthetic(cfg, dir.str());
  auto lbl = read_label_png(dir / "labels/cell_0001.png");
  lbl.at(3, 4) = 7;
  write_png(dir / "labels/cell_0001.png", lbl);
  try {
    load_sample(spec, "cell_0001");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("cell_0001") != std::string::npos);
  }
  write_png(dir / "labels/cell_0000.png", Image(16, 32, 1));
  CHECK_THROWS_AS(load_sample(spec, "cell_0000"), DataError);
  std::filesystem::remove(dir / "labels/cell_0000.png");
  CHECK_THROWS_AS(load_dataset(dir.str()), DataError);
  CHECK_THROWS_AS(load_dataset(dir / "nowhere"), DataError);
}
