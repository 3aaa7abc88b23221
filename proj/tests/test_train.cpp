#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "fbformer/analysis.hpp"
#include "fbformer/train.hpp"
#include "support.hpp"

using namespace fbf;
using fbf::testing::max_abs_diff;
using fbf::testing::TempDir;

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

RunConfig tiny_run(FeedbackMode mode = FeedbackMode::lite) {
  RunConfig rc;
  rc.model = tiny_model_config(mode);
  rc.train.epochs = 1;
  rc.train.batch_size = 4;
  rc.train.eval_every = 1;
  rc.train.seed = 3;
  rc.data.tile = 32;
  return rc;
}

/// `count` 32x32 tiles from the synthetic generator.
std::vector<SampleTile> tiny_tiles(int count, int classes = 3) {
  SyntheticCellConfig sc;
  sc.image_size = 32;
  sc.cells_min = 2;
  sc.cells_max = 4;
  sc.membrane_thickness = 4;
  std::vector<SampleTile> tiles;
  for (int i = 0; i < count; ++i) {
    const auto pair = generate_synthetic_image(sc, i);
    SampleTile t;
    t.source = "s" + std::to_string(i);
    t.size = 32;
    t.image = image_to_planar(pair.image);
    for (auto v : pair.labels.pixels) t.labels.push_back(static_cast<std::int32_t>(v) + (i % classes == 2 ? 1 : 0));
    tiles.push_back(std::move(t));
  }
  return tiles;
}

Fold all_fold(std::size_t n) {
  Fold f;
  for (std::size_t i = 0; i < n; ++i) f.train.push_back(i);
  f.val = f.train;
  return f;
}

std::vector<std::vector<double>> snapshot(const FeedbackFormer& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.params().params()) out.push_back(p.value.to_vector());
  return out;
}

}  // namespace

TEST_CASE("cosine learning rate") {
  CHECK(cosine_lr(0, 500, 1e-3) == 1e-3);
  CHECK(cosine_lr(500, 500, 1e-3) == 0.0);
  CHECK(cosine_lr(250, 500, 1e-3) == doctest::Approx(5e-4).epsilon(1e-12));
  double prev = 1.0;
  for (int e = 0; e <= 20; ++e) {
    const double lr = cosine_lr(e, 20, 1e-3);
    CHECK(lr >= 0.0);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(21, 20, 1e-3), UsageError);
}

TEST_CASE("adam first step moves each weight by about lr") {
  ParamStore store(1, {DType::f64});
  auto w = store.weight("w", {5});
  const auto before = w.to_vector();
  const std::vector<double> g = {3.0, -0.02, 0.01, -40.0, 0.5};
  {
    Tape tape;
    tape.backward(ops::sum(ops::mul(w, Tensor::from_values({5}, g, DType::f64))));
  }
  Adam adam(store);
  adam.step(1e-3);
  for (int i = 0; i < 5; ++i) {
    const double delta = w.at(i) - before[i];
    CHECK(std::abs(std::abs(delta) - 1e-3) < 1e-8);
    CHECK((delta < 0) == (g[i] > 0));
  }
  CHECK(adam.steps() == 1);
}

TEST_CASE("adam with zero gradient") {
  ParamStore store(1, {DType::f64});
  auto w = store.weight("w", {3});
  const auto before = w.to_vector();
  Adam adam(store);
  adam.step(1e-2);
  CHECK(w.to_vector() == before);

  {
    Tape tape;
    tape.backward(ops::sum(ops::mul(w, w)));
  }
  adam.step(1e-2);
  const auto m1 = adam.first_moment(0).to_vector(), v1 = adam.second_moment(0).to_vector();
  store.zero_grad();
  adam.step(1e-2);
  for (int i = 0; i < 3; ++i) {
    CHECK(adam.first_moment(0).at(i) == doctest::Approx(0.9 * m1[i]).epsilon(1e-14));
    CHECK(adam.second_moment(0).at(i) == doctest::Approx(0.999 * v1[i]).epsilon(1e-14));
  }
  CHECK(adam.steps() == 3);
}

TEST_CASE("adam follows the hand-iterated recurrence on a quadratic") {
  // f(x) = 0.5 * a * (x - c)^2, gradient a * (x - c).
  const double a = 2.0, c = -0.5, lr = 0.1;
  ParamStore store(1, {DType::f64});
  auto x = store.constant("x", {1}, 1.5);
  Adam adam(store);
  double xo = 1.5, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    store.zero_grad();
    {
      Tape tape;
      const auto d = ops::sub(x, Tensor::scalar(c, DType::f64));
      tape.backward(ops::scale(ops::mul(d, d), 0.5 * a));
    }
    adam.step(lr);
    const double g = a * (xo - c);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1 - std::pow(0.9, t)), vhat = v / (1 - std::pow(0.999, t));
    xo -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::abs(x.item() - xo) < 1e-10);
  }
}

TEST_CASE("adam rejects non-finite gradients before updating") {
  ParamStore store(1, {DType::f64});
  auto ok = store.weight("fine", {2});
  auto bad = store.weight("broken.weight", {2});
  {
    Tape tape;
    tape.backward(ops::add(ops::sum(ok), ops::sum(ops::scale(bad, NAN))));
  }
  const auto before = ok.to_vector();
  Adam adam(store);
  try {
    adam.step(1e-3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("broken.weight") != std::string::npos);
  }
  CHECK(ok.to_vector() == before);
  CHECK(adam.steps() == 0);
}

TEST_CASE("one epoch over eight samples logs two steps") {
  TempDir dir("fit");
  const auto tiles = tiny_tiles(8);
  FeedbackFormer model(tiny_run().model);
  FitOptions opts;
  opts.out_dir = dir.str();
  const auto r = fit(model, tiles, all_fold(8), tiny_run(), opts);
  CHECK(r.steps == 2);
  std::ifstream log(r.log_path);
  std::string line;
  int steps = 0, epochs = 0, evals = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto type = j.at("type").get<std::string>();
    steps += type == "step";
    epochs += type == "epoch";
    evals += type == "eval";
    if (type == "epoch") {
      CHECK(j.at("lr").get<double>() == 1e-3);
      CHECK(std::isfinite(j.at("loss").get<double>()));
    }
  }
  CHECK(steps == 2);
  CHECK(epochs == 1);
  CHECK(evals == 1);
  CHECK(std::filesystem::exists(r.checkpoint_path));
}

TEST_CASE("training is reproducible from seed and config") {
  TempDir a("rep_a"), b("rep_b");
  const auto tiles = tiny_tiles(8);
  auto rc = tiny_run();
  rc.train.epochs = 2;
  FeedbackFormer m1(rc.model), m2(rc.model);
  FitOptions o1, o2;
  o1.out_dir = a.str();
  o2.out_dir = b.str();
  const auto r1 = fit(m1, tiles, all_fold(8), rc, o1);
  const auto r2 = fit(m2, tiles, all_fold(8), rc, o2);
  CHECK(r1.epoch_loss == r2.epoch_loss);
  CHECK(read_bytes(r1.log_path) == read_bytes(r2.log_path));
  CHECK(snapshot(m1) == snapshot(m2));
}

TEST_CASE("alpha = 0.5 and alpha = 0 diverge after the first step") {
  const auto tiles = tiny_tiles(4);
  auto rc = tiny_run();
  FeedbackFormer with(rc.model), without(rc.model);
  CHECK(snapshot(with) == snapshot(without));
  FitOptions opts;
  opts.restore_best = false;
  fit(with, tiles, all_fold(4), rc, opts);
  rc.loss.alpha = 0.0;
  fit(without, tiles, all_fold(4), rc, opts);
  const auto a = snapshot(with), b = snapshot(without);
  double max_diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) max_diff = std::max(max_diff, std::abs(a[i][j] - b[i][j]));
  CHECK(max_diff > 1e-6);
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("ckpt");
  auto rc = tiny_run();
  FeedbackFormer model(rc.model);
  Rng rng(4);
  for (auto& p : model.params().params())
    for (std::int64_t i = 0; i < p.value.numel(); ++i) p.value.set(i, p.value.at(i) + 0.1 * rng.normal());
  const CheckpointInfo info{7, 0.625, 99, 12};
  save_checkpoint(dir / "a.ckpt", model, rc, info);

  const auto ck = load_checkpoint(dir / "a.ckpt");
  CHECK(ck.info.epoch == 7);
  CHECK(ck.info.best_miou == 0.625);
  CHECK(ck.info.rng_seed == 99);
  CHECK(ck.info.rng_counter == 12);
  CHECK(ck.digest == config_digest(rc));
  CHECK(canonical_text(ck.config) == canonical_text(rc));

  auto restored = model_from_checkpoint(ck);
  save_checkpoint(dir / "b.ckpt", restored, ck.config, ck.info);
  CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));

  const auto tiles = tiny_tiles(4);
  const auto batch = make_batch(tiles, std::vector<std::size_t>{0, 1, 2, 3}, DType::f64);
  CHECK(model.predict(batch.images).to_vector() == restored.predict(batch.images).to_vector());
  const std::vector<std::size_t> idx = {0, 1, 2, 3};
  CHECK(evaluate(model, tiles, idx) == evaluate(restored, tiles, idx));

  SUBCASE("f32 models round-trip too") {
    auto rc32 = rc;
    rc32.model.dtype = DType::f32;
    FeedbackFormer m32(rc32.model);
    save_checkpoint(dir / "c.ckpt", m32, rc32, {});
    auto back = model_from_checkpoint(load_checkpoint(dir / "c.ckpt"));
    save_checkpoint(dir / "d.ckpt", back, rc32, {});
    CHECK(read_bytes(dir / "c.ckpt") == read_bytes(dir / "d.ckpt"));
  }
  SUBCASE("corruption is a data error") {
    auto bytes = read_bytes(dir / "a.ckpt");
    write_bytes(dir / "short.ckpt", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), DataError);
    write_bytes(dir / "long.ckpt", bytes + "x");
    CHECK_THROWS_AS(load_checkpoint(dir / "long.ckpt"), DataError);
    auto magic = bytes;
    magic[0] = 'X';
    write_bytes(dir / "magic.ckpt", magic);
    CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), DataError);
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), DataError);
  }
  SUBCASE("weights must match the architecture") {
    FeedbackFormer other(tiny_model_config(FeedbackMode::attn_self));
    CHECK_THROWS_AS(load_weights(other, ck), ConfigError);
  }
}

TEST_CASE("evaluation") {
  const auto tiles = tiny_tiles(4);
  FeedbackFormer model(tiny_run().model);
  const std::vector<std::size_t> idx = {0, 1, 2, 3};
  const auto a = evaluate(model, tiles, idx, 3), b = evaluate(model, tiles, idx, 4);
  CHECK(a == b);
  CHECK(a.total() == 4 * 32 * 32);

  auto bad = tiles;
  bad[1].labels[0] = 5;
  CHECK_THROWS_AS(evaluate(model, bad, idx), DataError);

  ConfusionMatrix perfect(2);
  perfect.add(std::vector<std::int32_t>{0, 1, 1}, std::vector<std::int32_t>{0, 1, 1});
  const auto report = format_report(perfect, {"membrane", "background"});
  const auto m = report.find("membrane"), bg = report.find("background"), mi = report.find("mIoU");
  CHECK(m < bg);
  CHECK(bg < mi);
  CHECK(mi != std::string::npos);
  CHECK(report.find("1.0000") != std::string::npos);
}

TEST_CASE("fit reports the sample when a batch is malformed") {
  auto tiles = tiny_tiles(4);
  tiles[2].size = 16;
  FeedbackFormer model(tiny_run().model);
  try {
    fit(model, tiles, all_fold(4), tiny_run());
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("sample") != std::string::npos);
  }
}
