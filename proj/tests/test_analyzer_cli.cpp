#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include <json.hpp>

#include "fbformer/analysis.hpp"
#include "fbformer/config.hpp"
#include "fbformer/data.hpp"
#include "fbformer/manifest.hpp"
#include "fbformer/model.hpp"
#include "fbformer/render.hpp"
#include "support.hpp"

using namespace fbf;
using fbf::testing::TempDir;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ModelConfig s12(FeedbackMode mode) {
  ModelConfig c;
  c.encoder = EncoderConfig::preset("S12");
  c.feedback.mode = mode;
  return c;
}

struct CliResult {
  int status = -1;
  std::string out, err;
};

CliResult run_cli(const std::string& args, const TempDir& dir) {
  const std::string out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + FBF_CLI_PATH + "\" " + args + " >\"" + out + "\" 2>\"" + err + "\"";
  const int raw = std::system(cmd.c_str());
  CliResult r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = read_text(out);
  r.err = read_text(err);
  return r;
}

RenderInput sample_render(int samples, int sets) {
  RenderInput in;
  in.height = 6;
  in.width = 5;
  Rng rng(1);
  for (int s = 0; s < samples; ++s) {
    std::vector<float> img(3 * 30);
    for (auto& v : img) v = static_cast<float>(rng.uniform(-1, 1));
    std::vector<std::int32_t> gt(30);
    for (auto& v : gt) v = static_cast<std::int32_t>(rng.below(3));
    gt[0] = 0;
    in.images.push_back(img);
    in.ground_truth.push_back(gt);
  }
  for (int k = 0; k < sets; ++k) {
    PredictionSet p{"set" + std::to_string(k), {}};
    for (int s = 0; s < samples; ++s) p.maps.push_back(in.ground_truth[s]);
    in.sets.push_back(p);
  }
  return in;
}

const std::vector<Rgb> kPalette = {Rgb{10, 20, 30}, Rgb{200, 0, 0}, Rgb{0, 200, 0}};

}  // namespace

// -- profiler --------------------------------------------------------------------

TEST_CASE("profile totals are the sum of the rows") {
  for (auto mode : {FeedbackMode::none, FeedbackMode::lite, FeedbackMode::attn_st}) {
    const auto rep = profile_model(s12(mode), 256, 256);
    std::int64_t p = 0, pp = 0, m = 0;
    for (const auto& r : rep.rows) {
      p += r.params;
      pp += r.param_touches;
      m += r.macs;
    }
    CHECK(p == rep.params_unique);
    CHECK(pp == rep.params_per_pass);
    CHECK(m == rep.macs);
    FeedbackFormer model(s12(mode), true);
    CHECK(rep.params_unique == model.params().total_numel());
    REQUIRE(rep.row("aux_head"));
    CHECK(rep.row("aux_head")->training_only);
    CHECK(rep.row("aux_head")->macs == 0);
    CHECK(rep.row("aux_head")->params > 0);
  }
}

TEST_CASE("conv-row MACs quadruple when the input side doubles") {
  const auto cfg = s12(FeedbackMode::lite);
  for (std::int64_t side : {128, 256}) {
    const auto a = profile_model(cfg, side, side), b = profile_model(cfg, 2 * side, 2 * side);
    for (const char* name : {"encoder.patch_embed1", "encoder.patch_embed2", "decoder.lateral", "decoder.fpn",
                             "decoder.scale", "decoder.cls", "feedback"}) {
      CAPTURE(name);
      CHECK(b.row(name)->raw.conv == 4 * a.row(name)->raw.conv);
      CHECK(b.row(name)->macs == 4 * a.row(name)->macs);
    }
    // Global attention scores grow with the square of the token count.
    CHECK(b.row("encoder.stage1")->raw.attention_matmul == 16 * a.row("encoder.stage1")->raw.attention_matmul);
  }
}

TEST_CASE("profile convention flags only add") {
  const auto cfg = s12(FeedbackMode::lite);
  const auto base = profile_model(cfg, 256, 256);
  for (int flags = 1; flags < 8; ++flags) {
    ProfileConvention c;
    c.include_bias = flags & 1;
    c.include_norm = flags & 2;
    c.count_attention_matmul = flags & 4;
    const auto rep = profile_model(cfg, 256, 256, c);
    CHECK(rep.macs > base.macs);
    CHECK(rep.params_unique == base.params_unique);
    std::int64_t expect = 0;
    for (const auto& r : rep.rows) expect += convention_macs(r.raw, c);
    CHECK(rep.macs == expect);
  }
}

TEST_CASE("feedback module MAC ordering") {
  const auto lite = profile_model(s12(FeedbackMode::lite), 256, 256).row("feedback")->macs;
  const auto st = profile_model(s12(FeedbackMode::attn_st), 256, 256).row("feedback")->macs;
  const auto self = profile_model(s12(FeedbackMode::attn_self), 256, 256).row("feedback")->macs;
  CHECK(lite < st);
  CHECK(st < self);
}

TEST_CASE("profile text and csv") {
  const auto rep = profile_model(s12(FeedbackMode::lite), 256, 256);
  const auto table = format_profile_table(rep);
  CHECK(table.find("input 3x256x256") != std::string::npos);
  CHECK(table.find(std::to_string(rep.macs)) != std::string::npos);
  CHECK(table.find(std::to_string(rep.params_per_pass)) != std::string::npos);
  const auto csv = format_profile_csv(rep);
  std::istringstream in(csv);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == static_cast<int>(rep.rows.size()) + 2);
}

// -- rendering -------------------------------------------------------------------

TEST_CASE("render grid layout") {
  const auto in = sample_render(2, 3);
  const auto g = grid_layout(in);
  CHECK(g.rows == 2);
  CHECK(g.cols == 5);
  const auto img = render_grid(in, kPalette);
  CHECK(img.width == g.width());
  CHECK(img.height == g.height());
  CHECK(img.channels == 3);
  CHECK(img.width == 5 * (5 + GridLayout::kPad) + GridLayout::kPad);
}

TEST_CASE("render is palette mapped and deterministic") {
  TempDir dir("render");
  const auto in = sample_render(2, 2);
  const auto g = grid_layout(in);
  const auto img = render_grid(in, kPalette);
  for (int row = 0; row < 2; ++row)
    for (int col = 1; col < g.cols; ++col) {
      const int x0 = g.panel_x(col), y0 = g.panel_y(row);
      for (int k = 0; k < 3; ++k) CHECK(img.at(x0, y0, k) == kPalette[0][k]);
      const int last = in.ground_truth[row][29];
      for (int k = 0; k < 3; ++k) CHECK(img.at(x0 + 4, y0 + 5, k) == kPalette[last][k]);
    }
  render_predictions(dir / "a.png", in, kPalette);
  render_predictions(dir / "b.png", in, kPalette);
  CHECK(read_text(dir / "a.png") == read_text(dir / "b.png"));
  CHECK(read_png(dir / "a.png") == img);
}

TEST_CASE("render errors") {
  auto in = sample_render(1, 1);
  CHECK_THROWS_AS(render_grid(in, {kPalette[0], kPalette[1]}), ConfigError);
  in.sets[0].maps[0].pop_back();
  CHECK_THROWS_AS(render_grid(in, kPalette), ConfigError);
}

// -- config and manifest ---------------------------------------------------------

TEST_CASE("config text round trips") {
  const auto rc = load_run_config(FBF_SOURCE_DIR "/configs/synthetic_small.toml");
  CHECK(rc.model.encoder.dims == std::array<int, 4>{16, 32, 48, 64});
  CHECK(rc.model.num_classes == 2);
  const auto again = run_config_from(KeyValueConfig::parse(canonical_text(rc)));
  CHECK(canonical_text(again) == canonical_text(rc));
  CHECK(config_digest(again) == config_digest(rc));
  CHECK_THROWS_AS(run_config_from(KeyValueConfig::parse("encoder.width = 3\n")), ConfigError);
  CHECK_THROWS_AS(run_config_from(KeyValueConfig::parse("train.epochs = many\n")), ConfigError);
  CHECK_THROWS_AS(run_config_from(KeyValueConfig::parse("feedback.mode = \"loop\"\n")), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/x.toml"), ConfigError);
  const auto s12cfg = load_run_config(FBF_SOURCE_DIR "/configs/s12.toml");
  CHECK(s12cfg.model.encoder.variant == "S12");
  CHECK(s12cfg.train.epochs == 500);
}

TEST_CASE("config digest changes iff a field changes") {
  const RunConfig base;
  const auto d0 = config_digest(base);
  CHECK(config_digest(RunConfig{}) == d0);
  std::vector<std::function<void(RunConfig&)>> edits = {
      [](RunConfig& c) { c.model.encoder = EncoderConfig::preset("S24"); },
      [](RunConfig& c) { c.model.encoder.dims[3] = 256; },
      [](RunConfig& c) { c.model.encoder.depths[0] = 3; },
      [](RunConfig& c) { c.model.encoder.heads[3] = 4; },
      [](RunConfig& c) { c.model.encoder.mlp_ratio = 3.0; },
      [](RunConfig& c) { c.model.decoder.channels = 64; },
      [](RunConfig& c) { c.model.decoder.topdown = false; },
      [](RunConfig& c) { c.model.decoder.norm_groups = 16; },
      [](RunConfig& c) { c.model.feedback.mode = FeedbackMode::attn_st; },
      [](RunConfig& c) { c.model.feedback.beta_init = 0.5; },
      [](RunConfig& c) { c.model.feedback.attn_downsample = 2; },
      [](RunConfig& c) { c.model.feedback.train_both_rounds = false; },
      [](RunConfig& c) { c.model.num_classes = 2; },
      [](RunConfig& c) { c.model.dtype = DType::f64; },
      [](RunConfig& c) { c.model.init_seed = 1; },
      [](RunConfig& c) { c.loss.lambda1 = 0.6; },
      [](RunConfig& c) { c.loss.lambda2 = 0.4; },
      [](RunConfig& c) { c.loss.lambda3 = 0.0; },
      [](RunConfig& c) { c.loss.alpha = 1.0; },
      [](RunConfig& c) { c.train.epochs = 10; },
      [](RunConfig& c) { c.train.batch_size = 2; },
      [](RunConfig& c) { c.train.lr0 = 1e-4; },
      [](RunConfig& c) { c.train.seed = 9; },
      [](RunConfig& c) { c.train.eval_every = 1; },
      [](RunConfig& c) { c.train.augment = false; },
      [](RunConfig& c) { c.data.root = "elsewhere"; },
      [](RunConfig& c) { c.data.tile = 128; },
      [](RunConfig& c) { c.data.protocol = "ratio-3fold"; },
      [](RunConfig& c) { c.data.fold = 2; },
  };
  std::set<std::uint64_t> digests = {d0};
  for (std::size_t i = 0; i < edits.size(); ++i) {
    RunConfig c;
    edits[i](c);
    CAPTURE(i);
    CHECK(config_digest(c) != d0);
    digests.insert(config_digest(c));
  }
  CHECK(digests.size() == edits.size() + 1);
}

TEST_CASE("manifest json") {
  TempDir dir("manifest");
  RunManifest m;
  m.command = "profile --input 256";
  m.config_digest = 0xABCDEF;
  m.seed = 4;
  m.artifacts = {{"profile_csv", "out/profile.csv"}};
  m.wall_seconds = 1.5;
  write_manifest(dir / "manifest.json", m);
  const auto j = nlohmann::json::parse(read_text(dir / "manifest.json"));
  CHECK(j.at("command") == "profile --input 256");
  CHECK(j.at("config_digest") == "0000000000abcdef");
  CHECK(j.at("seed") == 4);
  CHECK(j.at("artifacts").at("profile_csv") == "out/profile.csv");
  CHECK(j.at("tool_version") == kToolVersion);
  CHECK(j.at("exit_status") == 0);
}

// -- command line ----------------------------------------------------------------

TEST_CASE("cli usage and exit codes") {
  TempDir dir("cli");
  auto none = run_cli("", dir);
  CHECK(none.status == 1);
  CHECK(none.err.find("fbformer") != std::string::npos);
  CHECK(none.err.find("profile") != std::string::npos);

  CHECK(run_cli("frobnicate", dir).status == 1);
  CHECK(run_cli("profile --out \"" + (dir / "p") + "\" --input 100", dir).status == 1);

  std::ofstream(dir / "bad.toml") << "encoder.variant = \"S13\"\n";
  CHECK(run_cli("profile --config \"" + (dir / "bad.toml") + "\" --out \"" + (dir / "p") + "\"", dir).status == 1);

  std::ofstream(dir / "nodata.toml") << "data.root = \"" << (dir / "missing") << "\"\n";
  const auto missing = run_cli("train --config \"" + (dir / "nodata.toml") + "\" --out \"" + (dir / "t") + "\"", dir);
  CHECK(missing.status == 2);
  CHECK(missing.err.find("data error") != std::string::npos);
  const auto j = nlohmann::json::parse(read_text(dir / "t/manifest.json"));
  CHECK(j.at("exit_status") == 2);
  CHECK(run_cli("eval --checkpoint \"" + (dir / "none.ckpt") + "\" --out \"" + (dir / "e") + "\"", dir).status == 2);
}

TEST_CASE("cli profile matches the library report") {
  TempDir dir("cliprof");
  const auto r = run_cli("profile --config \"" FBF_SOURCE_DIR "/configs/s12.toml\" --input 256 --out \"" +
                             (dir / "out") + "\"",
                         dir);
  REQUIRE(r.status == 0);
  const auto cfg = load_run_config(FBF_SOURCE_DIR "/configs/s12.toml");
  CHECK(r.out == format_profile_table(profile_model(cfg.model, 256, 256)));
  CHECK(read_text(dir / "out/profile.csv") == format_profile_csv(profile_model(cfg.model, 256, 256)));
  const auto j = nlohmann::json::parse(read_text(dir / "out/manifest.json"));
  CHECK(j.at("config_digest") == hex64(config_digest(cfg)));
  CHECK(j.at("command").get<std::string>().rfind("profile", 0) == 0);
}

TEST_CASE("cli gradcheck") {
  TempDir dir("cligrad");
  const auto r = run_cli("gradcheck --size tiny --out \"" + (dir / "out") + "\"", dir);
  CHECK(r.status == 0);
  CHECK(r.out.find("max rel. err") != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(run_cli("gradcheck --size huge --out \"" + (dir / "out") + "\"", dir).status == 1);
}

TEST_CASE("cli synth, train, eval and predict end to end") {
  TempDir dir("clie2e");
  const auto data = dir / "data";
  REQUIRE(run_cli("synth --count 10 --size 64 --cells-min 2 --cells-max 4 --thickness 8 --seed 2 --out \"" + data + "\"",
                  dir)
              .status == 0);
  std::ofstream(dir / "run.toml") << "encoder.variant = \"custom\"\n"
                                  << "encoder.dims = [8, 8, 16, 16]\n"
                                  << "encoder.depths = [1, 1, 1, 1]\n"
                                  << "encoder.heads = [1, 1, 2, 2]\n"
                                  << "decoder.channels = 8\n"
                                  << "decoder.norm_groups = 4\n"
                                  << "model.num_classes = 2\n"
                                  << "train.epochs = 1\n"
                                  << "train.eval_every = 1\n"
                                  << "data.root = \"" << data << "\"\n"
                                  << "data.tile = 32\n"
                                  << "data.protocol = \"ratio-3fold\"\n";
  const auto train = run_cli("train --config \"" + (dir / "run.toml") + "\" --out \"" + (dir / "run") + "\"", dir);
  REQUIRE(train.status == 0);
  CHECK(train.out.find("mIoU") != std::string::npos);
  CHECK(std::filesystem::exists(dir / "run/best.ckpt"));
  CHECK(std::filesystem::exists(dir / "run/train_log.jsonl"));
  const auto ckpt = dir / "run/best.ckpt";
  const auto e1 = run_cli("eval --checkpoint \"" + ckpt + "\" --out \"" + (dir / "ev1") + "\"", dir);
  const auto e2 = run_cli("eval --checkpoint \"" + ckpt + "\" --out \"" + (dir / "ev2") + "\"", dir);
  CHECK(e1.status == 0);
  CHECK(read_text(dir / "ev1/eval_test.txt") == read_text(dir / "ev2/eval_test.txt"));
  CHECK(read_text(dir / "ev1/eval_test.txt").find("membrane") <
        read_text(dir / "ev1/eval_test.txt").find("background"));
  const auto pred = run_cli("predict --checkpoint \"" + ckpt + "\" --limit 2 --out \"" + (dir / "pr") + "\"", dir);
  CHECK(pred.status == 0);
  const auto img = read_png(dir / "pr/predictions.png");
  CHECK(img.width == 4 * (32 + GridLayout::kPad) + GridLayout::kPad);
}
