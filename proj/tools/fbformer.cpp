// Command-line front end: synth, train, eval, predict, profile, gradcheck.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "fbformer/analysis.hpp"
#include "fbformer/config.hpp"
#include "fbformer/data.hpp"
#include "fbformer/manifest.hpp"
#include "fbformer/model.hpp"
#include "fbformer/render.hpp"
#include "fbformer/train.hpp"

namespace fs = std::filesystem;
using namespace fbf;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitCheckFailed = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Key-value config file");
  cmd->add_option("--seed", c.seed, "Seed (overrides train.seed and model.seed)");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) {
    cfg.train.seed = *c.seed;
    cfg.model.init_seed = *c.seed;
  }
  return cfg;
}

std::string out_path(const Common& c, const std::string& name) {
  return (fs::path(c.out) / name).string();
}

const std::vector<std::size_t>& split_of(const Fold& f, const std::string& split) {
  if (split == "train") return f.train;
  if (split == "val") return f.val;
  if (split == "test") return f.test;
  throw ConfigError("unknown split '" + split + "' (valid: train, val, test)");
}

struct Prepared {
  DatasetSpec spec;
  std::vector<SampleTile> tiles;
  SplitPlan plan;
};

Prepared prepare_data(const RunConfig& cfg) {
  if (cfg.data.root.empty()) throw ConfigError("data.root is not set");
  Prepared p;
  p.spec = load_dataset(cfg.data.root);
  if (p.spec.class_count() != cfg.model.num_classes) {
    throw ConfigError("dataset '" + cfg.data.root + "' has " + std::to_string(p.spec.class_count()) +
                      " classes but model.num_classes is " + std::to_string(cfg.model.num_classes));
  }
  p.tiles = load_tiles(p.spec, cfg.data.tile);
  std::vector<std::string> groups;
  for (const auto& t : p.tiles) groups.push_back(t.source);
  p.plan = build_folds(groups, cfg.data.protocol, cfg.train.seed);
  if (cfg.data.fold < 0 || cfg.data.fold >= static_cast<int>(p.plan.folds.size())) {
    throw ConfigError("data.fold " + std::to_string(cfg.data.fold) + " outside [0, " +
                      std::to_string(p.plan.folds.size()) + ")");
  }
  return p;
}

// -- subcommands ----------------------------------------------------------------

struct SynthArgs {
  int count = 20;
  int size = 256;
  int classes = 2;
  int cells_min = 8;
  int cells_max = 16;
  double thickness = 3.0;
  double noise = 0.05;
};

int run_synth(const Common& c, const SynthArgs& a, RunManifest& m) {
  SyntheticCellConfig s;
  s.seed = c.seed.value_or(0);
  s.count = a.count;
  s.image_size = a.size;
  s.classes = a.classes;
  s.cells_min = a.cells_min;
  s.cells_max = a.cells_max;
  s.membrane_thickness = a.thickness;
  s.noise_std = a.noise;
  const DatasetSpec spec = generate_synthetic(s, c.out);
  m.seed = s.seed;
  m.artifacts.emplace_back("dataset", spec.root);
  std::cout << "wrote " << spec.stems.size() << " synthetic " << s.image_size << "x" << s.image_size
            << " images with " << spec.class_count() << " classes to " << spec.root << "\n";
  return 0;
}

int run_train(const Common& c, RunManifest& m) {
  const RunConfig cfg = resolve_config(c);
  m.config_digest = config_digest(cfg);
  m.seed = cfg.train.seed;
  const Prepared data = prepare_data(cfg);
  const Fold& fold = data.plan.folds[cfg.data.fold];
  std::cout << "fold " << cfg.data.fold << ": " << fold.train.size() << " train / " << fold.val.size()
            << " val / " << fold.test.size() << " test tiles\n";
  FeedbackFormer model(cfg.model);
  FitOptions opts;
  opts.out_dir = c.out;
  opts.progress = [](const std::string& line) { std::cout << line << "\n" << std::flush; };
  const FitResult r = fit(model, data.tiles, fold, cfg, opts);
  m.artifacts.emplace_back("train_log", r.log_path);
  m.artifacts.emplace_back("checkpoint", r.checkpoint_path);
  std::cout << "best val mIoU " << r.best_miou << " at epoch " << r.best_epoch + 1 << "\n";
  const ConfusionMatrix cm = evaluate(model, data.tiles, fold.test, cfg.train.batch_size);
  const std::string report = format_report(cm, data.spec.class_names);
  std::ofstream(out_path(c, "test_report.txt")) << report;
  m.artifacts.emplace_back("test_report", out_path(c, "test_report.txt"));
  std::cout << "test split (best checkpoint):\n" << report;
  return 0;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& split, RunManifest& m) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = ck.config;
  if (!c.config.empty()) {
    // Only the data section may be redirected; the model comes from the checkpoint.
    const RunConfig over = load_run_config(c.config);
    cfg.data = over.data;
  }
  m.config_digest = config_digest(cfg);
  m.seed = cfg.train.seed;
  const FeedbackFormer model = model_from_checkpoint(ck);
  const Prepared data = prepare_data(cfg);
  const auto& indices = split_of(data.plan.folds[cfg.data.fold], split);
  const ConfusionMatrix cm = evaluate(model, data.tiles, indices, cfg.train.batch_size);
  const std::string report = format_report(cm, data.spec.class_names);
  const std::string path = out_path(c, "eval_" + split + ".txt");
  std::ofstream(path) << report;
  m.artifacts.emplace_back("report", path);
  std::cout << split << " split, " << indices.size() << " tiles, checkpoint epoch " << ck.info.epoch + 1
            << ":\n" << report;
  return 0;
}

int run_predict(const Common& c, const std::string& checkpoint, const std::string& split, int limit,
                RunManifest& m) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = ck.config;
  if (!c.config.empty()) cfg.data = load_run_config(c.config).data;
  m.config_digest = config_digest(cfg);
  m.seed = cfg.train.seed;
  const FeedbackFormer model = model_from_checkpoint(ck);
  const Prepared data = prepare_data(cfg);
  const auto& indices = split_of(data.plan.folds[cfg.data.fold], split);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(limit, 1)), indices.size());

  RenderInput in;
  in.height = in.width = cfg.data.tile;
  PredictionSet r1{"round 1", {}}, r2{"round 2", {}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx[] = {indices[i]};
    const Batch b = make_batch(data.tiles, idx, cfg.model.dtype);
    NoGradGuard no_grad;
    ForwardOptions opts;
    opts.with_aux = false;
    const ForwardOutput out = model.forward(b.images, opts);
    in.images.push_back(data.tiles[indices[i]].image);
    in.ground_truth.push_back(b.labels);
    r1.maps.push_back(ops::argmax_channels(out.round1.logits));
    r2.maps.push_back(ops::argmax_channels(out.final_logits()));
  }
  in.sets.push_back(std::move(r1));
  if (model.has_feedback()) in.sets.push_back(std::move(r2));
  const std::string path = out_path(c, "predictions.png");
  render_predictions(path, in, data.spec.palette);
  m.artifacts.emplace_back("predictions", path);
  std::cout << "rendered " << n << " " << split << " tiles to " << path << "\n";
  return 0;
}

struct ProfileArgs {
  int input = 256;
  std::string variant;
  std::string mode;
  bool single_round = false;
  ProfileConvention convention;
};

int run_profile(const Common& c, const ProfileArgs& a, RunManifest& m) {
  RunConfig cfg = resolve_config(c);
  if (!a.variant.empty()) cfg.model.encoder = EncoderConfig::preset(a.variant);
  if (!a.mode.empty()) cfg.model.feedback.mode = parse_feedback_mode(a.mode);
  cfg.model.validate();
  if (a.input < 32 || a.input % 32 != 0) {
    throw ConfigError("--input " + std::to_string(a.input) + " must be a positive multiple of 32");
  }
  m.config_digest = config_digest(cfg);
  m.seed = cfg.model.init_seed;
  const ProfileReport rep = profile_model(cfg.model, a.input, a.input, a.convention, a.single_round);
  std::cout << format_profile_table(rep);
  const std::string csv = out_path(c, "profile.csv");
  std::ofstream(csv) << format_profile_csv(rep);
  m.artifacts.emplace_back("profile_csv", csv);
  return 0;
}

int run_gradcheck(const Common& c, const std::string& size, const std::string& mode, RunManifest& m) {
  if (size != "tiny") throw ConfigError("--size supports only 'tiny'");
  ModelConfig cfg = tiny_model_config(parse_feedback_mode(mode));
  m.seed = c.seed.value_or(0);
  m.config_digest = fnv1a64(canonical_text(cfg));
  const GradcheckResult r = gradcheck_model(cfg, 32, m.seed);
  std::cout << "gradcheck (" << mode << ", 32x32 input, 64-bit, five-point step 3e-3): " << r.params
            << " tensors, " << r.checked << " elements checked, " << r.skipped
            << " skipped at ReLU kinks\n"
            << "max rel. err " << r.max_rel_err << " (" << r.worst_param << ")\n";
  for (const auto& name : r.unchecked) std::cout << "no element of " << name << " could be checked\n";
  const bool ok = r.max_rel_err < 1e-4 && r.unchecked.empty();
  std::cout << (ok ? "PASS" : "FAIL") << " (threshold 1e-4)\n";
  return ok ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feedback Former segmentation toolkit", "fbformer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  Common common;
  SynthArgs synth;
  ProfileArgs prof;
  std::string checkpoint, split = "test", gc_size = "tiny", gc_mode = "lite";
  int limit = 4;

  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic cell-image dataset");
  add_common(c_synth, common);
  c_synth->add_option("--count", synth.count, "Number of images")->capture_default_str();
  c_synth->add_option("--size", synth.size, "Image side in pixels")->capture_default_str();
  c_synth->add_option("--classes", synth.classes, "2 or 5")->capture_default_str();
  c_synth->add_option("--cells-min", synth.cells_min)->capture_default_str();
  c_synth->add_option("--cells-max", synth.cells_max)->capture_default_str();
  c_synth->add_option("--thickness", synth.thickness, "Membrane width in pixels")->capture_default_str();
  c_synth->add_option("--noise", synth.noise, "Gaussian noise std (intensity in [0,1])")->capture_default_str();

  auto* c_train = app.add_subcommand("train", "Train on one fold and select by validation mIoU");
  add_common(c_train, common);

  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  add_common(c_eval, common);
  c_eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  c_eval->add_option("--split", split, "train, val or test")->capture_default_str();

  auto* c_pred = app.add_subcommand("predict", "Render predictions of a checkpoint as a PNG grid");
  add_common(c_pred, common);
  c_pred->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  c_pred->add_option("--split", split, "train, val or test")->capture_default_str();
  c_pred->add_option("--limit", limit, "Number of tiles")->capture_default_str();

  auto* c_prof = app.add_subcommand("profile", "Parameter and MAC counts per module");
  add_common(c_prof, common);
  c_prof->add_option("--input", prof.input, "Square input side")->capture_default_str();
  c_prof->add_option("--variant", prof.variant, "S12, S24 or S36 (overrides the config)");
  c_prof->add_option("--mode", prof.mode, "none, lite, attn_self or attn_st (overrides the config)");
  c_prof->add_flag("--single-round", prof.single_round, "Trace round 1 only");
  c_prof->add_flag("--include-bias", prof.convention.include_bias, "Count bias additions as MACs");
  c_prof->add_flag("--include-norm", prof.convention.include_norm, "Count normalization as MACs");
  c_prof->add_flag("--attention-matmul", prof.convention.count_attention_matmul,
                   "Count attention score/aggregation products");

  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of the full model");
  add_common(c_grad, common);
  c_grad->add_option("--size", gc_size, "Model size (tiny)")->capture_default_str();
  c_grad->add_option("--mode", gc_mode, "Feedback mode")->capture_default_str();

  if (argc <= 1) {
    std::cerr << app.help();
    return kExitConfig;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  CLI::App* cmd = app.get_subcommands().front();
  RunManifest manifest;
  manifest.command = cmd->get_name();
  for (int i = 2; i < argc; ++i) manifest.command += std::string(" ") + argv[i];
  const auto start = std::chrono::steady_clock::now();
  int status = 0;
  try {
    fs::create_directories(common.out);
    if (cmd == c_synth) status = run_synth(common, synth, manifest);
    if (cmd == c_train) status = run_train(common, manifest);
    if (cmd == c_eval) status = run_eval(common, checkpoint, split, manifest);
    if (cmd == c_pred) status = run_predict(common, checkpoint, split, limit, manifest);
    if (cmd == c_prof) status = run_profile(common, prof, manifest);
    if (cmd == c_grad) status = run_gradcheck(common, gc_size, gc_mode, manifest);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    status = kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    status = kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    status = kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    status = kExitData;
  }
  manifest.exit_status = status;
  manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  try {
    write_manifest(out_path(common, "manifest.json"), manifest);
  } catch (const DataError& e) {
    std::cerr << "warning: " << e.what() << "\n";
  }
  return status;
}
