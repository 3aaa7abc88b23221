#include "fbformer/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>

#include "fbformer/losses.hpp"
#include "fbformer/model.hpp"

namespace fbf {

const ProfileRow* ProfileReport::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::int64_t convention_macs(const profiling::ScopeStats& s, const ProfileConvention& c) {
  std::int64_t m = s.conv + s.linear;
  if (c.include_bias) m += s.bias;
  if (c.include_norm) m += s.norm;
  if (c.count_attention_matmul) m += s.attention_matmul;
  return m;
}

namespace {

const std::vector<std::string>& row_order() {
  static const std::vector<std::string> order = {
      "encoder.patch_embed1", "encoder.stage1", "encoder.patch_embed2", "encoder.stage2",
      "encoder.patch_embed3", "encoder.stage3", "encoder.patch_embed4", "encoder.stage4",
      "decoder.lateral",      "decoder.fpn",    "decoder.scale",        "decoder.cls",
      "aux_head",             "feedback"};
  return order;
}

}  // namespace

ProfileReport profile_model(const ModelConfig& cfg, std::int64_t height, std::int64_t width,
                            const ProfileConvention& convention, bool single_round) {
  const FeedbackFormer model(cfg, /*meta=*/true);
  const Tensor input = Tensor::meta({1, 3, height, width}, cfg.dtype);
  ForwardOptions opts;
  opts.single_round = single_round;

  // Training-mode trace for parameter touches, inference trace for MACs.
  profiling::Recorder train_rec;
  opts.with_aux = true;
  model.forward(input, opts);
  profiling::Recorder infer_rec;
  opts.with_aux = false;
  model.forward(input, opts);

  ProfileReport rep;
  rep.variant = cfg.encoder.variant;
  rep.mode = cfg.feedback.mode;
  rep.height = height;
  rep.width = width;
  rep.single_round = single_round || cfg.feedback.mode == FeedbackMode::none;
  rep.convention = convention;

  std::vector<std::string> names;
  for (const auto& n : row_order()) {
    if (train_rec.scopes().count(n)) names.push_back(n);
  }
  for (const auto& [n, stats] : train_rec.scopes()) {
    if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  }
  for (const auto& n : names) {
    ProfileRow r;
    r.name = n.empty() ? "(unscoped)" : n;
    r.params = train_rec.unique_params(n);
    r.param_touches = train_rec.scopes().at(n).param_touches;
    r.training_only = n == "aux_head";
    if (auto it = infer_rec.scopes().find(n); it != infer_rec.scopes().end()) r.raw = it->second;
    r.macs = convention_macs(r.raw, convention);
    rep.params_unique += r.params;
    rep.params_per_pass += r.param_touches;
    rep.macs += r.macs;
    rep.rows.push_back(r);
  }
  return rep;
}

std::string format_profile_table(const ProfileReport& rep) {
  std::ostringstream os;
  os << "model " << rep.variant << ", feedback " << to_string(rep.mode)
     << (rep.single_round ? " (one round)" : " (two rounds)") << ", input 3x" << rep.height << "x"
     << rep.width << "\n";
  os << "MACs: conv + linear" << (rep.convention.include_bias ? " + bias" : "")
     << (rep.convention.include_norm ? " + norm" : "")
     << (rep.convention.count_attention_matmul ? " + attention matmuls" : "")
     << "; auxiliary head excluded (training only)\n";
  os << "params: unique = distinct weights; per-pass = weights read per training forward\n\n";
  os << std::left << std::setw(24) << "module" << std::right << std::setw(14) << "params"
     << std::setw(16) << "per-pass" << std::setw(16) << "MACs" << '\n';
  auto line = [&](const std::string& name, std::int64_t p, std::int64_t pp, std::int64_t m) {
    os << std::left << std::setw(24) << name << std::right << std::setw(14) << p << std::setw(16)
       << pp << std::setw(16) << m << '\n';
  };
  for (const auto& r : rep.rows) line(r.name, r.params, r.param_touches, r.macs);
  line("total", rep.params_unique, rep.params_per_pass, rep.macs);
  os << std::fixed << std::setprecision(2) << "\ntotal: " << rep.params_unique / 1e6
     << "M params (" << rep.params_per_pass / 1e6 << "M per pass), " << rep.macs / 1e9
     << "G MACs\n";
  return os.str();
}

std::string format_profile_csv(const ProfileReport& rep) {
  std::ostringstream os;
  os << "module,params,param_touches,macs,conv,linear,attention_matmul,bias,norm,training_only\n";
  for (const auto& r : rep.rows) {
    os << r.name << ',' << r.params << ',' << r.param_touches << ',' << r.macs << ',' << r.raw.conv
       << ',' << r.raw.linear << ',' << r.raw.attention_matmul << ',' << r.raw.bias << ','
       << r.raw.norm << ',' << (r.training_only ? 1 : 0) << '\n';
  }
  os << "total," << rep.params_unique << ',' << rep.params_per_pass << ',' << rep.macs
     << ",,,,,,\n";
  return os.str();
}

// ---------------------------------------------------------------------------

ModelConfig tiny_model_config(FeedbackMode mode) {
  ModelConfig c;
  c.encoder = EncoderConfig::preset("custom");
  c.encoder.dims = {4, 4, 8, 8};
  c.encoder.depths = {1, 1, 1, 1};
  c.encoder.heads = {1, 2, 2, 4};
  c.encoder.mlp_ratio = 2.0;
  c.decoder.channels = 8;
  c.decoder.norm_groups = 2;
  c.feedback.mode = mode;
  c.feedback.attn_downsample = 2;
  c.num_classes = 3;
  c.dtype = DType::f64;
  return c;
}

GradcheckResult gradcheck_model(const ModelConfig& cfg_in, std::int64_t size, std::uint64_t seed,
                                double step) {
  ModelConfig cfg = cfg_in;
  cfg.dtype = DType::f64;
  cfg.init_seed = seed;
  FeedbackFormer model(cfg);
  Rng rng = Rng(seed).derive(fnv1a64("gradcheck"));
  // Move every parameter off its structured initial value (zero biases, unit
  // norms, zero gamma) so each one carries a generic gradient.
  for (auto& p : model.params().params()) {
    auto v = p.value.data<double>();
    for (auto& x : v) x += 0.1 * rng.normal();
  }
  const std::int64_t n = 1;
  Tensor images = Tensor::zeros({n, 3, size, size}, DType::f64);
  for (auto& x : images.data<double>()) x = rng.normal();
  std::vector<std::int32_t> labels(static_cast<std::size_t>(n * size * size));
  for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(cfg.num_classes));

  LossConfig loss_cfg;
  auto loss_of = [&]() {
    return model_loss(model.forward(images), labels, loss_cfg, cfg.feedback).total;
  };

  model.params().zero_grad();
  {
    Tape tape;
    tape.backward(loss_of());
  }
  auto eval = [&](std::vector<bool>* signs) {
    NoGradGuard no_grad;
    ops::detail::ReluSignMonitor monitor;
    const double v = loss_of().item();
    if (signs) *signs = monitor.signs();
    return v;
  };
  std::vector<bool> base_signs;
  eval(&base_signs);

  GradcheckResult res;
  for (auto& p : model.params().params()) {
    if (!p.trainable) continue;
    ++res.params;
    const std::vector<double> analytic = p.value.grad().to_vector();
    auto v = p.value.data<double>();
    double max_diff = 0.0, max_num = 0.0;
    const std::int64_t checked_before = res.checked;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      // Five-point stencil: O(h^4) truncation lets h stay large enough that
      // round-off in the loss does not swamp small gradients. Elements whose
      // stencil crosses a ReLU kink are retried with smaller steps.
      std::optional<double> estimate;
      for (double h : {step, step / 10.0, step / 100.0}) {
        double f[4];
        bool kink = false;
        const double offsets[4] = {2.0, 1.0, -1.0, -2.0};
        for (int k = 0; k < 4 && !kink; ++k) {
          std::vector<bool> signs;
          v[i] = orig + offsets[k] * h;
          f[k] = eval(&signs);
          kink = signs != base_signs;
        }
        v[i] = orig;
        if (!kink) {
          estimate = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
          break;
        }
      }
      if (!estimate) {
        ++res.skipped;
        continue;
      }
      const double numeric = *estimate;
      max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
      max_num = std::max(max_num, std::abs(numeric));
      ++res.checked;
    }
    if (res.checked == checked_before) res.unchecked.push_back(p.name);
    const double rel = max_diff / std::max(max_num, 1e-12);
    if (rel >= res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_param = p.name;
    }
  }
  return res;
}

}  // namespace fbf
