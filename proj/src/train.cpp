#include "fbformer/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "fbformer/losses.hpp"

namespace fbf {

double cosine_lr(int epoch, int epochs, double lr0) {
  if (epochs < 1) throw ConfigError("cosine_lr: epochs must be >= 1");
  if (epoch < 0 || epoch > epochs) {
    throw UsageError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(epochs) + "]");
  }
  const double lr = 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * epoch / epochs));
  return lr > 0.0 ? lr : 0.0;
}

Adam::Adam(ParamStore& store, double beta1, double beta2, double eps)
    : store_(&store), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : store.params()) {
    m_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
    v_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
  }
}

void Adam::step(double lr) {
  auto& params = store_->params();
  if (params.size() != m_.size()) throw UsageError("Adam: parameter set changed after construction");
  for (const auto& p : params) {
    if (!p.trainable || !p.value.has_grad()) continue;
    for (double g : p.value.grad().to_vector()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    dispatch(p.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = p.value.data<T>();
      auto m = m_[i].data<T>();
      auto v = v_[i].data<T>();
      const bool has = p.value.has_grad();
      const Tensor grad = has ? p.value.grad() : Tensor();
      const T* g = has ? grad.data<T>().data() : nullptr;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g ? static_cast<double>(g[j]) : 0.0;
        const double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
        const double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        w[j] = static_cast<T>(w[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + eps_));
      }
    });
  }
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'B', 'F', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <class U>
  U uint() {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      const int c = in_.get();
      if (c == EOF) fail("truncated file");
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(c)) << (8 * i));
    }
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    if (n > (1u << 26)) fail("implausible string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) fail("truncated file");
    return s;
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw DataError("checkpoint '" + path_ + "': " + why);
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::string& path, const FeedbackFormer& model, const RunConfig& config,
                     const CheckpointInfo& info) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  Writer w(out);
  out.write(kMagic, sizeof(kMagic));
  w.uint(kCheckpointVersion);
  w.uint(config_digest(config));
  w.str(canonical_text(config));
  w.uint(static_cast<std::uint32_t>(info.epoch));
  w.f64(info.best_miou);
  w.uint(info.rng_seed);
  w.uint(info.rng_counter);
  const auto& params = model.params().params();
  w.uint(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.uint(static_cast<std::uint8_t>(p.value.dtype()));
    w.uint(static_cast<std::uint32_t>(p.value.ndim()));
    for (auto d : p.value.shape()) w.uint(static_cast<std::uint64_t>(d));
    dispatch(p.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (T v : p.value.data<T>()) {
        if constexpr (std::is_same_v<T, float>) {
          w.f32(v);
        } else {
          w.f64(v);
        }
      }
    });
  }
  if (!out) throw DataError("error while writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  Reader r(in, path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("not a checkpoint file");
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.digest = r.uint<std::uint64_t>();
  const std::string text = r.str();
  try {
    ck.config = run_config_from(KeyValueConfig::parse(text));
  } catch (const ConfigError& e) {
    r.fail(std::string("embedded config is invalid: ") + e.what());
  }
  if (config_digest(ck.config) != ck.digest) r.fail("config digest mismatch");
  ck.info.epoch = static_cast<int>(r.uint<std::uint32_t>());
  ck.info.best_miou = r.f64();
  ck.info.rng_seed = r.uint<std::uint64_t>();
  ck.info.rng_counter = r.uint<std::uint64_t>();
  const auto count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto dt = r.uint<std::uint8_t>();
    if (dt > 1) r.fail("tensor '" + name + "' has unknown dtype " + std::to_string(dt));
    const auto dtype = static_cast<DType>(dt);
    const auto ndim = r.uint<std::uint32_t>();
    if (ndim > 8) r.fail("tensor '" + name + "' has implausible rank");
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::int64_t>(r.uint<std::uint64_t>());
    Tensor t = Tensor::zeros(shape, dtype);
    dispatch(dtype, [&](auto tag) {
      using T = decltype(tag);
      for (T& v : t.data<T>()) {
        if constexpr (std::is_same_v<T, float>) {
          v = r.f32();
        } else {
          v = r.f64();
        }
      }
    });
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (in.peek() != EOF) r.fail("trailing bytes after the last tensor");
  return ck;
}

void load_weights(FeedbackFormer& model, const Checkpoint& ckpt) {
  auto& params = model.params().params();
  if (params.size() != ckpt.tensors.size()) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.tensors[i];
    if (name != params[i].name || t.shape() != params[i].value.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' " + shape_str(t.shape()) +
                        " does not match model parameter '" + params[i].name + "' " +
                        shape_str(params[i].value.shape()));
    }
    params[i].value.copy_from(t.to(params[i].value.dtype()));
  }
}

FeedbackFormer model_from_checkpoint(const Checkpoint& ckpt) {
  FeedbackFormer model(ckpt.config.model);
  load_weights(model, ckpt);
  return model;
}

// ---------------------------------------------------------------------------

ConfusionMatrix evaluate(const FeedbackFormer& model, const std::vector<SampleTile>& tiles,
                         const std::vector<std::size_t>& indices, int batch_size) {
  ConfusionMatrix cm(model.config().num_classes);
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    const std::size_t n = std::min<std::size_t>(batch_size, indices.size() - i);
    const auto part = std::span(indices).subspan(i, n);
    for (auto idx : part) {
      for (auto l : tiles.at(idx).labels) {
        if (l < 0 || l >= model.config().num_classes) {
          throw DataError("sample '" + tiles[idx].source + "': label " + std::to_string(l) +
                          " outside the model's " + std::to_string(model.config().num_classes) +
                          " classes");
        }
      }
    }
    const Batch batch = make_batch(tiles, part, model.config().dtype);
    cm.add(ops::argmax_channels(model.predict(batch.images)), batch.labels);
  }
  return cm;
}

std::string format_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  if (static_cast<int>(class_names.size()) != cm.num_classes()) {
    throw ConfigError("report has " + std::to_string(class_names.size()) + " class names for " +
                      std::to_string(cm.num_classes()) + " classes");
  }
  std::ostringstream os;
  std::size_t width = 4;
  for (const auto& n : class_names) width = std::max(width, n.size());
  os << std::left << std::setw(static_cast<int>(width)) << "class" << "  IoU\n";
  os << std::fixed << std::setprecision(4);
  for (int c = 0; c < cm.num_classes(); ++c) {
    os << std::setw(static_cast<int>(width)) << class_names[c] << "  ";
    const double v = cm.iou(c);
    if (std::isnan(v)) {
      os << "n/a";
    } else {
      os << v;
    }
    if (cm.support(c) == 0) os << "  (absent from ground truth)";
    os << '\n';
  }
  os << std::setw(static_cast<int>(width)) << "mIoU" << "  " << cm.miou() << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

FitResult fit(FeedbackFormer& model, const std::vector<SampleTile>& tiles, const Fold& fold,
              const RunConfig& cfg, const FitOptions& opts) {
  cfg.train.validate();
  cfg.loss.validate();
  if (fold.train.empty()) throw DataError("fit: training split is empty");
  if (fold.val.empty()) throw DataError("fit: validation split is empty");

  FitResult result;
  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    result.log_path = (std::filesystem::path(opts.out_dir) / "train_log.jsonl").string();
    result.checkpoint_path = (std::filesystem::path(opts.out_dir) / "best.ckpt").string();
    log.open(result.log_path);
    if (!log) throw DataError("cannot write '" + result.log_path + "'");
  }
  auto emit = [&](const nlohmann::json& j) {
    if (log.is_open()) log << j.dump() << '\n';
  };

  Adam adam(model.params());
  const Rng rng(cfg.train.seed);
  std::vector<Tensor> best;
  const auto& ts = cfg.train;
  for (int epoch = 0; epoch < ts.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, ts.epochs, ts.lr0);
    std::vector<std::size_t> order = fold.train;
    Rng epoch_rng = rng.derive(static_cast<std::uint64_t>(epoch));
    epoch_rng.shuffle(order);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t i = 0; i < order.size(); i += ts.batch_size) {
      const std::size_t n = std::min<std::size_t>(ts.batch_size, order.size() - i);
      std::vector<SampleTile> batch_tiles;
      for (std::size_t j = 0; j < n; ++j) {
        const auto& tile = tiles.at(order[i + j]);
        if (ts.augment) {
          Rng aug = rng.derive(static_cast<std::uint64_t>(epoch), 1 + order[i + j]);
          batch_tiles.push_back(augment(tile, aug));
        } else {
          batch_tiles.push_back(tile);
        }
      }
      std::vector<std::size_t> idx(n);
      for (std::size_t j = 0; j < n; ++j) idx[j] = j;
      Batch batch;
      try {
        batch = make_batch(batch_tiles, idx, model.config().dtype);
      } catch (const DataError& e) {
        throw DataError("sample '" + tiles.at(order[i]).source + "': " + e.what());
      }

      model.params().zero_grad();
      double loss_value = 0.0;
      {
        Tape tape;
        const ForwardOutput out = model.forward(batch.images);
        const LossBreakdown loss = model_loss(out, batch.labels, cfg.loss, model.config().feedback);
        loss_value = loss.total.item();
        if (!std::isfinite(loss_value)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(result.steps));
        }
        tape.backward(loss.total);
      }
      adam.step(lr);
      ++result.steps;
      ++batches;
      loss_sum += loss_value;
      emit({{"type", "step"}, {"epoch", epoch}, {"step", result.steps}, {"loss", loss_value}, {"lr", lr}});
    }
    const double mean_loss = loss_sum / batches;
    result.epoch_loss.push_back(mean_loss);
    result.epoch_lr.push_back(lr);
    emit({{"type", "epoch"}, {"epoch", epoch}, {"loss", mean_loss}, {"lr", lr}});

    std::string line = "epoch " + std::to_string(epoch + 1) + "/" + std::to_string(ts.epochs) +
                       " loss " + std::to_string(mean_loss) + " lr " + std::to_string(lr);
    const bool last = epoch + 1 == ts.epochs;
    if ((epoch + 1) % ts.eval_every == 0 || last) {
      const double miou = evaluate(model, tiles, fold.val, ts.batch_size).miou();
      const bool improved = miou > result.best_miou;
      if (improved) {
        result.best_miou = miou;
        result.best_epoch = epoch;
        best.clear();
        for (const auto& p : model.params().params()) best.push_back(p.value.clone());
        if (!result.checkpoint_path.empty()) {
          CheckpointInfo info{epoch, miou, epoch_rng.seed(), epoch_rng.counter()};
          save_checkpoint(result.checkpoint_path, model, cfg, info);
        }
      }
      emit({{"type", "eval"}, {"epoch", epoch}, {"val_miou", miou}, {"best", improved}});
      line += " val mIoU " + std::to_string(miou);
    }
    if (opts.progress) opts.progress(line);
  }
  if (opts.restore_best && !best.empty()) {
    auto& params = model.params().params();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value.copy_from(best[i]);
  }
  return result;
}

}  // namespace fbf
