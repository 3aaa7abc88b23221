#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fbformer/config.hpp"
#include "fbformer/data.hpp"
#include "fbformer/metrics.hpp"
#include "fbformer/model.hpp"

namespace fbf {

/// A non-finite value appeared during optimization. The CLI maps it to exit 2.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 0.5 * lr0 * (1 + cos(pi * epoch / epochs)), floored at 0.
double cosine_lr(int epoch, int epochs, double lr0);

/// Bias-corrected Adam over the trainable parameters of a store.
class Adam {
 public:
  explicit Adam(ParamStore& store, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// One update with learning rate `lr`. Parameters without a gradient are
  /// treated as having a zero gradient. Throws NumericError naming the first
  /// parameter with a NaN or infinite gradient (before touching anything).
  void step(double lr);

  std::int64_t steps() const { return t_; }
  const Tensor& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor& second_moment(std::size_t i) const { return v_[i]; }

 private:
  ParamStore* store_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// -- checkpoints ----------------------------------------------------------------

/// Binary layout (all integers little-endian):
///   "FBFCKPT\0" | u32 version | u64 config digest | u32 len, config text |
///   i32 epoch | f64 best mIoU | u64 rng seed | u64 rng counter |
///   u32 tensor count | per tensor: u32 len, name | u8 dtype | u32 ndim |
///   i64 dims... | raw little-endian values
struct CheckpointInfo {
  int epoch = 0;
  double best_miou = 0.0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
};

struct Checkpoint {
  RunConfig config;
  std::uint64_t digest = 0;
  CheckpointInfo info;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const FeedbackFormer& model, const RunConfig& config,
                     const CheckpointInfo& info);
Checkpoint load_checkpoint(const std::string& path);
/// Copies checkpoint tensors into `model`; names and shapes must match exactly.
void load_weights(FeedbackFormer& model, const Checkpoint& ckpt);
FeedbackFormer model_from_checkpoint(const Checkpoint& ckpt);

// -- evaluation -----------------------------------------------------------------

/// Confusion matrix of the final-round argmax over `indices`.
ConfusionMatrix evaluate(const FeedbackFormer& model, const std::vector<SampleTile>& tiles,
                         const std::vector<std::size_t>& indices, int batch_size = 4);
/// Per-class IoU table in class order, then mIoU.
std::string format_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);

// -- training -------------------------------------------------------------------

struct FitOptions {
  /// Directory for train_log.jsonl and best.ckpt; empty keeps everything in memory.
  std::string out_dir;
  /// Copy the best validation weights back into the model at the end.
  bool restore_best = true;
  /// Receives one line of progress per epoch.
  std::function<void(const std::string&)> progress;
};

struct FitResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_lr;
  std::int64_t steps = 0;
  double best_miou = -1.0;
  int best_epoch = -1;
  std::string log_path;
  std::string checkpoint_path;
};

/// Trains on fold.train and selects the checkpoint with the best fold.val mIoU.
FitResult fit(FeedbackFormer& model, const std::vector<SampleTile>& tiles, const Fold& fold,
              const RunConfig& cfg, const FitOptions& opts = {});

}  // namespace fbf
