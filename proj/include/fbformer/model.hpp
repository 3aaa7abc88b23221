#pragma once

#include <memory>
#include <optional>

#include "fbformer/config.hpp"
#include "fbformer/decoder.hpp"
#include "fbformer/encoder.hpp"
#include "fbformer/feedback.hpp"
#include "fbformer/nn.hpp"

namespace fbf {

struct RoundOutput {
  StageFeatures features;
  PyramidFeatures pyramid;
  /// N x classes x H x W.
  Tensor logits;
  /// Auxiliary-head logits; undefined when the head was not evaluated.
  Tensor aux;
};

struct ForwardOptions {
  /// Evaluate the auxiliary head (training only).
  bool with_aux = true;
  /// Run round 2 with the injection replaced by zeros.
  bool zero_injection = false;
  /// Stop after round 1 even when a feedback module is configured.
  bool single_round = false;
};

struct ForwardOutput {
  RoundOutput round1;
  /// Present when a second round ran.
  std::optional<RoundOutput> round2;
  FeedbackState state;

  /// The model's prediction: round 2 when it ran, round 1 otherwise.
  const Tensor& final_logits() const { return round2 ? round2->logits : round1.logits; }
};

/// MetaFormer encoder + semantic FPN decoder + stage-3 auxiliary head, with an
/// optional feedback module that turns round-1 decoder features into an
/// injection for a second pass through the same weights.
class FeedbackFormer {
 public:
  /// `meta` builds shape-only parameters for profiling.
  explicit FeedbackFormer(const ModelConfig& cfg, bool meta = false);

  FeedbackFormer(FeedbackFormer&&) = default;
  FeedbackFormer& operator=(FeedbackFormer&&) = default;

  ForwardOutput forward(const Tensor& images, const ForwardOptions& opts = {}) const;
  /// One encoder + decoder pass from a stage-1 embedding.
  RoundOutput run_round(const Tensor& embedding, std::int64_t height, std::int64_t width,
                        bool with_aux) const;
  /// Final logits without the auxiliary head and without recording a tape.
  Tensor predict(const Tensor& images) const;

  bool has_feedback() const { return cfg_.feedback.mode != FeedbackMode::none; }
  /// beta (lite) or gamma (attention); UsageError without a feedback module.
  const Tensor& gate() const;
  void set_gate(double value);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  const Encoder& encoder() const { return *encoder_; }
  const SemanticFpn& decoder() const { return *decoder_; }
  const LiteFeedback* lite() const { return lite_.get(); }
  const FeedbackAttention* attention() const { return attention_.get(); }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParamStore> store_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<SemanticFpn> decoder_;
  std::unique_ptr<FcnAuxHead> aux_;
  std::unique_ptr<LiteFeedback> lite_;
  std::unique_ptr<FeedbackAttention> attention_;
};

}  // namespace fbf
