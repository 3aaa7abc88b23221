#include "fbformer/losses.hpp"

namespace fbf {

Tensor ce_loss(const Tensor& logits, std::span<const std::int32_t> labels) {
  return ops::cross_entropy(logits, labels);
}

Tensor iou_loss(const Tensor& probs, std::span<const std::int32_t> labels) {
  return ops::soft_iou_loss(probs, labels);
}

Tensor combine_head(const Tensor& ce, const Tensor& iou, const LossConfig& cfg) {
  return ops::add(ops::scale(ce, cfg.lambda1), ops::scale(iou, cfg.lambda2));
}

Tensor head_loss(const Tensor& logits, std::span<const std::int32_t> labels, const LossConfig& cfg) {
  const Tensor ce = ce_loss(logits, labels);
  return combine_head(ce, iou_loss(ops::softmax(logits, 1), labels), cfg);
}

Tensor combine_round(const Tensor& main, const Tensor& aux, const LossConfig& cfg) {
  return ops::add(main, ops::scale(aux, cfg.lambda3));
}

Tensor round_loss(const Tensor& main_logits, const Tensor& aux_logits,
                  std::span<const std::int32_t> labels, const LossConfig& cfg) {
  const Tensor main = head_loss(main_logits, labels, cfg);
  if (!aux_logits.defined()) {
    if (cfg.lambda3 != 0.0) throw UsageError("round_loss: auxiliary logits missing with lambda3 != 0");
    return main;
  }
  return combine_round(main, head_loss(aux_logits, labels, cfg), cfg);
}

Tensor total_loss(const Tensor& first, const Tensor& second, const LossConfig& cfg) {
  return ops::add(ops::scale(first, cfg.alpha), second);
}

LossBreakdown model_loss(const ForwardOutput& out, std::span<const std::int32_t> labels,
                         const LossConfig& loss, const FeedbackConfig& feedback) {
  LossBreakdown b;
  const bool round2_only =
      out.round2 && feedback.mode != FeedbackMode::lite && !feedback.train_both_rounds;
  if (!round2_only) b.first = round_loss(out.round1.logits, out.round1.aux, labels, loss);
  if (!out.round2) {
    b.total = b.first;
    return b;
  }
  b.second = round_loss(out.round2->logits, out.round2->aux, labels, loss);
  b.total = round2_only ? b.second : total_loss(b.first, b.second, loss);
  return b;
}

}  // namespace fbf
