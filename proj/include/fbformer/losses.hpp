#pragma once

#include <cstdint>
#include <span>

#include "fbformer/config.hpp"
#include "fbformer/model.hpp"

namespace fbf {

/// Mean per-pixel cross entropy. Labels are N x H x W, row-major.
Tensor ce_loss(const Tensor& logits, std::span<const std::int32_t> labels);
/// Soft IoU loss on softmax probabilities (see ops::soft_iou_loss).
Tensor iou_loss(const Tensor& probs, std::span<const std::int32_t> labels);

/// lambda1 * ce + lambda2 * iou.
Tensor combine_head(const Tensor& ce, const Tensor& iou, const LossConfig& cfg);
/// lambda1 * CE(logits) + lambda2 * IoU(softmax(logits)).
Tensor head_loss(const Tensor& logits, std::span<const std::int32_t> labels, const LossConfig& cfg);
/// main + lambda3 * aux.
Tensor combine_round(const Tensor& main, const Tensor& aux, const LossConfig& cfg);
/// head_loss(main) + lambda3 * head_loss(aux). An undefined `aux` is allowed only when lambda3 = 0.
Tensor round_loss(const Tensor& main_logits, const Tensor& aux_logits,
                  std::span<const std::int32_t> labels, const LossConfig& cfg);
/// alpha * first + second.
Tensor total_loss(const Tensor& first, const Tensor& second, const LossConfig& cfg);

struct LossBreakdown {
  Tensor total;
  Tensor first;
  /// Undefined for single-round models.
  Tensor second;
};

/// Training objective for a forward pass. Single-round models use the round
/// loss directly. Two-round models use total_loss, except attention baselines
/// with train_both_rounds = false, which train on the round-2 loss alone.
LossBreakdown model_loss(const ForwardOutput& out, std::span<const std::int32_t> labels,
                         const LossConfig& loss, const FeedbackConfig& feedback);

}  // namespace fbf
