#pragma once

#include "fbformer/config.hpp"
#include "fbformer/decoder.hpp"
#include "fbformer/nn.hpp"

namespace fbf {

/// What round 1 hands to round 2.
struct FeedbackState {
  /// concat(s1, s2): 2P x H/4 x W/4.
  Tensor round1_concat;
  /// Raw feedback-module output, C1 x H/4 x W/4 (before the gate).
  Tensor injection;
  /// gate * injection, the tensor actually added to the stage-1 embedding.
  Tensor gated;
};

/// e1 + gate * injection. `gate` is a one-element tensor.
Tensor inject(const Tensor& e1, const Tensor& injection, const Tensor& gate);

/// Depthwise-then-pointwise block mapping concat(s1, s2) to a stage-1 injection:
///   x = concat(s1, s2)
///   y = x + GN(dw3x3(x))
///   out = pw2(GELU(pw1(y)))          pw1: 2P -> C1, pw2: C1 -> C1
/// Scaled by a learnable beta at injection time.
class LiteFeedback {
 public:
  LiteFeedback(ParamStore& store, int pyramid_channels, int stage1_dim, int norm_groups,
               double beta_init);

  Tensor operator()(const Tensor& s1, const Tensor& s2) const;
  /// Same as operator() on an already concatenated map.
  Tensor from_concat(const Tensor& concat) const;
  const Tensor& beta() const { return beta_; }

 private:
  nn::Conv2d dw_;
  nn::GroupNorm dw_norm_;
  nn::Conv2d pw1_, pw2_;
  Tensor beta_;
  int pyramid_channels_;
};

/// Attention-based feedback baseline. Queries, keys and values are 1x1
/// projections to C1 channels, average-pooled by `downsample` before a
/// single-head attention; the result is bilinearly resized back to H/4 and
/// passed through a 1x1 output projection. A gamma gate (init 0) scales it.
///   self:          q, k, v from the feedback map
///   source-target: q from the stage-1 embedding, k, v from the feedback map
class FeedbackAttention {
 public:
  FeedbackAttention(ParamStore& store, FeedbackMode mode, int feedback_channels, int stage1_dim,
                    int downsample);

  Tensor operator()(const Tensor& concat, const Tensor& e1) const;
  /// Attention matrix, N x 1 x T x T with T = (H/4/downsample)^2.
  Tensor attention_map(const Tensor& concat, const Tensor& e1) const;
  const Tensor& gamma() const { return gamma_; }
  FeedbackMode mode() const { return mode_; }

 private:
  void check(const Tensor& concat, const Tensor& e1) const;
  Tensor pooled_tokens(const nn::Conv2d& proj, const Tensor& x) const;

  FeedbackMode mode_;
  nn::Conv2d query_, key_, value_, out_;
  Tensor gamma_;
  int downsample_;
};

}  // namespace fbf
