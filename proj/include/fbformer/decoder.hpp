#pragma once

#include <array>
#include <vector>

#include "fbformer/config.hpp"
#include "fbformer/encoder.hpp"
#include "fbformer/nn.hpp"

namespace fbf {

/// s1..s4, all `channels` x H/4 x W/4.
struct PyramidFeatures {
  std::array<Tensor, 4> s;
};

/// 3x3 conv (no bias) -> group norm -> ReLU.
class ConvNormRelu {
 public:
  ConvNormRelu() = default;
  ConvNormRelu(ParamStore& store, const std::string& conv_name, const std::string& norm_name, int in,
               int out, int groups);
  Tensor operator()(const Tensor& x) const { return ops::relu(norm_(conv_(x))); }

 private:
  nn::Conv2d conv_;
  nn::GroupNorm norm_;
};

/// Semantic FPN: lateral 1x1 projections, optional nearest-neighbour top-down
/// pathway, 3x3 output convs, then per-level scale heads that bring every level
/// to H/4. The class logits come from the sum of the four levels.
class SemanticFpn {
 public:
  SemanticFpn(ParamStore& store, const std::array<int, 4>& in_dims, const DecoderConfig& cfg,
              int num_classes);

  PyramidFeatures pyramid_align(const StageFeatures& f) const;
  /// Sum s1..s4 -> 1x1 conv to classes -> bilinear resize to out_h x out_w.
  Tensor merge_predict(const PyramidFeatures& p, std::int64_t out_h, std::int64_t out_w) const;

  /// Number of 2x upsamplings in the scale head of level `level` (0-based).
  static int upsample_count(int level) { return level; }
  int conv_count(int level) const { return static_cast<int>(scale_heads_[level].size()); }

 private:
  DecoderConfig cfg_;
  std::array<nn::Conv2d, 4> lateral_;
  std::array<nn::Conv2d, 4> fpn_;
  std::array<std::vector<ConvNormRelu>, 4> scale_heads_;
  nn::Conv2d cls_;
};

/// Training-only auxiliary classifier on stage-3 features: exactly two convs
/// (3x3 + norm + ReLU, then 1x1 to classes), resized to the input size.
class FcnAuxHead {
 public:
  FcnAuxHead(ParamStore& store, int in_dim, const DecoderConfig& cfg, int num_classes);
  Tensor operator()(const Tensor& f3, std::int64_t out_h, std::int64_t out_w) const;

 private:
  ConvNormRelu block_;
  nn::Conv2d cls_;
};

}  // namespace fbf
