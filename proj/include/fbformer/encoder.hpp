#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fbformer/config.hpp"
#include "fbformer/nn.hpp"

namespace fbf {

/// Encoder outputs f1..f4 at H/4, H/8, H/16 and H/32.
struct StageFeatures {
  std::array<Tensor, 4> f;
};

/// Pre-norm MetaFormer block with a global multi-head self-attention token
/// mixer, operating on N x T x C token tensors:
///   y = x + Attn(LN(x)),  z = y + MLP(LN(y)).
class MetaFormerBlock {
 public:
  MetaFormerBlock(ParamStore& store, const std::string& name, int dim, int heads, int hidden);

  Tensor operator()(const Tensor& tokens) const;
  /// Attention matrices of the token mixer, N x heads x T x T.
  Tensor attention_map(const Tensor& tokens) const;
  /// Convenience wrapper for an N x C x h x w feature map.
  Tensor forward_nchw(const Tensor& x) const;

 private:
  nn::LayerNorm norm1_, norm2_;
  nn::Linear qkv_, proj_, fc1_, fc2_;
  int dim_;
  int heads_;
};

class Encoder {
 public:
  Encoder(ParamStore& store, const EncoderConfig& cfg);

  /// Throws DataError unless images are N x 3 x H x W with H, W multiples of 32.
  static void check_input(const Shape& images);

  /// Stage-1 patch embedding (7x7, stride 4, padding 2): N x dims[0] x H/4 x W/4.
  Tensor embed(const Tensor& images) const;
  /// Runs the four stages starting from a (possibly modified) stage-1 embedding.
  StageFeatures forward_from_embedding(const Tensor& embedding) const;
  StageFeatures encode(const Tensor& images) const;

  const EncoderConfig& config() const { return cfg_; }
  const MetaFormerBlock& block(int stage, int index) const { return stages_[stage][index]; }

  /// Closed-form parameter count of an encoder with this configuration.
  static std::int64_t analytic_param_count(const EncoderConfig& cfg);

 private:
  EncoderConfig cfg_;
  std::array<nn::Conv2d, 4> embeds_;
  std::array<std::vector<MetaFormerBlock>, 4> stages_;
};

}  // namespace fbf
