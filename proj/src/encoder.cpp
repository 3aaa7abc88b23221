#include "fbformer/encoder.hpp"

#include "fbformer/profiler.hpp"

namespace fbf {

MetaFormerBlock::MetaFormerBlock(ParamStore& store, const std::string& name, int dim, int heads,
                                 int hidden)
    : norm1_(store, name + ".norm1", dim),
      norm2_(store, name + ".norm2", dim),
      qkv_(store, name + ".attn.qkv", dim, 3 * dim),
      proj_(store, name + ".attn.proj", dim, dim),
      fc1_(store, name + ".mlp.fc1", dim, hidden),
      fc2_(store, name + ".mlp.fc2", hidden, dim),
      dim_(dim),
      heads_(heads) {
  if (dim % heads != 0) {
    throw ConfigError(name + ": dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

Tensor MetaFormerBlock::operator()(const Tensor& x) const {
  if (x.ndim() != 3 || x.dim(2) != dim_) {
    throw ConfigError("metaformer block expects N x T x " + std::to_string(dim_) + " tokens, got " +
                      shape_str(x.shape()));
  }
  const Tensor qkv = qkv_(norm1_(x));
  const Tensor q = ops::slice_last(qkv, 0, dim_);
  const Tensor k = ops::slice_last(qkv, dim_, dim_);
  const Tensor v = ops::slice_last(qkv, 2 * dim_, dim_);
  const Tensor y = ops::add(x, proj_(ops::attention(q, k, v, heads_)));
  return ops::add(y, fc2_(ops::gelu(fc1_(norm2_(y)))));
}

Tensor MetaFormerBlock::attention_map(const Tensor& x) const {
  NoGradGuard no_grad;
  const Tensor qkv = qkv_(norm1_(x));
  return ops::attention_weights(ops::slice_last(qkv, 0, dim_), ops::slice_last(qkv, dim_, dim_), heads_);
}

Tensor MetaFormerBlock::forward_nchw(const Tensor& x) const {
  return ops::tokens_to_nchw((*this)(ops::nchw_to_tokens(x)), x.dim(2), x.dim(3));
}

// ---------------------------------------------------------------------------

Encoder::Encoder(ParamStore& store, const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int in = 3;
  for (int s = 0; s < 4; ++s) {
    const std::string sn = std::to_string(s + 1);
    // Stage 1: 7x7/4 pad 2; later stages: 3x3/2 pad 1.
    embeds_[s] = s == 0 ? nn::Conv2d(store, "encoder.patch_embed1", in, cfg_.dims[0], 7, 4, 2)
                        : nn::Conv2d(store, "encoder.patch_embed" + sn, in, cfg_.dims[s], 3, 2, 1);
    for (int b = 0; b < cfg_.depths[s]; ++b) {
      stages_[s].emplace_back(store, "encoder.stage" + sn + ".block" + std::to_string(b), cfg_.dims[s],
                              cfg_.heads[s], cfg_.hidden_dim(s));
    }
    in = cfg_.dims[s];
  }
}

void Encoder::check_input(const Shape& s) {
  if (s.size() != 4 || s[1] != 3) {
    throw DataError("encoder input must be N x 3 x H x W, got " + shape_str(s));
  }
  if (s[2] % 32 != 0 || s[3] % 32 != 0) {
    throw DataError("encoder input " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                    " is not a multiple of 32 in both spatial dimensions");
  }
}

Tensor Encoder::embed(const Tensor& images) const {
  check_input(images.shape());
  profiling::Scope scope("encoder.patch_embed1");
  return embeds_[0](images);
}

StageFeatures Encoder::forward_from_embedding(const Tensor& embedding) const {
  StageFeatures out;
  Tensor x = embedding;
  for (int s = 0; s < 4; ++s) {
    const std::string sn = std::to_string(s + 1);
    if (s > 0) {
      profiling::Scope scope("encoder.patch_embed" + sn);
      x = embeds_[s](x);
    }
    profiling::Scope scope("encoder.stage" + sn);
    if (!stages_[s].empty()) {
      const auto h = x.dim(2), w = x.dim(3);
      Tensor t = ops::nchw_to_tokens(x);
      for (const auto& block : stages_[s]) t = block(t);
      x = ops::tokens_to_nchw(t, h, w);
    }
    out.f[s] = x;
  }
  return out;
}

StageFeatures Encoder::encode(const Tensor& images) const { return forward_from_embedding(embed(images)); }

std::int64_t Encoder::analytic_param_count(const EncoderConfig& cfg) {
  std::int64_t total = 0;
  std::int64_t in = 3;
  for (int s = 0; s < 4; ++s) {
    const std::int64_t d = cfg.dims[s];
    const std::int64_t k = s == 0 ? 7 : 3;
    total += in * d * k * k + d;
    const std::int64_t h = cfg.hidden_dim(s);
    // two norms (4d) + qkv (3d^2 + 3d) + proj (d^2 + d) + fc1 (dh + h) + fc2 (hd + d)
    total += cfg.depths[s] * (4 * d * d + 2 * d * h + 9 * d + h);
    in = d;
  }
  return total;
}

}  // namespace fbf
