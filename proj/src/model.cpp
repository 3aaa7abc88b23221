#include "fbformer/model.hpp"

#include "fbformer/profiler.hpp"

namespace fbf {

FeedbackFormer::FeedbackFormer(const ModelConfig& cfg, bool meta) : cfg_(cfg) {
  cfg_.validate();
  InitOptions init;
  init.dtype = cfg_.dtype;
  init.meta = meta;
  store_ = std::make_unique<ParamStore>(cfg_.init_seed, init);
  encoder_ = std::make_unique<Encoder>(*store_, cfg_.encoder);
  decoder_ = std::make_unique<SemanticFpn>(*store_, cfg_.encoder.dims, cfg_.decoder, cfg_.num_classes);
  aux_ = std::make_unique<FcnAuxHead>(*store_, cfg_.encoder.dims[2], cfg_.decoder, cfg_.num_classes);
  const int p = cfg_.decoder.channels;
  const int c1 = cfg_.encoder.dims[0];
  switch (cfg_.feedback.mode) {
    case FeedbackMode::none: break;
    case FeedbackMode::lite:
      lite_ = std::make_unique<LiteFeedback>(*store_, p, c1, cfg_.decoder.groups_for(2 * p),
                                             cfg_.feedback.beta_init);
      break;
    case FeedbackMode::attn_self:
    case FeedbackMode::attn_st:
      attention_ = std::make_unique<FeedbackAttention>(*store_, cfg_.feedback.mode, 2 * p, c1,
                                                       cfg_.feedback.attn_downsample);
      break;
  }
}

RoundOutput FeedbackFormer::run_round(const Tensor& embedding, std::int64_t height,
                                      std::int64_t width, bool with_aux) const {
  RoundOutput out;
  out.features = encoder_->forward_from_embedding(embedding);
  out.pyramid = decoder_->pyramid_align(out.features);
  out.logits = decoder_->merge_predict(out.pyramid, height, width);
  if (with_aux) out.aux = (*aux_)(out.features.f[2], height, width);
  return out;
}

ForwardOutput FeedbackFormer::forward(const Tensor& images, const ForwardOptions& opts) const {
  const std::int64_t h = images.dim(2), w = images.dim(3);
  ForwardOutput out;
  out.round1 = run_round(encoder_->embed(images), h, w, opts.with_aux);
  if (!has_feedback() || opts.single_round) return out;

  out.state.round1_concat = ops::concat_channels({out.round1.pyramid.s[0], out.round1.pyramid.s[1]});
  // Round 2 starts from a fresh stage-1 embedding computed with the same weights.
  const Tensor e1 = encoder_->embed(images);
  out.state.injection = lite_ ? lite_->from_concat(out.state.round1_concat)
                              : (*attention_)(out.state.round1_concat, e1);
  if (opts.zero_injection) {
    out.state.injection = images.is_meta() ? Tensor::meta(out.state.injection.shape(), cfg_.dtype)
                                           : Tensor::zeros(out.state.injection.shape(), cfg_.dtype);
  }
  {
    profiling::Scope scope("feedback");
    out.state.gated = ops::mul_scalar(out.state.injection, gate());
  }
  out.round2 = run_round(ops::add(e1, out.state.gated), h, w, opts.with_aux);
  return out;
}

Tensor FeedbackFormer::predict(const Tensor& images) const {
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.with_aux = false;
  return forward(images, opts).final_logits();
}

const Tensor& FeedbackFormer::gate() const {
  if (lite_) return lite_->beta();
  if (attention_) return attention_->gamma();
  throw UsageError("model has no feedback module, so no gate");
}

void FeedbackFormer::set_gate(double value) {
  Tensor g = gate();
  g.set(0, value);
}

}  // namespace fbf
