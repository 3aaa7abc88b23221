#include "fbformer/feedback.hpp"

#include "fbformer/profiler.hpp"

namespace fbf {

Tensor inject(const Tensor& e1, const Tensor& injection, const Tensor& gate) {
  if (e1.shape() != injection.shape()) {
    throw ConfigError("inject: embedding " + shape_str(e1.shape()) + " and injection " +
                      shape_str(injection.shape()) + " differ in shape");
  }
  return ops::add(e1, ops::mul_scalar(injection, gate));
}

LiteFeedback::LiteFeedback(ParamStore& store, int pyramid_channels, int stage1_dim, int norm_groups,
                           double beta_init)
    : dw_(store, "feedback.dw", 2 * pyramid_channels, 2 * pyramid_channels, 3, 1, 1,
          2 * pyramid_channels, /*bias=*/false),
      dw_norm_(store, "feedback.dw_norm", norm_groups, 2 * pyramid_channels),
      pw1_(store, "feedback.pw1", 2 * pyramid_channels, stage1_dim, 1),
      pw2_(store, "feedback.pw2", stage1_dim, stage1_dim, 1),
      beta_(store.constant("feedback.beta", {1}, beta_init)),
      pyramid_channels_(pyramid_channels) {}

Tensor LiteFeedback::operator()(const Tensor& s1, const Tensor& s2) const {
  if (s1.shape() != s2.shape()) {
    throw ConfigError("lite_feedback: s1 " + shape_str(s1.shape()) + " and s2 " +
                      shape_str(s2.shape()) + " differ in shape");
  }
  return from_concat(ops::concat_channels({s1, s2}));
}

Tensor LiteFeedback::from_concat(const Tensor& x) const {
  if (x.ndim() != 4 || x.dim(1) != 2 * pyramid_channels_) {
    throw ConfigError("lite_feedback expects N x " + std::to_string(2 * pyramid_channels_) +
                      " x H x W, got " + shape_str(x.shape()));
  }
  profiling::Scope scope("feedback");
  const Tensor y = ops::add(x, dw_norm_(dw_(x)));
  return pw2_(ops::gelu(pw1_(y)));
}

// ---------------------------------------------------------------------------

FeedbackAttention::FeedbackAttention(ParamStore& store, FeedbackMode mode, int feedback_channels,
                                     int stage1_dim, int downsample)
    : mode_(mode), downsample_(downsample) {
  if (mode != FeedbackMode::attn_self && mode != FeedbackMode::attn_st) {
    throw ConfigError(std::string("feedback attention needs mode attn_self or attn_st, got ") +
                      to_string(mode));
  }
  if (downsample < 1) throw ConfigError("feedback.attn_downsample must be >= 1");
  const int q_in = mode == FeedbackMode::attn_self ? feedback_channels : stage1_dim;
  query_ = nn::Conv2d(store, "feedback.query", q_in, stage1_dim, 1);
  key_ = nn::Conv2d(store, "feedback.key", feedback_channels, stage1_dim, 1);
  value_ = nn::Conv2d(store, "feedback.value", feedback_channels, stage1_dim, 1);
  out_ = nn::Conv2d(store, "feedback.out", stage1_dim, stage1_dim, 1);
  gamma_ = store.constant("feedback.gamma", {1}, 0.0);
}

void FeedbackAttention::check(const Tensor& concat, const Tensor& e1) const {
  if (concat.ndim() != 4 || e1.ndim() != 4 || concat.dim(0) != e1.dim(0) ||
      concat.dim(2) != e1.dim(2) || concat.dim(3) != e1.dim(3)) {
    throw ConfigError("feedback attention: feedback map " + shape_str(concat.shape()) +
                      " does not match stage-1 features " + shape_str(e1.shape()));
  }
  if (concat.dim(2) % downsample_ != 0 || concat.dim(3) % downsample_ != 0) {
    throw ConfigError("feedback attention: downsample " + std::to_string(downsample_) +
                      " does not divide " + std::to_string(concat.dim(2)) + "x" +
                      std::to_string(concat.dim(3)));
  }
}

Tensor FeedbackAttention::pooled_tokens(const nn::Conv2d& proj, const Tensor& x) const {
  Tensor y = proj(x);
  if (downsample_ > 1) y = ops::avg_pool(y, downsample_);
  return ops::nchw_to_tokens(y);
}

Tensor FeedbackAttention::operator()(const Tensor& concat, const Tensor& e1) const {
  check(concat, e1);
  profiling::Scope scope("feedback");
  const Tensor q = pooled_tokens(query_, mode_ == FeedbackMode::attn_self ? concat : e1);
  const Tensor k = pooled_tokens(key_, concat);
  const Tensor v = pooled_tokens(value_, concat);
  const auto h = concat.dim(2) / downsample_, w = concat.dim(3) / downsample_;
  Tensor y = ops::tokens_to_nchw(ops::attention(q, k, v, 1), h, w);
  if (downsample_ > 1) y = ops::resize_bilinear(y, concat.dim(2), concat.dim(3));
  return out_(y);
}

Tensor FeedbackAttention::attention_map(const Tensor& concat, const Tensor& e1) const {
  check(concat, e1);
  NoGradGuard no_grad;
  const Tensor q = pooled_tokens(query_, mode_ == FeedbackMode::attn_self ? concat : e1);
  return ops::attention_weights(q, pooled_tokens(key_, concat), 1);
}

}  // namespace fbf
