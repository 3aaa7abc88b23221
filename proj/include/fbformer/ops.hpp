#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fbformer/tensor.hpp"

/// Differentiable primitives. Every op records a backward node on the active
/// Tape when any input requires a gradient, and propagates meta tensors by
/// shape only (recording MACs with the active profiling::Recorder).
namespace fbf::ops {

constexpr double kNormEps = 1e-5;

// -- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x * c for a constant c.
Tensor scale(const Tensor& x, double c);
/// x * s where s is a one-element tensor (e.g. a learnable gate).
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor relu(const Tensor& x);
/// Exact GELU: x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// -- convolution and linear maps ----------------------------------------------

enum class ConvAlgo : std::uint8_t { automatic, direct, im2col };

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
  ConvAlgo algo = ConvAlgo::automatic;
};

/// NCHW convolution. weight: C_out x (C_in/groups) x k x k. bias may be an
/// undefined Tensor. Output spatial size is floor((H + 2p - k)/s) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const Conv2dOptions& opts = {});

std::int64_t conv_out_size(std::int64_t in, int kernel, int stride, int padding);

/// y = x W^T + b over the last axis. weight: out x in.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Batched C = op(A) op(B) for rank-3 tensors (B x M x K) . (B x K x N).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);

// -- normalization and softmax --------------------------------------------------

/// Normalizes over the last axis with eps = 1e-5, then applies scale/shift.
Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// NCHW group normalization; channels must divide evenly into `groups`.
Tensor group_norm(const Tensor& x, int groups, const Tensor& weight, const Tensor& bias);
/// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& x, int axis);

/// Multi-head scaled dot-product attention.
/// q: B x Tq x d, k and v: B x Tk x d. Per head h (columns h*d/heads ..):
/// out_h = softmax(q_h k_h^T / sqrt(d/heads)) v_h.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
/// The attention matrices as B x heads x Tq x Tk (no gradient).
Tensor attention_weights(const Tensor& q, const Tensor& k, int heads);

// -- layout -------------------------------------------------------------------

/// N x C x H x W -> N x (H*W) x C.
Tensor nchw_to_tokens(const Tensor& x);
/// N x (H*W) x C -> N x C x H x W.
Tensor tokens_to_nchw(const Tensor& t, std::int64_t height, std::int64_t width);
/// Columns [start, start + len) of the last axis.
Tensor slice_last(const Tensor& x, std::int64_t start, std::int64_t len);
/// Concatenation along the channel axis of NCHW tensors.
Tensor concat_channels(const std::vector<Tensor>& parts);

// -- resampling ---------------------------------------------------------------

/// Bilinear resize with half-pixel centers (no corner alignment):
/// src = (dst + 0.5) * in/out - 0.5, clamped below at 0; neighbours are
/// floor(src) and min(floor(src) + 1, in - 1).
Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
/// Nearest-neighbour upsampling by an integer factor.
Tensor upsample_nearest(const Tensor& x, int factor);
/// Non-overlapping k x k average pooling (stride k).
Tensor avg_pool(const Tensor& x, int kernel);

// -- losses ---------------------------------------------------------------------

/// Mean over all N*H*W pixels of -log softmax(logits)[label].
/// labels are row-major N x H x W class indices.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);

/// 1 - mean_c [ sum p_c t_c / sum (p_c + t_c - p_c t_c) ] with one-hot t,
/// sums taken over every pixel of the batch. probs: N x C x H x W.
Tensor soft_iou_loss(const Tensor& probs, std::span<const std::int32_t> labels);

/// Per-pixel argmax over channels of an N x C x H x W tensor.
std::vector<std::int32_t> argmax_channels(const Tensor& x);

}  // namespace fbf::ops

namespace fbf::ops::detail {

/// Records the sign of every ReLU input seen while a monitor is active.
/// Finite-difference checks use it to skip perturbations that cross a kink.
class ReluSignMonitor {
 public:
  ReluSignMonitor();
  ~ReluSignMonitor();
  ReluSignMonitor(const ReluSignMonitor&) = delete;
  ReluSignMonitor& operator=(const ReluSignMonitor&) = delete;

  static ReluSignMonitor* active();
  void observe(bool positive) { signs_.push_back(positive); }
  const std::vector<bool>& signs() const { return signs_; }

 private:
  std::vector<bool> signs_;
  ReluSignMonitor* previous_;
};

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, const T* b, T beta, T* c);

}  // namespace fbf::ops::detail
