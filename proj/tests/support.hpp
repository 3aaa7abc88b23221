#pragma once

// Shared helpers for the test binaries: random tensors and a finite-difference
// gradient oracle.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "fbformer/ops.hpp"
#include "fbformer/rng.hpp"
#include "fbformer/tensor.hpp"

namespace fbf::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, DType dtype = DType::f64, double scale = 1.0) {
  Tensor t = Tensor::zeros(shape, dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, scale * rng.normal());
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto va = a.to_vector(), vb = b.to_vector();
  if (va.size() != vb.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Relative error of the tape gradient of L = sum(w * f(inputs)) against
/// central differences, max over inputs of max|a - n| / max|n|. `w` is a fixed
/// random weighting so every output element matters. Perturbations that flip
/// a ReLU input sign are skipped.
inline double op_gradcheck(const OpFn& f, std::vector<Tensor> inputs, std::uint64_t seed,
                           double step = 1e-6) {
  Rng rng(seed);
  for (auto& x : inputs) x.set_requires_grad(true);
  Tensor w;
  {
    NoGradGuard no_grad;
    w = random_tensor(f(inputs).shape(), rng, inputs[0].dtype());
  }
  auto loss = [&]() { return ops::sum(ops::mul(f(inputs), w)); };
  {
    Tape tape;
    tape.backward(loss());
  }
  auto eval = [&](std::vector<bool>& signs) {
    NoGradGuard no_grad;
    ops::detail::ReluSignMonitor monitor;
    const double v = loss().item();
    signs = monitor.signs();
    return v;
  };
  std::vector<bool> base;
  eval(base);
  double worst = 0.0;
  for (auto& x : inputs) {
    const auto analytic = x.grad().to_vector();
    double max_diff = 0.0, max_num = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double orig = x.at(i);
      std::vector<bool> sp, sm;
      x.set(i, orig + step);
      const double fp = eval(sp);
      x.set(i, orig - step);
      const double fm = eval(sm);
      x.set(i, orig);
      if (sp != base || sm != base) continue;
      const double num = (fp - fm) / (2 * step);
      max_diff = std::max(max_diff, std::abs(num - analytic[i]));
      max_num = std::max(max_num, std::abs(num));
    }
    worst = std::max(worst, max_diff / std::max(max_num, 1e-12));
  }
  return worst;
}

struct GradCase {
  const char* name;
  OpFn fn;
  std::vector<Tensor> inputs;
};

/// One small 64-bit case per differentiable primitive.
inline std::vector<GradCase> primitive_cases(Rng& rng) {
  auto r = [&](const Shape& s) { return random_tensor(s, rng); };
  const std::vector<std::int32_t> labels = {0, 2, 1, 1, 2, 0, 0, 1, 2, 2, 1, 0, 1, 1, 0, 2,
                                            2, 2, 0, 1, 0, 1, 2, 0, 1, 0, 2, 2, 1, 0, 0, 1};
  return {
      {"add", [](auto& v) { return ops::add(v[0], v[1]); }, {r({2, 3}), r({2, 3})}},
      {"sub", [](auto& v) { return ops::sub(v[0], v[1]); }, {r({2, 3}), r({2, 3})}},
      {"mul", [](auto& v) { return ops::mul(v[0], v[1]); }, {r({2, 3}), r({2, 3})}},
      {"scale", [](auto& v) { return ops::scale(v[0], -1.7); }, {r({5})}},
      {"mul_scalar", [](auto& v) { return ops::mul_scalar(v[0], v[1]); }, {r({2, 4}), r({1})}},
      {"relu", [](auto& v) { return ops::relu(v[0]); }, {r({3, 4})}},
      {"gelu", [](auto& v) { return ops::gelu(v[0]); }, {r({3, 4})}},
      {"mean", [](auto& v) { return ops::mean(v[0]); }, {r({3, 4})}},
      {"conv2d", [](auto& v) { return ops::conv2d(v[0], v[1], v[2], {1, 1, 1}); },
       {r({2, 3, 5, 5}), r({4, 3, 3, 3}), r({4})}},
      {"conv2d_stride_direct", [](auto& v) { return ops::conv2d(v[0], v[1], v[2], {2, 2, 1, ops::ConvAlgo::direct}); },
       {r({1, 2, 7, 6}), r({3, 2, 5, 5}), r({3})}},
      {"conv2d_depthwise", [](auto& v) { return ops::conv2d(v[0], v[1], Tensor{}, {1, 1, 4}); },
       {r({1, 4, 4, 4}), r({4, 1, 3, 3})}},
      {"conv2d_grouped_im2col", [](auto& v) { return ops::conv2d(v[0], v[1], v[2], {1, 0, 2, ops::ConvAlgo::im2col}); },
       {r({1, 4, 3, 3}), r({6, 2, 2, 2}), r({6})}},
      {"linear", [](auto& v) { return ops::linear(v[0], v[1], v[2]); }, {r({2, 3, 5}), r({4, 5}), r({4})}},
      {"matmul", [](auto& v) { return ops::matmul(v[0], v[1]); }, {r({2, 3, 4}), r({2, 4, 5})}},
      {"matmul_tt", [](auto& v) { return ops::matmul(v[0], v[1], true, true); }, {r({2, 4, 3}), r({2, 5, 4})}},
      {"layer_norm", [](auto& v) { return ops::layer_norm(v[0], v[1], v[2]); }, {r({3, 6}), r({6}), r({6})}},
      {"group_norm", [](auto& v) { return ops::group_norm(v[0], 2, v[1], v[2]); }, {r({2, 4, 3, 3}), r({4}), r({4})}},
      {"softmax_axis1", [](auto& v) { return ops::softmax(v[0], 1); }, {r({2, 3, 2, 2})}},
      {"softmax_last", [](auto& v) { return ops::softmax(v[0], -1); }, {r({3, 5})}},
      {"attention", [](auto& v) { return ops::attention(v[0], v[1], v[2], 2); }, {r({1, 4, 6}), r({1, 5, 6}), r({1, 5, 6})}},
      {"nchw_to_tokens", [](auto& v) { return ops::nchw_to_tokens(v[0]); }, {r({2, 3, 2, 4})}},
      {"tokens_to_nchw", [](auto& v) { return ops::tokens_to_nchw(v[0], 2, 3); }, {r({2, 6, 4})}},
      {"slice_last", [](auto& v) { return ops::slice_last(v[0], 2, 3); }, {r({2, 3, 7})}},
      {"concat_channels", [](auto& v) { return ops::concat_channels({v[0], v[1]}); }, {r({2, 2, 3, 3}), r({2, 3, 3, 3})}},
      {"resize_up", [](auto& v) { return ops::resize_bilinear(v[0], 7, 9); }, {r({1, 2, 3, 4})}},
      {"resize_down", [](auto& v) { return ops::resize_bilinear(v[0], 3, 2); }, {r({1, 2, 7, 5})}},
      {"upsample_nearest", [](auto& v) { return ops::upsample_nearest(v[0], 2); }, {r({1, 2, 3, 3})}},
      {"avg_pool", [](auto& v) { return ops::avg_pool(v[0], 2); }, {r({1, 2, 4, 6})}},
      {"cross_entropy", [labels](auto& v) { return ops::cross_entropy(v[0], labels); }, {r({2, 3, 4, 4})}},
      {"soft_iou", [labels](auto& v) { return ops::soft_iou_loss(ops::softmax(v[0], 1), labels); }, {r({2, 3, 4, 4})}},
  };
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fbf_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

/// Direct sliding-window convolution of one NCHW tensor (no autodiff).
inline std::vector<double> naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                                        int pad, int groups) {
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout = w.dim(0), k = w.dim(2);
  const auto ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const auto cin_g = cin / groups, cout_g = cout / groups;
  std::vector<double> out(static_cast<std::size_t>(n * cout * ho * wo));
  for (std::int64_t bi = 0; bi < n; ++bi)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double acc = b.defined() ? b.at(co) : 0.0;
          const auto g = co / cout_g;
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const auto iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                acc += x.at(((bi * cin + g * cin_g + ci) * h + iy) * wd + ix) *
                       w.at(((co * cin_g + ci) * k + ky) * k + kx);
              }
          out[static_cast<std::size_t>(((bi * cout + co) * ho + oy) * wo + ox)] = acc;
        }
  return out;
}

}  // namespace fbf::testing
