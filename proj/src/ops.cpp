#include "fbformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>

#include "fbformer/profiler.hpp"

namespace fbf::ops {

namespace {

using profiling::MacKind;

void check_same_dtype(std::initializer_list<const Tensor*> ts, const char* op) {
  const Tensor* first = nullptr;
  for (const auto* t : ts) {
    if (!t->defined()) continue;
    if (!first) {
      first = t;
    } else if (t->dtype() != first->dtype()) {
      throw ConfigError(std::string(op) + ": mixed dtypes " + to_string(first->dtype()) + " and " +
                        to_string(t->dtype()));
    }
  }
}

bool any_meta(std::initializer_list<const Tensor*> ts) {
  for (const auto* t : ts)
    if (t->defined() && t->is_meta()) return true;
  return false;
}

Tensor make_output(const Shape& shape, DType dtype, std::initializer_list<const Tensor*> inputs) {
  if (any_meta(inputs)) return Tensor::meta(shape, dtype);
  Tensor out = Tensor::zeros(shape, dtype);
  if (Tape::active()) {
    for (const auto* t : inputs) {
      if (t->defined() && t->requires_grad()) {
        out.set_requires_grad(true);
        break;
      }
    }
  }
  return out;
}

void record(const char* op, const Tensor& out, std::initializer_list<const Tensor*> inputs,
            std::function<void()> fn) {
  Tape::Node node;
  node.op = op;
  for (const auto* t : inputs)
    if (t->defined()) node.inputs.push_back(t->impl());
  node.output = out.impl();
  node.backward = std::move(fn);
  Tape::active()->record(std::move(node));
}

template <class T>
std::span<T> grad_of(const Tensor& t) {
  return t.impl()->grads<T>();
}

template <class T>
std::span<const T> cdata(const Tensor& t) {
  return t.data<T>();
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// gemm

namespace detail {

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, const T* b, T beta, T* c) {
  if (beta == T(0)) {
    std::fill(c, c + m * n, T(0));
  } else if (beta != T(1)) {
    for (std::int64_t i = 0; i < m * n; ++i) c[i] *= beta;
  }
  const T* bp = b;
  std::vector<T> bt;
  if (trans_b) {
    bt.resize(static_cast<std::size_t>(k * n));
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    bp = bt.data();
  }
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = alpha * (trans_a ? a[p * m + i] : a[i * k + p]);
      if (av == T(0)) continue;
      const T* brow = bp + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void gemm<float>(bool, bool, std::int64_t, std::int64_t, std::int64_t, float,
                          const float*, const float*, float, float*);
template void gemm<double>(bool, bool, std::int64_t, std::int64_t, std::int64_t, double,
                           const double*, const double*, double, double*);

namespace {
thread_local ReluSignMonitor* g_relu_monitor = nullptr;
}

ReluSignMonitor::ReluSignMonitor() : previous_(g_relu_monitor) { g_relu_monitor = this; }
ReluSignMonitor::~ReluSignMonitor() { g_relu_monitor = previous_; }
ReluSignMonitor* ReluSignMonitor::active() { return g_relu_monitor; }

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

namespace {

template <class Fwd, class Bwd>
Tensor binary_same_shape(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  check_same_dtype({&a, &b}, name);
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  Tensor out = make_output(a.shape(), a.dtype(), {&a, &b});
  if (out.is_meta()) return out;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xa = cdata<T>(a);
    auto xb = cdata<T>(b);
    auto y = out.data<T>();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xa[i], xb[i]);
  });
  if (out.requires_grad()) {
    record(name, out, {&a, &b}, [a, b, out, bwd]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gy = grad_of<T>(out);
        auto xa = cdata<T>(a);
        auto xb = cdata<T>(b);
        std::span<T> ga, gb;
        if (a.requires_grad()) ga = grad_of<T>(a);
        if (b.requires_grad()) gb = grad_of<T>(b);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          T da, db;
          bwd(xa[i], xb[i], gy[i], da, db);
          if (!ga.empty()) ga[i] += da;
          if (!gb.empty()) gb[i] += db;
        }
      });
    });
  }
  return out;
}

template <class Fwd, class Bwd>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
  Tensor out = make_output(x.shape(), x.dtype(), {&x});
  if (out.is_meta()) return out;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = cdata<T>(x);
    auto y = out.data<T>();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xs[i]);
  });
  if (out.requires_grad()) {
    record(name, out, {&x}, [x, out, bwd]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gy = grad_of<T>(out);
        auto xs = cdata<T>(x);
        auto gx = grad_of<T>(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * bwd(xs[i]);
      });
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "add", a, b, [](auto x, auto y) { return x + y; },
      [](auto, auto, auto g, auto& da, auto& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "sub", a, b, [](auto x, auto y) { return x - y; },
      [](auto, auto, auto g, auto& da, auto& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "mul", a, b, [](auto x, auto y) { return x * y; },
      [](auto x, auto y, auto g, auto& da, auto& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor scale(const Tensor& x, double c) {
  return unary(
      "scale", x, [c](auto v) { return static_cast<decltype(v)>(v * c); },
      [c](auto v) { return static_cast<decltype(v)>(c); });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  check_same_dtype({&x, &s}, "mul_scalar");
  require(s.numel() == 1, "mul_scalar: gate must have one element, got " + shape_str(s.shape()));
  profiling::record_touch(s);
  Tensor out = make_output(x.shape(), x.dtype(), {&x, &s});
  if (out.is_meta()) return out;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = cdata<T>(x);
    const T sv = cdata<T>(s)[0];
    auto y = out.data<T>();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] * sv;
  });
  if (out.requires_grad()) {
    record("mul_scalar", out, {&x, &s}, [x, s, out]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gy = grad_of<T>(out);
        auto xs = cdata<T>(x);
        const T sv = cdata<T>(s)[0];
        if (x.requires_grad()) {
          auto gx = grad_of<T>(x);
          for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * sv;
        }
        if (s.requires_grad()) {
          T acc = 0;
          for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * xs[i];
          grad_of<T>(s)[0] += acc;
        }
      });
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  if (auto* mon = detail::ReluSignMonitor::active(); mon && !x.is_meta()) {
    for (double v : x.to_vector()) mon->observe(v > 0);
  }
  return unary(
      "relu", x, [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto v) { return v > 0 ? decltype(v)(1) : decltype(v)(0); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      [](auto v) {
        using T = decltype(v);
        return static_cast<T>(0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
      },
      [](auto v) {
        using T = decltype(v);
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * double(v) * v) / std::sqrt(2.0 * std::numbers::pi);
        return static_cast<T>(cdf + v * pdf);
      });
}

Tensor sum(const Tensor& x) {
  Tensor out = make_output({1}, x.dtype(), {&x});
  if (out.is_meta()) return out;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T acc = 0;
    for (T v : cdata<T>(x)) acc += v;
    out.data<T>()[0] = acc;
  });
  if (out.requires_grad()) {
    record("sum", out, {&x}, [x, out]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T g = grad_of<T>(out)[0];
        for (auto& v : grad_of<T>(x)) v += g;
      });
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// conv2d

std::int64_t conv_out_size(std::int64_t in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, k, ho, wo, groups, cin_g, cout_g;
  int stride, pad;
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  // col: (cin_g * k * k) x (ho * wo)
  const std::int64_t hw = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.cin_g; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            row[oy * g.wo + ox] =
                (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? x[(c * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const std::int64_t hw = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.cin_g; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dx[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <class T>
void conv_forward_im2col(const T* x, const T* w, const T* b, const ConvGeom& g, T* y) {
  const std::int64_t hw = g.ho * g.wo;
  const std::int64_t kk = g.cin_g * g.k * g.k;
  std::vector<T> col(is_pointwise(g) ? 0 : static_cast<std::size_t>(kk * hw));
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t gr = 0; gr < g.groups; ++gr) {
      const T* xs = x + (n * g.cin + gr * g.cin_g) * g.h * g.w;
      const T* cp = xs;
      if (!is_pointwise(g)) {
        im2col(xs, g, col.data());
        cp = col.data();
      }
      T* ys = y + (n * g.cout + gr * g.cout_g) * hw;
      detail::gemm<T>(false, false, g.cout_g, hw, kk, T(1), w + gr * g.cout_g * kk, cp, T(0), ys);
      if (b) {
        for (std::int64_t co = 0; co < g.cout_g; ++co) {
          const T bv = b[gr * g.cout_g + co];
          for (std::int64_t i = 0; i < hw; ++i) ys[co * hw + i] += bv;
        }
      }
    }
}

template <class T>
void conv_backward_im2col(const T* x, const T* w, const T* gy, const ConvGeom& g, T* gx, T* gw) {
  const std::int64_t hw = g.ho * g.wo;
  const std::int64_t kk = g.cin_g * g.k * g.k;
  std::vector<T> col(static_cast<std::size_t>(kk * hw));
  std::vector<T> dcol(gx ? static_cast<std::size_t>(kk * hw) : 0);
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t gr = 0; gr < g.groups; ++gr) {
      const T* xs = x + (n * g.cin + gr * g.cin_g) * g.h * g.w;
      const T* gys = gy + (n * g.cout + gr * g.cout_g) * hw;
      const T* wg = w + gr * g.cout_g * kk;
      if (gw) {
        const T* cp = xs;
        if (!is_pointwise(g)) {
          im2col(xs, g, col.data());
          cp = col.data();
        }
        detail::gemm<T>(false, true, g.cout_g, kk, hw, T(1), gys, cp, T(1), gw + gr * g.cout_g * kk);
      }
      if (gx) {
        T* gxs = gx + (n * g.cin + gr * g.cin_g) * g.h * g.w;
        if (is_pointwise(g)) {
          detail::gemm<T>(true, false, kk, hw, g.cout_g, T(1), wg, gys, T(1), gxs);
        } else {
          detail::gemm<T>(true, false, kk, hw, g.cout_g, T(1), wg, gys, T(0), dcol.data());
          col2im_add(dcol.data(), g, gxs);
        }
      }
    }
}

template <class T>
void conv_forward_direct(const T* x, const T* w, const T* b, const ConvGeom& g, T* y) {
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t co = 0; co < g.cout; ++co) {
      const std::int64_t gr = co / g.cout_g;
      for (std::int64_t oy = 0; oy < g.ho; ++oy)
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          T acc = b ? b[co] : T(0);
          for (std::int64_t cl = 0; cl < g.cin_g; ++cl) {
            const std::int64_t ci = gr * g.cin_g + cl;
            for (std::int64_t ky = 0; ky < g.k; ++ky) {
              const std::int64_t iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (std::int64_t kx = 0; kx < g.k; ++kx) {
                const std::int64_t ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                acc += w[((co * g.cin_g + cl) * g.k + ky) * g.k + kx] *
                       x[((n * g.cin + ci) * g.h + iy) * g.w + ix];
              }
            }
          }
          y[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
        }
    }
}

template <class T>
void conv_backward_direct(const T* x, const T* w, const T* gy, const ConvGeom& g, T* gx, T* gw) {
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t co = 0; co < g.cout; ++co) {
      const std::int64_t gr = co / g.cout_g;
      for (std::int64_t oy = 0; oy < g.ho; ++oy)
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          const T d = gy[((n * g.cout + co) * g.ho + oy) * g.wo + ox];
          if (d == T(0)) continue;
          for (std::int64_t cl = 0; cl < g.cin_g; ++cl) {
            const std::int64_t ci = gr * g.cin_g + cl;
            for (std::int64_t ky = 0; ky < g.k; ++ky) {
              const std::int64_t iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (std::int64_t kx = 0; kx < g.k; ++kx) {
                const std::int64_t ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                const std::int64_t wi = ((co * g.cin_g + cl) * g.k + ky) * g.k + kx;
                const std::int64_t xi = ((n * g.cin + ci) * g.h + iy) * g.w + ix;
                if (gw) gw[wi] += d * x[xi];
                if (gx) gx[xi] += d * w[wi];
              }
            }
          }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const Conv2dOptions& opts) {
  check_same_dtype({&input, &weight, &bias}, "conv2d");
  require(input.ndim() == 4, "conv2d: input must be N x C x H x W, got " + shape_str(input.shape()));
  require(weight.ndim() == 4 && weight.dim(2) == weight.dim(3),
          "conv2d: weight must be C_out x C_in/g x k x k, got " + shape_str(weight.shape()));
  require(opts.groups >= 1 && opts.stride >= 1 && opts.padding >= 0,
          "conv2d: invalid stride/padding/groups");
  ConvGeom g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.groups = opts.groups;
  g.stride = opts.stride;
  g.pad = opts.padding;
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError("conv2d: channels (in " + std::to_string(g.cin) + ", out " +
                      std::to_string(g.cout) + ") not divisible by groups " +
                      std::to_string(g.groups));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (weight.dim(1) != g.cin_g) {
    throw ConfigError("conv2d: weight " + shape_str(weight.shape()) + " expects " +
                      std::to_string(weight.dim(1)) + " input channels per group, input has " +
                      std::to_string(g.cin_g) + " (C_in " + std::to_string(g.cin) + ", groups " +
                      std::to_string(g.groups) + ")");
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.cout)) {
    throw ConfigError("conv2d: bias " + shape_str(bias.shape()) + " does not match C_out " +
                      std::to_string(g.cout));
  }
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw ConfigError("conv2d: kernel " + std::to_string(g.k) + " larger than padded input " +
                      shape_str(input.shape()) + " with padding " + std::to_string(g.pad));
  }
  g.ho = conv_out_size(g.h, static_cast<int>(g.k), g.stride, g.pad);
  g.wo = conv_out_size(g.w, static_cast<int>(g.k), g.stride, g.pad);

  profiling::record_touch(weight);
  profiling::record_touch(bias);
  profiling::record_macs(MacKind::conv, g.n * g.cout * g.cin_g * g.k * g.k * g.ho * g.wo);
  if (bias.defined()) profiling::record_macs(MacKind::bias, g.n * g.cout * g.ho * g.wo);

  Tensor out = make_output({g.n, g.cout, g.ho, g.wo}, input.dtype(), {&input, &weight, &bias});
  if (out.is_meta()) return out;

  ConvAlgo algo = opts.algo;
  if (algo == ConvAlgo::automatic) algo = g.cin_g == 1 && g.groups > 1 ? ConvAlgo::direct : ConvAlgo::im2col;

  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* b = bias.defined() ? cdata<T>(bias).data() : nullptr;
    if (algo == ConvAlgo::direct) {
      conv_forward_direct(cdata<T>(input).data(), cdata<T>(weight).data(), b, g, out.data<T>().data());
    } else {
      conv_forward_im2col(cdata<T>(input).data(), cdata<T>(weight).data(), b, g, out.data<T>().data());
    }
  });

  if (out.requires_grad()) {
    record("conv2d", out, {&input, &weight, &bias}, [input, weight, bias, out, g, algo]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gy = grad_of<T>(out);
        T* gx = input.requires_grad() ? grad_of<T>(input).data() : nullptr;
        T* gw = weight.requires_grad() ? grad_of<T>(weight).data() : nullptr;
        if (algo == ConvAlgo::direct) {
          conv_backward_direct(cdata<T>(input).data(), cdata<T>(weight).data(), gy.data(), g, gx, gw);
        } else {
          conv_backward_im2col(cdata<T>(input).data(), cdata<T>(weight).data(), gy.data(), g, gx, gw);
        }
        if (bias.defined() && bias.requires_grad()) {
          auto gb = grad_of<T>(bias);
          const std::int64_t hw = g.ho * g.wo;
          for (std::int64_t n = 0; n < g.n; ++n)
            for (std::int64_t c = 0; c < g.cout; ++c) {
              T acc = 0;
              const T* row = gy.data() + (n * g.cout + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i) acc += row[i];
              gb[c] += acc;
            }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear / matmul

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_same_dtype({&x, &weight, &bias}, "linear");
  require(weight.ndim() == 2, "linear: weight must be out x in, got " + shape_str(weight.shape()));
  const std::int64_t in = weight.dim(1);
  const std::int64_t outf = weight.dim(0);
  require(x.ndim() >= 1 && x.dim(-1) == in,
          "linear: input " + shape_str(x.shape()) + " does not end in " + std::to_string(in));
  if (bias.defined()) {
    require(bias.ndim() == 1 && bias.dim(0) == outf,
            "linear: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(outf));
  }
  const std::int64_t rows = x.numel() / in;
  Shape oshape = x.shape();
  oshape.back() = outf;

  profiling::record_touch(weight);
  profiling::record_touch(bias);
  profiling::record_macs(MacKind::linear, rows * in * outf);
  if (bias.defined()) profiling::record_macs(MacKind::bias, rows * outf);

  Tensor out = make_output(oshape, x.dtype(), {&x, &weight, &bias});
  if (out.is_meta()) return out;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* y = out.data<T>().data();
    detail::gemm<T>(false, true, rows, outf, in, T(1), cdata<T>(x).data(), cdata<T>(weight).data(),
                    T(0), y);
    if (bias.defined()) {
      auto b = cdata<T>(bias);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < outf; ++j) y[r * outf + j] += b[j];
    }
  });
  if (out.requires_grad()) {
    record("linear", out, {&x, &weight, &bias}, [x, weight, bias, out, rows, in, outf]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* gy = grad_of<T>(out).data();
        if (x.requires_grad()) {
          detail::gemm<T>(false, false, rows, in, outf, T(1), gy, cdata<T>(weight).data(), T(1),
                          grad_of<T>(x).data());
        }
        if (weight.requires_grad()) {
          detail::gemm<T>(true, false, outf, in, rows, T(1), gy, cdata<T>(x).data(), T(1),
                          grad_of<T>(weight).data());
        }
        if (bias.defined() && bias.requires_grad()) {
          auto gb = grad_of<T>(bias);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < outf; ++j) gb[j] += gy[r * outf + j];
        }
      });
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  check_same_dtype({&a, &b}, "matmul");
  require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0),
          "matmul: expected batched rank-3 operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  const std::int64_t batch = a.dim(0);
  const std::int64_t m = ta ? a.dim(2) : a.dim(1);
  const std::int64_t k = ta ? a.dim(1) : a.dim(2);
  const std::int64_t kb = tb ? b.dim(2) : b.dim(1);
  const std::int64_t n = tb ? b.dim(1) : b.dim(2);
  require(k == kb, "matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                       std::to_string(kb) + ")");
  profiling::record_macs(MacKind::attention_matmul, batch * m * n * k);
  Tensor out = make_output({batch, m, n}, a.dtype(), {&a, &b});
  if (out.is_meta()) return out;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (std::int64_t i = 0; i < batch; ++i) {
      detail::gemm<T>(ta, tb, m, n, k, T(1), cdata<T>(a).data() + i * m * k,
                      cdata<T>(b).data() + i * k * n, T(0), out.data<T>().data() + i * m * n);
    }
  });
  if (out.requires_grad()) {
    record("matmul", out, {&a, &b}, [a, b, out, ta, tb, batch, m, n, k]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* gy = grad_of<T>(out).data();
        for (std::int64_t i = 0; i < batch; ++i) {
          const T* g = gy + i * m * n;
          if (a.requires_grad()) {
            T* ga = grad_of<T>(a).data() + i * m * k;
            const T* bb = cdata<T>(b).data() + i * k * n;
            // dA = G op(B)^T (or its transpose when A was transposed).
            if (!ta) {
              detail::gemm<T>(false, !tb, m, k, n, T(1), g, bb, T(1), ga);
            } else {
              detail::gemm<T>(tb, true, k, m, n, T(1), bb, g, T(1), ga);
            }
          }
          if (b.requires_grad()) {
            T* gb = grad_of<T>(b).data() + i * k * n;
            const T* aa = cdata<T>(a).data() + i * m * k;
            if (!tb) {
              detail::gemm<T>(!ta, false, k, n, m, T(1), aa, g, T(1), gb);
            } else {
              detail::gemm<T>(true, ta, n, k, m, T(1), g, aa, T(1), gb);
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization

namespace {

// Normalizes `groups` contiguous-or-strided sets. `index(set, j)` maps the
// j-th element of a set to a flat offset; `channel(set, j)` to the affine index.
template <class T, class Index, class Channel>
void norm_forward(const T* x, const T* w, const T* b, std::int64_t sets, std::int64_t per_set,
                  Index index, Channel channel, T* y, std::vector<double>& mean,
                  std::vector<double>& rstd) {
  mean.assign(static_cast<std::size_t>(sets), 0.0);
  rstd.assign(static_cast<std::size_t>(sets), 0.0);
  for (std::int64_t s = 0; s < sets; ++s) {
    double mu = 0.0;
    for (std::int64_t j = 0; j < per_set; ++j) mu += x[index(s, j)];
    mu /= static_cast<double>(per_set);
    double var = 0.0;
    for (std::int64_t j = 0; j < per_set; ++j) {
      const double d = x[index(s, j)] - mu;
      var += d * d;
    }
    var /= static_cast<double>(per_set);
    const double r = 1.0 / std::sqrt(var + kNormEps);
    mean[s] = mu;
    rstd[s] = r;
    for (std::int64_t j = 0; j < per_set; ++j) {
      const auto i = index(s, j);
      const auto c = channel(s, j);
      const double xh = (x[i] - mu) * r;
      y[i] = static_cast<T>(xh * (w ? w[c] : T(1)) + (b ? b[c] : T(0)));
    }
  }
}

template <class T, class Index, class Channel>
void norm_backward(const T* x, const T* w, const T* gy, std::int64_t sets, std::int64_t per_set,
                   Index index, Channel channel, const std::vector<double>& mean,
                   const std::vector<double>& rstd, T* gx, T* gw, T* gb) {
  for (std::int64_t s = 0; s < sets; ++s) {
    const double mu = mean[s];
    const double r = rstd[s];
    double sum_dxh = 0.0;
    double sum_dxh_xh = 0.0;
    for (std::int64_t j = 0; j < per_set; ++j) {
      const auto i = index(s, j);
      const auto c = channel(s, j);
      const double xh = (x[i] - mu) * r;
      const double dxh = gy[i] * (w ? w[c] : T(1));
      sum_dxh += dxh;
      sum_dxh_xh += dxh * xh;
      if (gw) gw[c] += static_cast<T>(gy[i] * xh);
      if (gb) gb[c] += gy[i];
    }
    if (!gx) continue;
    const double inv = 1.0 / static_cast<double>(per_set);
    for (std::int64_t j = 0; j < per_set; ++j) {
      const auto i = index(s, j);
      const auto c = channel(s, j);
      const double xh = (x[i] - mu) * r;
      const double dxh = gy[i] * (w ? w[c] : T(1));
      gx[i] += static_cast<T>(r * (dxh - inv * sum_dxh - xh * inv * sum_dxh_xh));
    }
  }
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_same_dtype({&x, &weight, &bias}, "layer_norm");
  const std::int64_t c = x.dim(-1);
  require(c > 0, "layer_norm: empty normalization axis");
  require(!weight.defined() || weight.numel() == c, "layer_norm: weight size mismatch");
  require(!bias.defined() || bias.numel() == c, "layer_norm: bias size mismatch");
  profiling::record_touch(weight);
  profiling::record_touch(bias);
  profiling::record_macs(MacKind::norm, x.numel());
  Tensor out = make_output(x.shape(), x.dtype(), {&x, &weight, &bias});
  if (out.is_meta()) return out;
  const std::int64_t rows = x.numel() / c;
  auto index = [c](std::int64_t s, std::int64_t j) { return s * c + j; };
  auto channel = [](std::int64_t, std::int64_t j) { return j; };
  auto stats = std::make_shared<std::pair<std::vector<double>, std::vector<double>>>();
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    norm_forward<T>(cdata<T>(x).data(), weight.defined() ? cdata<T>(weight).data() : nullptr,
                    bias.defined() ? cdata<T>(bias).data() : nullptr, rows, c, index, channel,
                    out.data<T>().data(), stats->first, stats->second);
  });
  if (out.requires_grad()) {
    record("layer_norm", out, {&x, &weight, &bias}, [=]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        norm_backward<T>(cdata<T>(x).data(), weight.defined() ? cdata<T>(weight).data() : nullptr,
                         grad_of<T>(out).data(), rows, c, index, channel, stats->first,
                         stats->second, x.requires_grad() ? grad_of<T>(x).data() : nullptr,
                         weight.defined() && weight.requires_grad() ? grad_of<T>(weight).data() : nullptr,
                         bias.defined() && bias.requires_grad() ? grad_of<T>(bias).data() : nullptr);
      });
    });
  }
  return out;
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& weight, const Tensor& bias) {
  check_same_dtype({&x, &weight, &bias}, "group_norm");
  require(x.ndim() == 4, "group_norm: expected N x C x H x W, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups <= 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels cannot form " +
                      std::to_string(groups) + " groups");
  }
  const std::int64_t cg = c / groups;
  require(!weight.defined() || weight.numel() == c, "group_norm: weight size mismatch");
  require(!bias.defined() || bias.numel() == c, "group_norm: bias size mismatch");
  profiling::record_touch(weight);
  profiling::record_touch(bias);
  profiling::record_macs(MacKind::norm, x.numel());
  Tensor out = make_output(x.shape(), x.dtype(), {&x, &weight, &bias});
  if (out.is_meta()) return out;
  const std::int64_t sets = n * groups;
  const std::int64_t per_set = cg * hw;
  // Channels of a group are contiguous in NCHW, so a set is one flat run.
  auto index = [per_set](std::int64_t s, std::int64_t j) { return s * per_set + j; };
  auto channel = [groups = static_cast<std::int64_t>(groups), cg, hw](std::int64_t s, std::int64_t j) {
    return (s % groups) * cg + j / hw;
  };
  auto stats = std::make_shared<std::pair<std::vector<double>, std::vector<double>>>();
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    norm_forward<T>(cdata<T>(x).data(), weight.defined() ? cdata<T>(weight).data() : nullptr,
                    bias.defined() ? cdata<T>(bias).data() : nullptr, sets, per_set, index, channel,
                    out.data<T>().data(), stats->first, stats->second);
  });
  if (out.requires_grad()) {
    record("group_norm", out, {&x, &weight, &bias}, [=]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        norm_backward<T>(cdata<T>(x).data(), weight.defined() ? cdata<T>(weight).data() : nullptr,
                         grad_of<T>(out).data(), sets, per_set, index, channel, stats->first,
                         stats->second, x.requires_grad() ? grad_of<T>(x).data() : nullptr,
                         weight.defined() && weight.requires_grad() ? grad_of<T>(weight).data() : nullptr,
                         bias.defined() && bias.requires_grad() ? grad_of<T>(bias).data() : nullptr);
      });
    });
  }
  return out;
}

namespace {

template <class T>
void softmax_rows(const T* x, T* y, std::int64_t outer, std::int64_t len, std::int64_t inner) {
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const T* xs = x + o * len * inner + i;
      T* ys = y + o * len * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < len; ++j) mx = std::max(mx, xs[j * inner]);
      T total = 0;
      for (std::int64_t j = 0; j < len; ++j) {
        ys[j * inner] = std::exp(xs[j * inner] - mx);
        total += ys[j * inner];
      }
      const T inv = T(1) / total;
      for (std::int64_t j = 0; j < len; ++j) ys[j * inner] *= inv;
    }
}

template <class T>
void softmax_rows_backward(const T* y, const T* gy, T* gx, std::int64_t outer, std::int64_t len,
                           std::int64_t inner) {
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * len * inner + i;
      T dot = 0;
      for (std::int64_t j = 0; j < len; ++j) dot += y[base + j * inner] * gy[base + j * inner];
      for (std::int64_t j = 0; j < len; ++j) {
        const auto idx = base + j * inner;
        gx[idx] += y[idx] * (gy[idx] - dot);
      }
    }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  require(axis >= 0 && axis < nd, "softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
  const std::int64_t len = x.dim(axis);
  Tensor out = make_output(x.shape(), x.dtype(), {&x});
  if (out.is_meta()) return out;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    softmax_rows(cdata<T>(x).data(), out.data<T>().data(), outer, len, inner);
  });
  if (out.requires_grad()) {
    record("softmax", out, {&x}, [x, out, outer, len, inner]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        softmax_rows_backward(cdata<T>(out).data(), grad_of<T>(out).data(), grad_of<T>(x).data(),
                              outer, len, inner);
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention

namespace {

struct AttnGeom {
  std::int64_t batch, tq, tk, d, heads, dh;
  double scale;
};

AttnGeom attention_geometry(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  require(q.ndim() == 3 && k.ndim() == 3, "attention: q and k must be B x T x d, got " +
                                               shape_str(q.shape()) + ", " + shape_str(k.shape()));
  require(q.dim(0) == k.dim(0) && q.dim(2) == k.dim(2), "attention: q/k shapes disagree: " +
                                                            shape_str(q.shape()) + " vs " +
                                                            shape_str(k.shape()));
  if (v.defined()) {
    require(v.shape() == k.shape(),
            "attention: v " + shape_str(v.shape()) + " must match k " + shape_str(k.shape()));
  }
  require(q.dim(1) >= 1 && k.dim(1) >= 1, "attention: empty token set");
  const std::int64_t d = q.dim(2);
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  AttnGeom g{q.dim(0), q.dim(1), k.dim(1), d, heads, d / heads, 0.0};
  g.scale = 1.0 / std::sqrt(static_cast<double>(g.dh));
  return g;
}

template <class T>
void gather_head(const T* src, std::int64_t tokens, const AttnGeom& g, std::int64_t b,
                 std::int64_t h, T* dst) {
  for (std::int64_t t = 0; t < tokens; ++t)
    for (std::int64_t j = 0; j < g.dh; ++j) dst[t * g.dh + j] = src[(b * tokens + t) * g.d + h * g.dh + j];
}

template <class T>
void scatter_head_add(const T* src, std::int64_t tokens, const AttnGeom& g, std::int64_t b,
                      std::int64_t h, T* dst) {
  for (std::int64_t t = 0; t < tokens; ++t)
    for (std::int64_t j = 0; j < g.dh; ++j) dst[(b * tokens + t) * g.d + h * g.dh + j] += src[t * g.dh + j];
}

// probs: tq x tk for one (b, h).
template <class T>
void head_scores(const T* qh, const T* kh, const AttnGeom& g, T* probs) {
  detail::gemm<T>(false, true, g.tq, g.tk, g.dh, static_cast<T>(g.scale), qh, kh, T(0), probs);
  softmax_rows(probs, probs, g.tq, g.tk, 1);
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  check_same_dtype({&q, &k, &v}, "attention");
  const AttnGeom g = attention_geometry(q, k, v, heads);
  profiling::record_macs(MacKind::attention_matmul, 2 * g.batch * g.tq * g.tk * g.d);
  Tensor out = make_output({g.batch, g.tq, g.d}, q.dtype(), {&q, &k, &v});
  if (out.is_meta()) return out;
  const bool keep = out.requires_grad();
  auto saved = std::make_shared<fbf::detail::Buffer>();
  dispatch(q.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> qh(g.tq * g.dh), kh(g.tk * g.dh), vh(g.tk * g.dh), oh(g.tq * g.dh);
    std::vector<T> probs(static_cast<std::size_t>(g.tq * g.tk));
    std::vector<T> all;
    if (keep) all.resize(static_cast<std::size_t>(g.batch * g.heads * g.tq * g.tk));
    T* y = out.data<T>().data();
    for (std::int64_t b = 0; b < g.batch; ++b)
      for (std::int64_t h = 0; h < g.heads; ++h) {
        gather_head(cdata<T>(q).data(), g.tq, g, b, h, qh.data());
        gather_head(cdata<T>(k).data(), g.tk, g, b, h, kh.data());
        gather_head(cdata<T>(v).data(), g.tk, g, b, h, vh.data());
        head_scores(qh.data(), kh.data(), g, probs.data());
        detail::gemm<T>(false, false, g.tq, g.dh, g.tk, T(1), probs.data(), vh.data(), T(0), oh.data());
        scatter_head_add(oh.data(), g.tq, g, b, h, y);
        if (keep) std::copy(probs.begin(), probs.end(), all.begin() + (b * g.heads + h) * g.tq * g.tk);
      }
    if (keep) *saved = std::move(all);
  });
  if (keep) {
    record("attention", out, {&q, &k, &v}, [q, k, v, out, g, saved]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& all = std::get<std::vector<T>>(*saved);
        std::vector<T> qh(g.tq * g.dh), kh(g.tk * g.dh), vh(g.tk * g.dh), goh(g.tq * g.dh);
        std::vector<T> dq(g.tq * g.dh), dk(g.tk * g.dh), dv(g.tk * g.dh);
        std::vector<T> dp(static_cast<std::size_t>(g.tq * g.tk));
        const T* gy = grad_of<T>(out).data();
        for (std::int64_t b = 0; b < g.batch; ++b)
          for (std::int64_t h = 0; h < g.heads; ++h) {
            const T* p = all.data() + (b * g.heads + h) * g.tq * g.tk;
            gather_head(cdata<T>(q).data(), g.tq, g, b, h, qh.data());
            gather_head(cdata<T>(k).data(), g.tk, g, b, h, kh.data());
            gather_head(cdata<T>(v).data(), g.tk, g, b, h, vh.data());
            gather_head(gy, g.tq, g, b, h, goh.data());
            // dV = P^T dO ; dP = dO V^T ; dS = P * (dP - rowsum(dP * P))
            detail::gemm<T>(true, false, g.tk, g.dh, g.tq, T(1), p, goh.data(), T(0), dv.data());
            detail::gemm<T>(false, true, g.tq, g.tk, g.dh, T(1), goh.data(), vh.data(), T(0), dp.data());
            for (std::int64_t i = 0; i < g.tq; ++i) {
              T dot = 0;
              for (std::int64_t j = 0; j < g.tk; ++j) dot += dp[i * g.tk + j] * p[i * g.tk + j];
              for (std::int64_t j = 0; j < g.tk; ++j)
                dp[i * g.tk + j] = p[i * g.tk + j] * (dp[i * g.tk + j] - dot);
            }
            const T sc = static_cast<T>(g.scale);
            detail::gemm<T>(false, false, g.tq, g.dh, g.tk, sc, dp.data(), kh.data(), T(0), dq.data());
            detail::gemm<T>(true, false, g.tk, g.dh, g.tq, sc, dp.data(), qh.data(), T(0), dk.data());
            if (q.requires_grad()) scatter_head_add(dq.data(), g.tq, g, b, h, grad_of<T>(q).data());
            if (k.requires_grad()) scatter_head_add(dk.data(), g.tk, g, b, h, grad_of<T>(k).data());
            if (v.requires_grad()) scatter_head_add(dv.data(), g.tk, g, b, h, grad_of<T>(v).data());
          }
      });
    });
  }
  return out;
}

Tensor attention_weights(const Tensor& q, const Tensor& k, int heads) {
  check_same_dtype({&q, &k}, "attention_weights");
  const AttnGeom g = attention_geometry(q, k, Tensor{}, heads);
  Tensor out = Tensor::zeros({g.batch, g.heads, g.tq, g.tk}, q.dtype());
  dispatch(q.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> qh(g.tq * g.dh), kh(g.tk * g.dh);
    for (std::int64_t b = 0; b < g.batch; ++b)
      for (std::int64_t h = 0; h < g.heads; ++h) {
        gather_head(cdata<T>(q).data(), g.tq, g, b, h, qh.data());
        gather_head(cdata<T>(k).data(), g.tk, g, b, h, kh.data());
        head_scores(qh.data(), kh.data(), g, out.data<T>().data() + (b * g.heads + h) * g.tq * g.tk);
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// layout

namespace {

// Generic permutation helper for index maps that are bijections out <-> in.
template <class Map>
Tensor permute_like(const char* name, const Tensor& x, const Shape& oshape, Map out_to_in) {
  Tensor out = make_output(oshape, x.dtype(), {&x});
  if (out.is_meta()) return out;
  const std::int64_t total = out.numel();
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = cdata<T>(x);
    auto y = out.data<T>();
    for (std::int64_t i = 0; i < total; ++i) y[i] = xs[out_to_in(i)];
  });
  if (out.requires_grad()) {
    record(name, out, {&x}, [x, out, out_to_in, total]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gy = grad_of<T>(out);
        auto gx = grad_of<T>(x);
        for (std::int64_t i = 0; i < total; ++i) gx[out_to_in(i)] += gy[i];
      });
    });
  }
  return out;
}

}  // namespace

Tensor nchw_to_tokens(const Tensor& x) {
  require(x.ndim() == 4, "nchw_to_tokens: expected rank 4, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return permute_like("nchw_to_tokens", x, {n, hw, c}, [c, hw](std::int64_t i) {
    const std::int64_t ch = i % c;
    const std::int64_t t = (i / c) % hw;
    const std::int64_t b = i / (c * hw);
    return (b * c + ch) * hw + t;
  });
}

Tensor tokens_to_nchw(const Tensor& t, std::int64_t height, std::int64_t width) {
  require(t.ndim() == 3 && t.dim(1) == height * width,
          "tokens_to_nchw: " + shape_str(t.shape()) + " is not N x (" + std::to_string(height) +
              "*" + std::to_string(width) + ") x C");
  const std::int64_t n = t.dim(0), c = t.dim(2), hw = height * width;
  return permute_like("tokens_to_nchw", t, {n, c, height, width}, [c, hw](std::int64_t i) {
    const std::int64_t p = i % hw;
    const std::int64_t ch = (i / hw) % c;
    const std::int64_t b = i / (c * hw);
    return (b * hw + p) * c + ch;
  });
}

Tensor slice_last(const Tensor& x, std::int64_t start, std::int64_t len) {
  const std::int64_t c = x.dim(-1);
  require(start >= 0 && len >= 1 && start + len <= c, "slice_last: range out of bounds");
  Shape oshape = x.shape();
  oshape.back() = len;
  return permute_like("slice_last", x, oshape, [c, start, len](std::int64_t i) {
    return (i / len) * c + start + i % len;
  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_channels: nothing to concatenate");
  const Tensor& first = parts.front();
  require(first.ndim() == 4, "concat_channels: expected NCHW tensors");
  std::int64_t ctotal = 0;
  bool meta = false;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.ndim() != 4 || p.dim(0) != first.dim(0) || p.dim(2) != first.dim(2) ||
        p.dim(3) != first.dim(3) || p.dtype() != first.dtype()) {
      throw ConfigError("concat_channels: incompatible parts " + shape_str(first.shape()) + " and " +
                        shape_str(p.shape()));
    }
    ctotal += p.dim(1);
    meta = meta || p.is_meta();
    needs_grad = needs_grad || p.requires_grad();
  }
  const std::int64_t n = first.dim(0), hw = first.dim(2) * first.dim(3);
  Shape oshape{n, ctotal, first.dim(2), first.dim(3)};
  if (meta) return Tensor::meta(oshape, first.dtype());
  Tensor out = Tensor::zeros(oshape, first.dtype());
  if (needs_grad && Tape::active()) out.set_requires_grad(true);
  dispatch(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto y = out.data<T>();
    std::int64_t coff = 0;
    for (const auto& p : parts) {
      auto xs = cdata<T>(p);
      const std::int64_t c = p.dim(1);
      for (std::int64_t b = 0; b < n; ++b)
        std::copy(xs.begin() + b * c * hw, xs.begin() + (b + 1) * c * hw,
                  y.begin() + (b * ctotal + coff) * hw);
      coff += c;
    }
  });
  if (out.requires_grad()) {
    Tape::Node node;
    node.op = "concat_channels";
    for (const auto& p : parts) node.inputs.push_back(p.impl());
    node.output = out.impl();
    node.backward = [parts, out, n, hw, ctotal]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gy = grad_of<T>(out);
        std::int64_t coff = 0;
        for (const auto& p : parts) {
          const std::int64_t c = p.dim(1);
          if (p.requires_grad()) {
            auto gx = grad_of<T>(p);
            for (std::int64_t b = 0; b < n; ++b)
              for (std::int64_t i = 0; i < c * hw; ++i) gx[b * c * hw + i] += gy[(b * ctotal + coff) * hw + i];
          }
          coff += c;
        }
      });
    };
    Tape::active()->record(std::move(node));
  }
  return out;
}

// ---------------------------------------------------------------------------
// resampling

namespace {

struct Taps {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> frac;
};

Taps bilinear_taps(std::int64_t in, std::int64_t out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  require(x.ndim() == 4, "resize_bilinear: expected NCHW, got " + shape_str(x.shape()));
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: output size must be >= 1");
  const std::int64_t planes = x.dim(0) * x.dim(1), ih = x.dim(2), iw = x.dim(3);
  Tensor out = make_output({x.dim(0), x.dim(1), out_h, out_w}, x.dtype(), {&x});
  if (out.is_meta()) return out;
  auto ty = std::make_shared<Taps>(bilinear_taps(ih, out_h));
  auto tx = std::make_shared<Taps>(bilinear_taps(iw, out_w));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = cdata<T>(x);
    auto y = out.data<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = xs.data() + p * ih * iw;
      T* dst = y.data() + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const double fy = ty->frac[oy];
        const T* r0 = src + ty->lo[oy] * iw;
        const T* r1 = src + ty->hi[oy] * iw;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const double fx = tx->frac[ox];
          const auto a = tx->lo[ox], b = tx->hi[ox];
          const double top = r0[a] + (r0[b] - r0[a]) * fx;
          const double bot = r1[a] + (r1[b] - r1[a]) * fx;
          dst[oy * out_w + ox] = static_cast<T>(top + (bot - top) * fy);
        }
      }
    }
  });
  if (out.requires_grad()) {
    record("resize_bilinear", out, {&x}, [x, out, ty, tx, planes, ih, iw, out_h, out_w]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gy = grad_of<T>(out);
        auto gx = grad_of<T>(x);
        for (std::int64_t p = 0; p < planes; ++p) {
          T* dst = gx.data() + p * ih * iw;
          const T* g = gy.data() + p * out_h * out_w;
          for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const double fy = ty->frac[oy];
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
              const double fx = tx->frac[ox];
              const double v = g[oy * out_w + ox];
              const auto a = tx->lo[ox], b = tx->hi[ox];
              dst[ty->lo[oy] * iw + a] += static_cast<T>(v * (1 - fy) * (1 - fx));
              dst[ty->lo[oy] * iw + b] += static_cast<T>(v * (1 - fy) * fx);
              dst[ty->hi[oy] * iw + a] += static_cast<T>(v * fy * (1 - fx));
              dst[ty->hi[oy] * iw + b] += static_cast<T>(v * fy * fx);
            }
          }
        }
      });
    });
  }
  return out;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  require(x.ndim() == 4 && factor >= 1, "upsample_nearest: expected NCHW and factor >= 1");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  return permute_like("upsample_nearest", x, {n, c, oh, ow}, [=](std::int64_t i) {
    const std::int64_t ox = i % ow;
    const std::int64_t oy = (i / ow) % oh;
    const std::int64_t plane = i / (oh * ow);
    return (plane * h + oy / factor) * w + ox / factor;
  });
}

Tensor avg_pool(const Tensor& x, int kernel) {
  require(x.ndim() == 4 && kernel >= 1, "avg_pool: expected NCHW and kernel >= 1");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h >= kernel && w >= kernel, "avg_pool: kernel larger than input " + shape_str(x.shape()));
  const std::int64_t oh = h / kernel, ow = w / kernel;
  Tensor out = make_output({x.dim(0), x.dim(1), oh, ow}, x.dtype(), {&x});
  if (out.is_meta()) return out;
  const double inv = 1.0 / (kernel * kernel);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = cdata<T>(x);
    auto y = out.data<T>();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          double acc = 0;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx)
              acc += xs[(p * h + oy * kernel + ky) * w + ox * kernel + kx];
          y[(p * oh + oy) * ow + ox] = static_cast<T>(acc * inv);
        }
  });
  if (out.requires_grad()) {
    record("avg_pool", out, {&x}, [=]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gy = grad_of<T>(out);
        auto gx = grad_of<T>(x);
        for (std::int64_t p = 0; p < planes; ++p)
          for (std::int64_t oy = 0; oy < oh; ++oy)
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const T g = static_cast<T>(gy[(p * oh + oy) * ow + ox] * inv);
              for (int ky = 0; ky < kernel; ++ky)
                for (int kx = 0; kx < kernel; ++kx) gx[(p * h + oy * kernel + ky) * w + ox * kernel + kx] += g;
            }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

namespace {

void check_labels(const Tensor& x, std::span<const std::int32_t> labels, const char* op) {
  require(x.ndim() == 4, std::string(op) + ": expected N x C x H x W, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != n * h * w) {
    throw DataError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(n) + "x" + std::to_string(h) + "x" + std::to_string(w) + " pixels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= c) {
      const std::int64_t px = static_cast<std::int64_t>(i);
      throw DataError(std::string(op) + ": class index " + std::to_string(labels[i]) +
                      " outside [0, " + std::to_string(c) + ") at sample " +
                      std::to_string(px / (h * w)) + " pixel (x=" + std::to_string(px % w) +
                      ", y=" + std::to_string((px / w) % h) + ")");
    }
  }
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  if (logits.is_meta()) return Tensor::meta({1}, logits.dtype());
  check_labels(logits, labels, "cross_entropy");
  const std::int64_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const double pixels = static_cast<double>(n * hw);
  Tensor out = make_output({1}, logits.dtype(), {&logits});
  auto lab = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = cdata<T>(logits);
    double total = 0;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t p = 0; p < hw; ++p) {
        const T* px = x.data() + b * c * hw + p;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t k = 0; k < c; ++k) mx = std::max(mx, double(px[k * hw]));
        double se = 0;
        for (std::int64_t k = 0; k < c; ++k) se += std::exp(px[k * hw] - mx);
        total += mx + std::log(se) - px[(*lab)[b * hw + p] * hw];
      }
    out.data<T>()[0] = static_cast<T>(total / pixels);
  });
  if (out.requires_grad()) {
    record("cross_entropy", out, {&logits}, [logits, out, lab, n, c, hw, pixels]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = cdata<T>(logits);
        auto gx = grad_of<T>(logits);
        const double g = grad_of<T>(out)[0] / pixels;
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t p = 0; p < hw; ++p) {
            const std::int64_t base = b * c * hw + p;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t k = 0; k < c; ++k) mx = std::max(mx, double(x[base + k * hw]));
            double se = 0;
            for (std::int64_t k = 0; k < c; ++k) se += std::exp(x[base + k * hw] - mx);
            const std::int32_t t = (*lab)[b * hw + p];
            for (std::int64_t k = 0; k < c; ++k) {
              const double prob = std::exp(x[base + k * hw] - mx) / se;
              gx[base + k * hw] += static_cast<T>(g * (prob - (k == t ? 1.0 : 0.0)));
            }
          }
      });
    });
  }
  return out;
}

Tensor soft_iou_loss(const Tensor& probs, std::span<const std::int32_t> labels) {
  if (probs.is_meta()) return Tensor::meta({1}, probs.dtype());
  check_labels(probs, labels, "soft_iou_loss");
  const std::int64_t n = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  Tensor out = make_output({1}, probs.dtype(), {&probs});
  auto lab = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
  // Per class: intersection and union sums.
  auto sums = std::make_shared<std::vector<std::pair<double, double>>>(c, std::make_pair(0.0, 0.0));
  dispatch(probs.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = cdata<T>(probs);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t k = 0; k < c; ++k)
        for (std::int64_t i = 0; i < hw; ++i) {
          const double pv = p[(b * c + k) * hw + i];
          const double tv = (*lab)[b * hw + i] == k ? 1.0 : 0.0;
          (*sums)[k].first += pv * tv;
          (*sums)[k].second += pv + tv - pv * tv;
        }
    double iou_sum = 0;
    for (const auto& [inter, uni] : *sums) iou_sum += uni > 0 ? inter / uni : 1.0;
    out.data<T>()[0] = static_cast<T>(1.0 - iou_sum / static_cast<double>(c));
  });
  if (out.requires_grad()) {
    record("soft_iou_loss", out, {&probs}, [probs, out, lab, sums, n, c, hw]() {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gp = grad_of<T>(probs);
        const double g = grad_of<T>(out)[0];
        for (std::int64_t k = 0; k < c; ++k) {
          const auto [inter, uni] = (*sums)[k];
          if (uni <= 0) continue;
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t i = 0; i < hw; ++i) {
              const double tv = (*lab)[b * hw + i] == k ? 1.0 : 0.0;
              const double d_iou = (tv * uni - inter * (1.0 - tv)) / (uni * uni);
              gp[(b * c + k) * hw + i] += static_cast<T>(-g * d_iou / static_cast<double>(c));
            }
        }
      });
    });
  }
  return out;
}

std::vector<std::int32_t> argmax_channels(const Tensor& x) {
  require(x.ndim() == 4, "argmax_channels: expected NCHW");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<std::int32_t> out(static_cast<std::size_t>(n * hw));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = cdata<T>(x);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t i = 0; i < hw; ++i) {
        std::int32_t best = 0;
        T bv = xs[b * c * hw + i];
        for (std::int64_t k = 1; k < c; ++k) {
          const T v = xs[(b * c + k) * hw + i];
          if (v > bv) {
            bv = v;
            best = static_cast<std::int32_t>(k);
          }
        }
        out[b * hw + i] = best;
      }
  });
  return out;
}

}  // namespace fbf::ops
