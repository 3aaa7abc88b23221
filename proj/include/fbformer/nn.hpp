#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbformer/ops.hpp"
#include "fbformer/rng.hpp"
#include "fbformer/tensor.hpp"

namespace fbf {

/// A named trainable tensor. The gradient lives on `value` (see Tensor::grad).
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

/// How freshly created parameters are filled.
struct InitOptions {
  DType dtype = DType::f32;
  /// Shape-only parameters for symbolic profiling.
  bool meta = false;
  double weight_std = 0.02;
};

/// Owns every parameter of a model under unique dotted names.
class ParamStore {
 public:
  ParamStore(std::uint64_t seed, InitOptions init) : rng_(seed), init_(init) {}

  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  /// Truncated-normal weight (std from InitOptions, cut at 2 std).
  Tensor weight(const std::string& name, const Shape& shape);
  Tensor constant(const std::string& name, const Shape& shape, double value);

  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter>& params() { return params_; }
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  std::int64_t total_numel() const;
  std::int64_t numel_with_prefix(const std::string& prefix) const;
  void zero_grad();
  void cast(DType dtype);
  DType dtype() const { return init_.dtype; }
  bool meta() const { return init_.meta; }

 private:
  Tensor& add(const std::string& name, Tensor value);

  std::vector<Parameter> params_;
  Rng rng_;
  InitOptions init_;
};

bool has_prefix(const std::string& name, const std::string& prefix);

namespace nn {

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, int in, int out, int kernel, int stride = 1,
         int padding = 0, int groups = 1, bool bias = true);
  Tensor operator()(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_, bias_;
  ops::Conv2dOptions opts_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, bool bias = true);
  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight_, bias_); }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_, bias_;
};

/// Layer norm over the last axis.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int dim);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, weight_, bias_); }
  const Tensor& weight() const { return weight_; }

 private:
  Tensor weight_, bias_;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParamStore& store, const std::string& name, int groups, int channels);
  Tensor operator()(const Tensor& x) const { return ops::group_norm(x, groups_, weight_, bias_); }
  const Tensor& weight() const { return weight_; }

 private:
  Tensor weight_, bias_;
  int groups_ = 1;
};

}  // namespace nn
}  // namespace fbf
