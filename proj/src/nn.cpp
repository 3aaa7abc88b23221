#include "fbformer/nn.hpp"

namespace fbf {

bool has_prefix(const std::string& name, const std::string& prefix) {
  if (prefix.empty()) return true;
  if (name.compare(0, prefix.size(), prefix) != 0) return false;
  return name.size() == prefix.size() || name[prefix.size()] == '.';
}

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  value.impl()->is_param = true;
  value.set_requires_grad(true);
  params_.push_back(Parameter{name, std::move(value), true});
  return params_.back().value;
}

Tensor ParamStore::weight(const std::string& name, const Shape& shape) {
  if (init_.meta) return add(name, Tensor::meta(shape, init_.dtype));
  Tensor t = Tensor::zeros(shape, init_.dtype);
  // Each parameter draws from its own stream so adding a module elsewhere
  // does not perturb the initialization of the others.
  Rng local = rng_.derive(fnv1a64(name));
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.data<T>()) v = static_cast<T>(local.truncated_normal(init_.weight_std));
  });
  return add(name, std::move(t));
}

Tensor ParamStore::constant(const std::string& name, const Shape& shape, double value) {
  if (init_.meta) return add(name, Tensor::meta(shape, init_.dtype));
  return add(name, Tensor::full(shape, value, init_.dtype));
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter& ParamStore::at(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ConfigError("no parameter named '" + name + "'");
}

std::int64_t ParamStore::total_numel() const { return numel_with_prefix(""); }

std::int64_t ParamStore::numel_with_prefix(const std::string& prefix) const {
  std::int64_t n = 0;
  for (const auto& p : params_)
    if (has_prefix(p.name, prefix)) n += p.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void ParamStore::cast(DType dtype) {
  for (auto& p : params_) p.value.cast_(dtype);
  init_.dtype = dtype;
}

namespace nn {

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in, int out, int kernel, int stride,
               int padding, int groups, bool bias) {
  if (groups <= 0 || in % groups != 0 || out % groups != 0) {
    throw ConfigError(name + ": channels " + std::to_string(in) + "->" + std::to_string(out) +
                      " incompatible with " + std::to_string(groups) + " groups");
  }
  weight_ = store.weight(name + ".weight", {out, in / groups, kernel, kernel});
  if (bias) bias_ = store.constant(name + ".bias", {out}, 0.0);
  opts_.stride = stride;
  opts_.padding = padding;
  opts_.groups = groups;
}

Tensor Conv2d::operator()(const Tensor& x) const { return ops::conv2d(x, weight_, bias_, opts_); }

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, bool bias) {
  weight_ = store.weight(name + ".weight", {out, in});
  if (bias) bias_ = store.constant(name + ".bias", {out}, 0.0);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int dim) {
  weight_ = store.constant(name + ".weight", {dim}, 1.0);
  bias_ = store.constant(name + ".bias", {dim}, 0.0);
}

GroupNorm::GroupNorm(ParamStore& store, const std::string& name, int groups, int channels)
    : groups_(groups) {
  if (groups <= 0 || channels % groups != 0) {
    throw ConfigError(name + ": " + std::to_string(channels) + " channels cannot form " +
                      std::to_string(groups) + " groups");
  }
  weight_ = store.constant(name + ".weight", {channels}, 1.0);
  bias_ = store.constant(name + ".bias", {channels}, 0.0);
}

}  // namespace nn
}  // namespace fbf
