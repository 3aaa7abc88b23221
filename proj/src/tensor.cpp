#include "fbformer/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace fbf {

const char* to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32" || name == "float32") return DType::f32;
  if (name == "f64" || name == "float64") return DType::f64;
  throw ConfigError("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw ConfigError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

namespace detail {

namespace {

Buffer make_buffer(DType dtype, std::int64_t n) {
  if (dtype == DType::f32) return std::vector<float>(static_cast<std::size_t>(n), 0.0f);
  return std::vector<double>(static_cast<std::size_t>(n), 0.0);
}

}  // namespace

void TensorImpl::ensure_grad() {
  if (has_grad) return;
  grad = make_buffer(dtype, numel);
  has_grad = true;
}

}  // namespace detail

namespace {

std::shared_ptr<detail::TensorImpl> new_impl(const Shape& shape, DType dtype, bool meta) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->numel = shape_numel(shape);
  impl->dtype = dtype;
  impl->meta = meta;
  if (!meta) impl->data = detail::make_buffer(dtype, impl->numel);
  return impl;
}

thread_local Tape* g_active_tape = nullptr;

}  // namespace

Tensor Tensor::zeros(const Shape& shape, DType dtype) {
  return Tensor(new_impl(shape, dtype, false));
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
  Tensor t = zeros(shape, dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw ConfigError("from_values: " + std::to_string(values.size()) +
                      " values for shape " + shape_str(shape));
  }
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::initializer_list<double> values,
                           DType dtype) {
  return from_values(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

Tensor Tensor::meta(const Shape& shape, DType dtype) { return Tensor(new_impl(shape, dtype, true)); }

std::int64_t Tensor::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw UsageError("axis out of range for shape " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor with shape " + shape_str(shape()));
  return at(0);
}

double Tensor::at(std::int64_t i) const {
  return dispatch(dtype(), [&](auto tag) -> double { return data<decltype(tag)>()[i]; });
}

void Tensor::set(std::int64_t i, double value) {
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    data<T>()[i] = static_cast<T>(value);
  });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&](auto tag) {
    auto d = data<decltype(tag)>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::grad() const {
  Tensor g = zeros(shape(), dtype());
  if (!impl_->has_grad) return g;
  g.impl_->data = impl_->grad;
  return g;
}

void Tensor::zero_grad() {
  if (!impl_->has_grad) return;
  std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, impl_->grad);
}

Tensor Tensor::clone() const {
  auto impl = new_impl(shape(), dtype(), is_meta());
  if (!is_meta()) impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const { return clone(); }

Tensor Tensor::to(DType target) const {
  Tensor out = clone();
  out.cast_(target);
  return out;
}

namespace {

detail::Buffer convert(const detail::Buffer& src, DType target) {
  return std::visit(
      [&](const auto& v) -> detail::Buffer {
        if (target == DType::f32) return std::vector<float>(v.begin(), v.end());
        return std::vector<double>(v.begin(), v.end());
      },
      src);
}

}  // namespace

void Tensor::cast_(DType target) {
  if (impl_->dtype == target) return;
  impl_->dtype = target;
  if (impl_->meta) return;
  impl_->data = convert(impl_->data, target);
  if (impl_->has_grad) impl_->grad = convert(impl_->grad, target);
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape()) {
    throw ConfigError("copy_from: shape " + shape_str(other.shape()) + " does not match " +
                      shape_str(shape()));
  }
  impl_->data = convert(other.impl_->data, dtype());
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(Node node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward(): loss does not depend on any recorded tensor");
  }
  auto& root = *loss.impl();
  root.ensure_grad();
  std::visit([](auto& g) { g[0] += 1; }, root.grad);

  visits_ = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    ++visits_;
    if (!it->output->has_grad) continue;  // not on a path to the loss
    it->backward();
    // Intermediate gradients are consumed exactly once.
    it->output->grad = detail::Buffer{};
    it->output->has_grad = false;
  }
  nodes_.clear();
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

}  // namespace fbf
