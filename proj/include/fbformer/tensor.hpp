#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fbf {

/// Raised for invalid shapes, group counts, unknown variants and similar
/// configuration mistakes. The CLI maps it to exit status 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed inputs (bad labels, unreadable images, wrong sizes).
/// The CLI maps it to exit status 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse, e.g. backward() on a non-scalar.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* to_string(DType dtype);
DType parse_dtype(const std::string& name);

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <class F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  if (dtype == DType::f32) return fn(float{});
  return fn(double{});
}

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl {
  Shape shape;
  std::int64_t numel = 0;
  DType dtype = DType::f32;
  bool meta = false;           // shape-only tensor, no storage
  bool requires_grad = false;
  bool is_param = false;
  Buffer data;
  Buffer grad;                 // empty vector until first accumulation
  bool has_grad = false;

  template <class T>
  std::span<T> values() {
    return std::get<std::vector<T>>(data);
  }
  template <class T>
  std::span<T> grads() {
    ensure_grad();
    return std::get<std::vector<T>>(grad);
  }
  void ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. An optional gradient buffer of the same shape and dtype is
/// filled by Tape::backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f32);
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_values(const Shape& shape, std::initializer_list<double> values,
                            DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  /// Shape-only tensor used for symbolic profiling.
  static Tensor meta(const Shape& shape, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return impl_->numel; }
  DType dtype() const { return impl_->dtype; }
  bool is_meta() const { return impl_->meta; }
  bool requires_grad() const { return impl_->requires_grad; }
  bool is_param() const { return impl_->is_param; }

  Tensor& set_requires_grad(bool flag);

  template <class T>
  std::span<T> data() {
    check_access<T>();
    return impl_->values<T>();
  }
  template <class T>
  std::span<const T> data() const {
    check_access<T>();
    return impl_->values<T>();
  }

  double item() const;
  double at(std::int64_t flat_index) const;
  void set(std::int64_t flat_index, double value);
  std::vector<double> to_vector() const;

  bool has_grad() const { return impl_->has_grad; }
  /// Gradient as a fresh tensor (zeros when nothing has been accumulated).
  Tensor grad() const;
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;
  /// Copy converted to `dtype`.
  Tensor to(DType dtype) const;
  /// Converts storage (and gradient) in place; handles sharing this impl see it.
  void cast_(DType dtype);
  /// Overwrites values from another tensor of identical shape.
  void copy_from(const Tensor& other);

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  template <class T>
  void check_access() const {
    if (impl_->meta) throw UsageError("data access on a meta tensor");
    if (!std::holds_alternative<std::vector<T>>(impl_->data)) {
      throw UsageError("tensor dtype mismatch on data access");
    }
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable ops executed while the tape is active.
///
/// Constructing a Tape makes it the active recorder for the current thread;
/// destruction restores the previously active one. Ops run without an active
/// tape record nothing (inference mode). Recording order is a topological
/// order of the graph, so backward() walks the nodes in reverse exactly once.
class Tape {
 public:
  struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(Node node);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  /// The tape is cleared afterwards.
  void backward(const Tensor& loss);

  /// Number of node visits performed by the last backward().
  std::size_t last_visit_count() const { return visits_; }

 private:
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
  std::size_t visits_ = 0;
};

/// Suspends recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

}  // namespace fbf
