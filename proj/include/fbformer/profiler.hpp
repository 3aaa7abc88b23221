#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fbformer/tensor.hpp"

namespace fbf::profiling {

enum class MacKind : std::uint8_t { conv, linear, attention_matmul, bias, norm };

struct ScopeStats {
  std::int64_t conv = 0;
  std::int64_t linear = 0;
  std::int64_t attention_matmul = 0;
  std::int64_t bias = 0;
  std::int64_t norm = 0;
  /// Parameter elements read, counted once per op invocation.
  std::int64_t param_touches = 0;
};

/// Collects multiply-accumulate counts from ops executed while it is the
/// active recorder on this thread. Works with meta tensors, so a model can
/// be traced symbolically at any input size without allocating activations.
class Recorder {
 public:
  Recorder();
  ~Recorder();
  Recorder(const Recorder&) = delete;
  Recorder& operator=(const Recorder&) = delete;

  static Recorder* active();

  void add_macs(MacKind kind, std::int64_t count);
  void touch(const Tensor& param);

  const std::map<std::string, ScopeStats>& scopes() const { return scopes_; }
  /// Unique parameter elements touched under scope `prefix` and its sub-scopes.
  std::int64_t unique_params(const std::string& prefix) const;

 private:
  std::map<std::string, ScopeStats> scopes_;
  std::map<std::string, std::set<const detail::TensorImpl*>> unique_;
  std::map<const detail::TensorImpl*, std::int64_t> sizes_;
  Recorder* previous_;
};

/// Pushes a name segment onto the thread-local scope path ("a.b.c").
class Scope {
 public:
  explicit Scope(const std::string& segment);
  ~Scope();
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

 private:
  std::size_t restore_len_;
  bool active_;
};

const std::string& current_scope();

inline void record_macs(MacKind kind, std::int64_t count) {
  if (auto* r = Recorder::active()) r->add_macs(kind, count);
}

inline void record_touch(const Tensor& t) {
  if (!t.defined() || !t.is_param()) return;
  if (auto* r = Recorder::active()) r->touch(t);
}

}  // namespace fbf::profiling
