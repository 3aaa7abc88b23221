#include "fbformer/profiler.hpp"

namespace fbf::profiling {

namespace {

thread_local Recorder* g_recorder = nullptr;
thread_local std::string g_scope;

}  // namespace

Recorder::Recorder() : previous_(g_recorder) { g_recorder = this; }

Recorder::~Recorder() { g_recorder = previous_; }

Recorder* Recorder::active() { return g_recorder; }

void Recorder::add_macs(MacKind kind, std::int64_t count) {
  auto& s = scopes_[g_scope];
  switch (kind) {
    case MacKind::conv: s.conv += count; break;
    case MacKind::linear: s.linear += count; break;
    case MacKind::attention_matmul: s.attention_matmul += count; break;
    case MacKind::bias: s.bias += count; break;
    case MacKind::norm: s.norm += count; break;
  }
}

void Recorder::touch(const Tensor& param) {
  const auto* key = param.impl().get();
  scopes_[g_scope].param_touches += param.numel();
  unique_[g_scope].insert(key);
  sizes_[key] = param.numel();
}

std::int64_t Recorder::unique_params(const std::string& prefix) const {
  std::set<const detail::TensorImpl*> seen;
  for (const auto& [scope, set] : unique_) {
    const bool match = scope == prefix || (!prefix.empty() && scope.size() > prefix.size() &&
                                           scope.compare(0, prefix.size(), prefix) == 0 &&
                                           scope[prefix.size()] == '.');
    if (!match) continue;
    seen.insert(set.begin(), set.end());
  }
  std::int64_t total = 0;
  for (const auto* p : seen) total += sizes_.at(p);
  return total;
}

Scope::Scope(const std::string& segment) : restore_len_(g_scope.size()), active_(g_recorder != nullptr) {
  if (!active_) return;
  if (!g_scope.empty()) g_scope += '.';
  g_scope += segment;
}

Scope::~Scope() {
  if (active_) g_scope.resize(restore_len_);
}

const std::string& current_scope() { return g_scope; }

}  // namespace fbf::profiling
