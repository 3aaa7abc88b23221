#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbformer/config.hpp"
#include "fbformer/profiler.hpp"

namespace fbf {

/// Which operations count towards the MAC total. Parameters always include
/// biases and norm affines.
struct ProfileConvention {
  bool include_bias = false;
  bool include_norm = false;
  /// Attention score (QK^T) and aggregation (PV) products. Off by default:
  /// the reference totals are reproduced by counting projections only.
  bool count_attention_matmul = false;
};

struct ProfileRow {
  std::string name;
  /// Unique parameter elements owned by this row.
  std::int64_t params = 0;
  /// Parameter elements read per training forward (once per round that uses them).
  std::int64_t param_touches = 0;
  /// Inference MACs under the report's convention.
  std::int64_t macs = 0;
  profiling::ScopeStats raw;
  /// The auxiliary head: parameters count, inference MACs do not.
  bool training_only = false;
};

struct ProfileReport {
  std::string variant;
  FeedbackMode mode = FeedbackMode::none;
  std::int64_t height = 0;
  std::int64_t width = 0;
  bool single_round = false;
  ProfileConvention convention;
  std::vector<ProfileRow> rows;
  std::int64_t params_unique = 0;
  std::int64_t params_per_pass = 0;
  std::int64_t macs = 0;

  const ProfileRow* row(const std::string& name) const;
};

/// MACs of a row's raw counts under a convention.
std::int64_t convention_macs(const profiling::ScopeStats& s, const ProfileConvention& c);

/// Symbolic trace of the model (shape-only tensors, no arithmetic) on a
/// 1 x 3 x height x width input. `single_round` stops after round 1.
ProfileReport profile_model(const ModelConfig& cfg, std::int64_t height, std::int64_t width,
                            const ProfileConvention& convention = {}, bool single_round = false);

std::string format_profile_table(const ProfileReport& report);
std::string format_profile_csv(const ProfileReport& report);

// -- finite-difference gradient check ---------------------------------------------

struct GradcheckResult {
  /// max over parameters of max|analytic - numeric| / max|numeric|.
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t checked = 0;
  /// Elements skipped because a ReLU input changed sign even at step / 100.
  std::int64_t skipped = 0;
  std::int64_t params = 0;
  /// Parameter tensors whose every element was skipped.
  std::vector<std::string> unchecked;
};

/// Smallest valid Feedback Former: dims [4,4,8,8], one block per stage,
/// 8 decoder channels, 3 classes, 64-bit.
ModelConfig tiny_model_config(FeedbackMode mode = FeedbackMode::lite);

/// Checks every parameter element of the full two-round training loss
/// (both rounds, auxiliary heads) against central differences.
GradcheckResult gradcheck_model(const ModelConfig& cfg, std::int64_t size, std::uint64_t seed,
                                double step = 3e-3);

}  // namespace fbf
