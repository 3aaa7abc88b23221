#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fbf {

constexpr const char* kToolVersion = "0.1.0";

/// One per CLI invocation, written to <out>/manifest.json.
struct RunManifest {
  std::string command;
  std::uint64_t config_digest = 0;
  std::uint64_t seed = 0;
  /// (role, path) pairs, e.g. ("checkpoint", "run/best.ckpt").
  std::vector<std::pair<std::string, std::string>> artifacts;
  double wall_seconds = 0.0;
  std::string tool_version = kToolVersion;
  int exit_status = 0;
};

std::string manifest_json(const RunManifest& m);
void write_manifest(const std::string& path, const RunManifest& m);

}  // namespace fbf
