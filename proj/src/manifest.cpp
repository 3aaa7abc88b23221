#include "fbformer/manifest.hpp"

#include <fstream>

#include <json.hpp>

#include "fbformer/config.hpp"

namespace fbf {

std::string manifest_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["config_digest"] = hex64(m.config_digest);
  j["seed"] = m.seed;
  j["artifacts"] = nlohmann::ordered_json::object();
  for (const auto& [role, path] : m.artifacts) j["artifacts"][role] = path;
  j["wall_seconds"] = m.wall_seconds;
  j["tool_version"] = m.tool_version;
  j["exit_status"] = m.exit_status;
  return j.dump(2) + "\n";
}

void write_manifest(const std::string& path, const RunManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path + "'");
  out << manifest_json(m);
}

}  // namespace fbf
