#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlmp/common.hpp"

namespace mlmp {

inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read input for digest: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return hex64(fnv1a64(buf.str()));
}

// Provenance record written next to every state-producing output, before the
// work starts (end timestamp filled in on completion).
struct RunManifest {
  std::string command_line;
  std::string config_hash;
  std::vector<uint64_t> seeds;
  std::vector<std::pair<std::string, std::string>> input_digests;  // (path, digest)
  std::string tool_version = kVersion;
  std::string started_at;
  std::string finished_at;
};

namespace detail {

inline std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

inline RunManifest make_manifest(const std::vector<std::string>& args,
                                 const std::string& config_text,
                                 std::vector<uint64_t> seeds,
                                 const std::vector<std::string>& input_paths) {
  RunManifest m;
  std::ostringstream cmd;
  for (size_t i = 0; i < args.size(); ++i) cmd << (i ? " " : "") << args[i];
  m.command_line = cmd.str();
  m.config_hash = hex64(fnv1a64(config_text));
  m.seeds = std::move(seeds);
  for (const auto& path : input_paths) m.input_digests.emplace_back(path, file_digest(path));
  m.started_at = detail::iso_timestamp();
  return m;
}

inline void write_manifest(const RunManifest& m, const std::string& path) {
  nlohmann::json j;
  j["command_line"] = m.command_line;
  j["config_hash"] = m.config_hash;
  j["seeds"] = m.seeds;
  j["tool_version"] = m.tool_version;
  j["started_at"] = m.started_at;
  j["finished_at"] = m.finished_at;
  auto& inputs = j["inputs"] = nlohmann::json::array();
  for (const auto& [p, digest] : m.input_digests)
    inputs.push_back({{"path", p}, {"digest", digest}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace mlmp
