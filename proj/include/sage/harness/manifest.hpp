#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include <json.hpp>

namespace sage {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

inline constexpr const char* kManifestName = "manifest.json";

// Record of one pipeline stage: what it consumed (with content hashes), the
// configuration it ran with, and the files it produced.
struct Manifest {
  std::string stage;
  nlohmann::json config;
  std::map<std::string, std::string> inputs;   // artifact directory -> manifest hash
  std::map<std::string, std::string> outputs;  // file name (relative) -> sha256
  nlohmann::json summary;

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

// Hashes each listed output file in dir and writes dir/manifest.json.
Manifest write_manifest(const std::filesystem::path& dir, std::string stage, nlohmann::json config,
                        std::map<std::string, std::string> inputs, const std::vector<std::string>& outputs,
                        nlohmann::json summary = nlohmann::json::object());

// Loads dir/manifest.json, checks the stage name and re-hashes every output.
// Throws Error("stage_mismatch") naming the artifact on any difference.
Manifest verify_stage(const std::filesystem::path& dir, const std::string& expected_stage);

}  // namespace sage
