#include "sage/harness/manifest.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "sage/error.hpp"

namespace sage {

using nlohmann::json;

namespace {

std::string hex(const unsigned char* d, unsigned n) {
  std::ostringstream s;
  for (unsigned i = 0; i < n; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(d[i]);
  return s.str();
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1, "io_error",
          "sha256 failed");
  return hex(digest, len);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), "missing_artifact", "cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  require(out.is_open(), "io_error", "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  require(out.good(), "io_error", "failed writing " + path.string());
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text(path)); }

json Manifest::to_json() const {
  return {{"stage", stage}, {"config", config}, {"inputs", inputs}, {"outputs", outputs}, {"summary", summary}};
}

Manifest Manifest::from_json(const json& j) {
  Manifest m;
  m.stage = j.at("stage").get<std::string>();
  m.config = j.value("config", json::object());
  m.inputs = j.value("inputs", std::map<std::string, std::string>{});
  m.outputs = j.value("outputs", std::map<std::string, std::string>{});
  m.summary = j.value("summary", json::object());
  return m;
}

Manifest write_manifest(const std::filesystem::path& dir, std::string stage, json config,
                        std::map<std::string, std::string> inputs, const std::vector<std::string>& outputs,
                        json summary) {
  Manifest m;
  m.stage = std::move(stage);
  m.config = std::move(config);
  m.inputs = std::move(inputs);
  m.summary = std::move(summary);
  for (const auto& name : outputs) m.outputs[name] = sha256_file(dir / name);
  write_text(dir / kManifestName, m.to_json().dump(1) + "\n");
  return m;
}

Manifest verify_stage(const std::filesystem::path& dir, const std::string& expected_stage) {
  const auto path = dir / kManifestName;
  require(std::filesystem::exists(path), "stage_mismatch", "no manifest in " + dir.string());
  Manifest m = Manifest::from_json(json::parse(read_text(path)));
  require(m.stage == expected_stage, "stage_mismatch",
          dir.string() + " holds a '" + m.stage + "' artifact, expected '" + expected_stage + "'");
  for (const auto& [name, hash] : m.outputs) {
    const auto file = dir / name;
    require(std::filesystem::exists(file), "stage_mismatch", "artifact missing: " + file.string());
    require(sha256_file(file) == hash, "stage_mismatch", "artifact hash mismatch: " + file.string());
  }
  return m;
}

}  // namespace sage
