#pragma once

#include <stdexcept>
#include <string>

namespace sage {

// Every failure surfaced by the library carries a short machine-readable code
// ("invalid_argument", "non_finite", "stage_mismatch", ...) next to the
// human-readable message. The CLI serializes both on stderr.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

inline void require(bool condition, const char* code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

// Literal messages are only turned into strings on failure.
inline void require(bool condition, const char* code, const char* message) {
  if (!condition) throw Error(code, message);
}

}  // namespace sage
