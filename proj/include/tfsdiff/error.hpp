#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tfsdiff {

/// Failure categories. Each maps to a stable machine-readable code used by
/// the CLI (`E_SHAPE`, `E_RANGE`, ...).
enum class ErrorCode {
  kShape,
  kInvalidArgument,
  kOutOfRange,
  kNonFinite,
  kIo,
  kFormat,
  kMissingInput,
  kConfig,
  kPlugin,
};

std::string_view code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace tfsdiff
