#include "tfsdiff/error.hpp"

namespace tfsdiff {

std::string_view code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kShape: return "E_SHAPE";
    case ErrorCode::kInvalidArgument: return "E_ARG";
    case ErrorCode::kOutOfRange: return "E_RANGE";
    case ErrorCode::kNonFinite: return "E_NONFINITE";
    case ErrorCode::kIo: return "E_IO";
    case ErrorCode::kFormat: return "E_FORMAT";
    case ErrorCode::kMissingInput: return "E_MISSING";
    case ErrorCode::kConfig: return "E_CONFIG";
    case ErrorCode::kPlugin: return "E_PLUGIN";
  }
  return "E_UNKNOWN";
}

}  // namespace tfsdiff
