#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace msenc {

// Failure kinds surfaced by the library. The CLI maps each kind onto an exit
// code through category().
enum class ErrorKind {
  Usage,
  IoError,
  MissingBlob,
  ShapeMismatch,
  VersionUnsupported,
  LengthMismatch,
  RatioInvalid,
  BatchTooSmall,
  SubjectOutOfRange,
  CountTooLarge,
  EmptyMask,
  StaleCache,
  StepOutOfRange,
  NonFiniteGradient,
  NonFiniteLoss,
  AllVerticesExcluded,
  DegenerateComponent,
  MissingEmbedding,
  InvalidArgument,
};

enum class ErrorCategory { Usage = 1, Data = 2, Numeric = 3 };

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return "Usage";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::MissingBlob: return "MissingBlob";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::VersionUnsupported: return "VersionUnsupported";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::RatioInvalid: return "RatioInvalid";
    case ErrorKind::BatchTooSmall: return "BatchTooSmall";
    case ErrorKind::SubjectOutOfRange: return "SubjectOutOfRange";
    case ErrorKind::CountTooLarge: return "CountTooLarge";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::StaleCache: return "StaleCache";
    case ErrorKind::StepOutOfRange: return "StepOutOfRange";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::AllVerticesExcluded: return "AllVerticesExcluded";
    case ErrorKind::DegenerateComponent: return "DegenerateComponent";
    case ErrorKind::MissingEmbedding: return "MissingEmbedding";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

constexpr ErrorCategory category(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
    case ErrorKind::InvalidArgument:
    case ErrorKind::RatioInvalid:
    case ErrorKind::CountTooLarge:
    case ErrorKind::StepOutOfRange:
      return ErrorCategory::Usage;
    case ErrorKind::NonFiniteGradient:
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::DegenerateComponent:
    case ErrorKind::StaleCache:
      return ErrorCategory::Numeric;
    default:
      return ErrorCategory::Data;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind), detail_(detail) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& detail) { throw Error(kind, detail); }

inline void require(bool condition, ErrorKind kind, const std::string& detail) {
  if (!condition) fail(kind, detail);
}

}  // namespace msenc
