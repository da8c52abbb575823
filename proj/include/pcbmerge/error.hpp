#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pcbmerge {

enum class ErrorCode {
  // checkpoint format / file system
  MalformedHeader,
  OverlappingOffsets,
  UnsupportedDtype,
  IoFailure,
  // schema and argument validation
  ShapeMismatch,
  DtypeMismatch,
  MissingTensor,
  SchemaMismatch,
  LengthMismatch,
  ZeroVector,
  InvalidArgument,
  InfeasibleSupports,
  // fitness evaluation
  NonFiniteFitness,
  FitnessFailure,
  Timeout,
  NonZeroExit,
  UnparsableOutput,
};

std::string_view error_code_name(ErrorCode code) noexcept;

// Coarse grouping used for process exit codes.
enum class ErrorCategory { Validation, Io, Fitness };

ErrorCategory error_category(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return error_category(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace pcbmerge
