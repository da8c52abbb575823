#include "pcbmerge/error.hpp"

namespace pcbmerge {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::OverlappingOffsets: return "OverlappingOffsets";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DtypeMismatch: return "DtypeMismatch";
    case ErrorCode::MissingTensor: return "MissingTensor";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InfeasibleSupports: return "InfeasibleSupports";
    case ErrorCode::NonFiniteFitness: return "NonFiniteFitness";
    case ErrorCode::FitnessFailure: return "FitnessFailure";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::NonZeroExit: return "NonZeroExit";
    case ErrorCode::UnparsableOutput: return "UnparsableOutput";
  }
  return "Unknown";
}

ErrorCategory error_category(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedHeader:
    case ErrorCode::OverlappingOffsets:
    case ErrorCode::UnsupportedDtype:
    case ErrorCode::IoFailure:
      return ErrorCategory::Io;
    case ErrorCode::NonFiniteFitness:
    case ErrorCode::FitnessFailure:
    case ErrorCode::Timeout:
    case ErrorCode::NonZeroExit:
    case ErrorCode::UnparsableOutput:
      return ErrorCategory::Fitness;
    default:
      return ErrorCategory::Validation;
  }
}

}  // namespace pcbmerge
