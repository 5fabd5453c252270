#include "kgalign/error.hpp"

#include <fmt/format.h>

namespace kgalign {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMissingFile: return "MissingFile";
    case ErrorCode::kMalformedLine: return "MalformedLine";
    case ErrorCode::kDuplicateEntityId: return "DuplicateEntityId";
    case ErrorCode::kRatioSumError: return "RatioSumError";
    case ErrorCode::kNotOneToOne: return "NotOneToOne";
    case ErrorCode::kEmptySeeds: return "EmptySeeds";
    case ErrorCode::kUnknownEntity: return "UnknownEntity";
    case ErrorCode::kUnknownEntityType: return "UnknownEntityType";
    case ErrorCode::kEmptyText: return "EmptyText";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kEmptyPool: return "EmptyPool";
    case ErrorCode::kEmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::kEmptyCandidateSet: return "EmptyCandidateSet";
    case ErrorCode::kMissingText: return "MissingText";
    case ErrorCode::kNonFiniteMatrix: return "NonFiniteMatrix";
    case ErrorCode::kEmptyGold: return "EmptyGold";
    case ErrorCode::kKeyMismatch: return "KeyMismatch";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kUsageError: return "UsageError";
    case ErrorCode::kEmbedderFailure: return "EmbedderFailure";
    case ErrorCode::kServiceUnreachable: return "ServiceUnreachable";
    case ErrorCode::kServiceErrorStatus: return "ServiceErrorStatus";
    case ErrorCode::kEmptyGeneration: return "EmptyGeneration";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kNonFiniteScore: return "NonFiniteScore";
    case ErrorCode::kNotConverged: return "NotConverged";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kFormatError: return "FormatError";
    case ErrorCode::kLockHeld: return "LockHeld";
    case ErrorCode::kStageFailure: return "StageFailure";
  }
  return "Unknown";
}

bool is_validation_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMissingFile:
    case ErrorCode::kMalformedLine:
    case ErrorCode::kDuplicateEntityId:
    case ErrorCode::kRatioSumError:
    case ErrorCode::kNotOneToOne:
    case ErrorCode::kEmptySeeds:
    case ErrorCode::kUnknownEntity:
    case ErrorCode::kUnknownEntityType:
    case ErrorCode::kKeyMismatch:
    case ErrorCode::kConfigError:
    case ErrorCode::kUsageError:
      return true;
    default:
      return false;
  }
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(fmt::format("{}: {}", error_code_name(code), message)),
      code_(code),
      detail_(message) {}

MalformedLineError::MalformedLineError(std::string file, std::size_t line,
                                       std::string reason)
    : Error(ErrorCode::kMalformedLine,
            fmt::format("{}:{}: {}", file, line, reason)),
      file_(std::move(file)),
      line_(line),
      reason_(std::move(reason)) {}

void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace kgalign
