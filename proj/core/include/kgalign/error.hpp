#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kgalign {

enum class ErrorCode {
  // Input validation.
  kMissingFile,
  kMalformedLine,
  kDuplicateEntityId,
  kRatioSumError,
  kNotOneToOne,
  kEmptySeeds,
  kUnknownEntity,
  kUnknownEntityType,
  kEmptyText,
  kDimensionMismatch,
  kEmptyInput,
  kEmptyPool,
  kEmptyTrainingSet,
  kEmptyCandidateSet,
  kMissingText,
  kNonFiniteMatrix,
  kEmptyGold,
  kKeyMismatch,
  kConfigError,
  kUsageError,
  // Runtime failures.
  kEmbedderFailure,
  kServiceUnreachable,
  kServiceErrorStatus,
  kEmptyGeneration,
  kNonFiniteLoss,
  kNonFiniteScore,
  kNotConverged,
  kIoError,
  kFormatError,
  kLockHeld,
  kStageFailure,
};

std::string_view error_code_name(ErrorCode code);

// Validation errors map to CLI exit code 1, everything else to 2.
bool is_validation_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }
  // The message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

// Carries the 1-based line number of the offending input line.
class MalformedLineError : public Error {
 public:
  MalformedLineError(std::string file, std::size_t line, std::string reason);

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string file_;
  std::size_t line_;
  std::string reason_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace kgalign
