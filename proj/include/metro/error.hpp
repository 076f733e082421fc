// SPDX-License-Identifier: Apache-2.0
#ifndef METRO_ERROR_HPP
#define METRO_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace metro {

enum class ErrorCode {
  kEmptyInput,
  kUnbalancedBracket,
  kInvalidCharacter,
  kEmptyList,
  kEmptyComponent,
  kMalformedLine,
  kMultiProduct,
  kSelfLoop,
  kTargetUnreachable,
  kTargetIsStartingMaterial,
  kSchemaMismatch,
  kIoFailure,
  kShapeMismatch,
  kNonFiniteValue,
  kNonFiniteLoss,
  kSequenceTooLong,
  kUnknownToken,
  kNoCompleteCandidate,
  kNoPlanFound,
  kInvalidTarget,
  kMissingTarget,
  kInvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kUnbalancedBracket: return "UnbalancedBracket";
    case ErrorCode::kInvalidCharacter: return "InvalidCharacter";
    case ErrorCode::kEmptyList: return "EmptyList";
    case ErrorCode::kEmptyComponent: return "EmptyComponent";
    case ErrorCode::kMalformedLine: return "MalformedLine";
    case ErrorCode::kMultiProduct: return "MultiProduct";
    case ErrorCode::kSelfLoop: return "SelfLoop";
    case ErrorCode::kTargetUnreachable: return "TargetUnreachable";
    case ErrorCode::kTargetIsStartingMaterial: return "TargetIsStartingMaterial";
    case ErrorCode::kSchemaMismatch: return "SchemaMismatch";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonFiniteValue: return "NonFiniteValue";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kUnknownToken: return "UnknownToken";
    case ErrorCode::kNoCompleteCandidate: return "NoCompleteCandidate";
    case ErrorCode::kNoPlanFound: return "NoPlanFound";
    case ErrorCode::kInvalidTarget: return "InvalidTarget";
    case ErrorCode::kMissingTarget: return "MissingTarget";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Exception carrying a machine-checkable error code. The message is
/// prefixed with the code name.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string &detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace metro

#endif  // METRO_ERROR_HPP
