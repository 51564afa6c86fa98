// Error types shared by every flowvae module.
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace flowvae {

enum class ErrorCode {
  MissingColumn,
  BadTimestamp,
  BadNumber,
  InvariantViolation,
  Io,
  EmptyHistogram,
  EmptyDataset,
  EmptyInput,
  DimensionMismatch,
  ShapeMismatch,
  StaleTape,
  NonFiniteGradient,
  NonFiniteActivation,
  NonFiniteLoss,
  VersionMismatch,
  CorruptFile,
  FeatureListMismatch,
  KindMismatch,
  AllZeroGradients,
  ZeroGradient,
  TooFewPoints,
  LengthMismatch,
  SingleClass,
  EmptyScores,
  InvalidConfig,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::BadTimestamp: return "BadTimestamp";
    case ErrorCode::BadNumber: return "BadNumber";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::Io: return "IoError";
    case ErrorCode::EmptyHistogram: return "EmptyHistogram";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::StaleTape: return "StaleTape";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::FeatureListMismatch: return "FeatureListMismatch";
    case ErrorCode::KindMismatch: return "KindMismatch";
    case ErrorCode::AllZeroGradients: return "AllZeroGradients";
    case ErrorCode::ZeroGradient: return "ZeroGradient";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::EmptyScores: return "EmptyScores";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace flowvae
