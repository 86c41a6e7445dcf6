#pragma once

#include <stdexcept>
#include <string>

namespace vr {

enum class ErrorCode {
  DimensionMismatch,
  ShapeMismatch,
  KernelLargerThanInput,
  NonPositiveStride,
  UnknownKind,
  EmptyInput,
  InvalidRate,
  NotOneHot,
  NonScalarLoss,
  InvalidConfig,
  WindowLargerThanImage,
  NonSquareImage,
  EmptySequence,
  IndexOutOfRange,
  EmptyDataset,
  LabelOutOfRange,
  OutOfRange,
  InvalidCounts,
  TooFewSamples,
  IoError,
  CorruptManifest,
  InvalidK,
  ZeroBaseline,
  InvalidArgument,
};

const char* to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (tests, the CLI exit-code mapping) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace vr
