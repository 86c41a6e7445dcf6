#include "visreview/error.hpp"

namespace vr {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::KernelLargerThanInput: return "KernelLargerThanInput";
    case ErrorCode::NonPositiveStride: return "NonPositiveStride";
    case ErrorCode::UnknownKind: return "UnknownKind";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidRate: return "InvalidRate";
    case ErrorCode::NotOneHot: return "NotOneHot";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::WindowLargerThanImage: return "WindowLargerThanImage";
    case ErrorCode::NonSquareImage: return "NonSquareImage";
    case ErrorCode::EmptySequence: return "EmptySequence";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::InvalidCounts: return "InvalidCounts";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::CorruptManifest: return "CorruptManifest";
    case ErrorCode::InvalidK: return "InvalidK";
    case ErrorCode::ZeroBaseline: return "ZeroBaseline";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace vr
