// SPDX-License-Identifier: Apache-2.0
#include "fmch/error.hpp"

namespace fmch {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::DimOutOfRange: return "DimOutOfRange";
    case ErrorCode::NonFiniteVoxel: return "NonFiniteVoxel";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::SplitLeak: return "SplitLeak";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::Io: return "Io";
    case ErrorCode::ShapeTooSmall: return "ShapeTooSmall";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::SkipsForbiddenInSwapMode: return "SkipsForbiddenInSwapMode";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::SubjectMismatch: return "SubjectMismatch";
    case ErrorCode::MissingPairing: return "MissingPairing";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::InvalidWeights: return "InvalidWeights";
    case ErrorCode::InsufficientImagesPerSubject: return "InsufficientImagesPerSubject";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::ConfigHashMismatch: return "ConfigHashMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IncompatibleShape: return "IncompatibleShape";
    case ErrorCode::InsufficientLabeledSubjects: return "InsufficientLabeledSubjects";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::SingleClassLabels: return "SingleClassLabels";
  }
  return "Unknown";
}

}  // namespace fmch
