// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fmch {

// Every failure the library reports carries one of these codes.  The CLI
// maps them onto exit codes and the machine-readable stderr record.
enum class ErrorCode {
  // volume_store
  BadMagic,
  UnsupportedDatatype,
  TruncatedPayload,
  DimOutOfRange,
  NonFiniteVoxel,
  SchemaViolation,
  SplitLeak,
  MissingFile,
  Io,
  // phantom / masking / model
  ShapeTooSmall,
  UnknownLabel,
  ShapeMismatch,
  SkipsForbiddenInSwapMode,
  // objectives
  EmptyMask,
  SubjectMismatch,
  MissingPairing,
  NonFiniteGradient,
  InvalidWeights,
  // training
  InsufficientImagesPerSubject,
  NonFiniteLoss,
  CorruptCheckpoint,
  ConfigHashMismatch,
  InvalidConfig,
  // finetune_eval
  IncompatibleShape,
  InsufficientLabeledSubjects,
  EmptyInput,
  SingleClassLabels,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string field, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        field_(std::move(field)) {}

  ErrorCode code() const noexcept { return code_; }
  // Name of the offending field, argument or term ("" when not applicable).
  const std::string& field() const noexcept { return field_; }

 private:
  ErrorCode code_;
  std::string field_;
};

}  // namespace fmch
