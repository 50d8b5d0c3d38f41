#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cordseg {

enum class ErrorKind {
  UnknownOrientation,
  NonPositiveSpacing,
  EmptyMask,
  FileNotFound,
  MalformedHeader,
  UnsupportedDatatype,
  IoFailure,
  GeometryMismatch,
  MissingContrast,
  EmptyCenterline,
  InvalidConfig,
  ShapeMismatch,
  ClassMismatch,
  InvalidStride,
  GridMismatch,
  InsufficientSubjects,
  DivergedLoss,
  LocalizationEmpty,
  UndefinedForEmptyGT,
  EmptyRuns,
  SpecInvalid,
  ExportParityFailure,
  CorruptCheckpoint,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string &what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

} // namespace cordseg
