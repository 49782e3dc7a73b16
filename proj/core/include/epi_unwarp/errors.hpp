#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace epi {

enum class ErrorKind {
  Io,
  BadMagic,
  UnsupportedDatatype,
  TruncatedData,
  VersionMismatch,
  GridMismatch,
  GridTooSmall,
  DegenerateVolume,
  NonInvertibleField,
  EmptyMask,
  DegenerateIntensity,
  DegenerateSample,
  ShapeMismatch,
  IndivisibleExtent,
  NonFiniteGradient,
  NonFiniteLoss,
  SpecInvalid,
  TooFewSubjects,
  InvalidArgument,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries a kind so callers (and the
/// CLI exit-code mapping) can dispatch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void raise(ErrorKind kind, const std::string& message);

}  // namespace epi
