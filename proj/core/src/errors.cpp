#include "epi_unwarp/errors.hpp"

namespace epi {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Io: return "IoError";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorKind::TruncatedData: return "TruncatedData";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::GridMismatch: return "GridMismatch";
    case ErrorKind::GridTooSmall: return "GridTooSmall";
    case ErrorKind::DegenerateVolume: return "DegenerateVolume";
    case ErrorKind::NonInvertibleField: return "NonInvertibleField";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::DegenerateIntensity: return "DegenerateIntensity";
    case ErrorKind::DegenerateSample: return "DegenerateSample";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::IndivisibleExtent: return "IndivisibleExtent";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::SpecInvalid: return "SpecInvalid";
    case ErrorKind::TooFewSubjects: return "TooFewSubjects";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void raise(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace epi
