#pragma once

#include <stdexcept>
#include <string>

namespace cavl {

// Base class for every error this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// numeric core
struct ShapeMismatch : Error { using Error::Error; };
struct IndexOutOfRange : Error { using Error::Error; };
struct NonScalarLoss : Error { using Error::Error; };
struct TapeConsumed : Error { using Error::Error; };

// model / data
struct LengthMismatch : Error { using Error::Error; };
struct TooManyRois : Error { using Error::Error; };
struct NoMaskedPositions : Error { using Error::Error; };
struct NoMaskablePositions : Error { using Error::Error; };
struct BatchTooSmall : Error { using Error::Error; };
struct NonPositiveRatio : Error { using Error::Error; };
struct EmptyAfterFilter : Error { using Error::Error; };
struct SplitTooSmall : Error { using Error::Error; };

// adapters / training
struct InvalidBottleneck : Error { using Error::Error; };
struct UnknownParameter : Error { using Error::Error; };
struct MissingGradient : Error { using Error::Error; };

// files / config / cli
struct MalformedFile : Error { using Error::Error; };
struct CheckpointVersionMismatch : Error { using Error::Error; };
struct InvalidConfig : Error { using Error::Error; };
struct UsageError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

}  // namespace cavl
