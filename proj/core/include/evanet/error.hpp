#pragma once

#include <stdexcept>
#include <string>

namespace evanet {

// Base class for everything thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape / dimension disagreement. Message names both shapes.
struct ShapeError : Error {
  using Error::Error;
};

// Numeric domain violation (log of a negative, non-finite input, ...).
struct DomainError : Error {
  using Error::Error;
};

// Malformed on-disk data. Message carries the byte offset where parsing failed.
struct ParseError : Error {
  using Error::Error;
};

// Filesystem-level failure (missing file, short write, ...).
struct IoError : Error {
  using Error::Error;
};

}  // namespace evanet
