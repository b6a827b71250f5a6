#pragma once

#include <stdexcept>
#include <string>

namespace reltopo {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity was produced or supplied.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible file contents.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace reltopo
