#pragma once

#include <stdexcept>
#include <string>

namespace facetalk {

// Base for every error raised by the library. Subclasses let the CLI map
// failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible shapes or dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, invalid numeric arguments.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data (CSV, checkpoints, datasets, images).
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration keys or values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace facetalk
