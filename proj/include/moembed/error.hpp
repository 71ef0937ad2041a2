#pragma once

#include <stdexcept>
#include <string>

namespace moembed {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined by the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (model layout, routing, schedule, file schema).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied data (empty text, out-of-range token id, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace moembed
