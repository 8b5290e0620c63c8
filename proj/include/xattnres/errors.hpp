#pragma once

#include <stdexcept>
#include <string>

namespace xattnres {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is out of range or unsupported.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an API precondition (e.g. backward on a consumed graph).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed (labels out of range, corrupt files, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace xattnres
