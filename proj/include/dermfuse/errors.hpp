#pragma once

#include <stdexcept>
#include <string>

namespace dermfuse {

// Common base so callers can catch anything thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer shape disagreement.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A call violated an operation's preconditions.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Object is in the wrong state for the requested operation.
class StateError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf surfaced in a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Data does not match the declared schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Malformed input that could not be parsed.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure.
class IOError : public Error {
 public:
  using Error::Error;
};

// File content is not in a supported encoding.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Serialized artifact has the wrong magic or version.
class VersionError : public Error {
 public:
  using Error::Error;
};

}  // namespace dermfuse
