#pragma once

#include <stdexcept>
#include <string>

namespace made {

// Base for every error raised by the library. The CLI maps the concrete
// category onto a process exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A documented precondition of an API was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or a degenerate numeric configuration (zero-norm cosine).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or unreadable config file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed feature file, manifest or checkpoint.
class DataError : public Error {
 public:
  using Error::Error;
};

inline int exit_code(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const DataError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 4;
  if (dynamic_cast<const DimensionError*>(&e) != nullptr) return 3;
  return 2;
}

}  // namespace made
