#pragma once

#include <stdexcept>
#include <string>

namespace ddrl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration value. `field` names the offending key.
struct ConfigError : Error {
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field(std::move(field)) {}
  std::string field;
};

struct ArgumentError : Error {
  using Error::Error;
};

struct IndexError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

// A density was requested where none exists (zero-variance step).
struct UndefinedDensityError : Error {
  using Error::Error;
};

struct DegenerateTargetError : Error {
  using Error::Error;
};

// Non-finite value surfaced during optimization.
struct NumericError : Error {
  using Error::Error;
};

struct TransportError : Error {
  using Error::Error;
};

struct TimeoutError : Error {
  using Error::Error;
};

}  // namespace ddrl
