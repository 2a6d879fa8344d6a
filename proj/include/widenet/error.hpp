#pragma once

#include <stdexcept>
#include <string>

namespace widenet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or rank mismatch in a tensor operation.
struct ShapeError : Error {
  using Error::Error;
};

// Misuse of the differentiation tape (non-scalar loss, double backward).
struct TapeError : Error {
  using Error::Error;
};

// NaN/Inf where a finite value is required.
struct NumericError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace widenet
