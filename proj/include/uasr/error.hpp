#pragma once

#include <stdexcept>
#include <string>

namespace uasr {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible with an operation.
struct ShapeError : Error {
  using Error::Error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

// Invalid configuration value; the message names the offending field.
struct ConfigError : Error {
  using Error::Error;
};

// Illegal session/state transition (push after finalize, double finalize).
struct StateError : Error {
  using Error::Error;
};

// A chunk-level label exceeds the predictor class ceiling.
struct LabelError : Error {
  using Error::Error;
};

// An index (class id, token id) is out of range.
struct IndexError : Error {
  using Error::Error;
};

// NaN/Inf detected, or a numeric invariant broke.
struct NumericError : Error {
  using Error::Error;
};

// File I/O and serialization failures; messages carry byte offsets.
struct IoError : Error {
  using Error::Error;
};

}  // namespace uasr
