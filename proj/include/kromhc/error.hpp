#pragma once

#include <stdexcept>
#include <string>

namespace kromhc {

// Base class for every error raised by the library. The subclasses mirror the
// failure categories the CLI maps onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or extents that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or domain violations (log of a non-positive number).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Inputs that violate a mathematical constraint (simplex coefficients).
class ConstraintError : public Error {
 public:
  using Error::Error;
};

// Requests that would exceed a hard size guard (factorial blowup).
class CapacityError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward without a tape, empty ranges, zero byte counts.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration. The message lists every problem found.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad training data, e.g. a token id outside the vocabulary.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace kromhc
