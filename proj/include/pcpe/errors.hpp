#pragma once

#include <stdexcept>
#include <string>

namespace pcpe {

// Each error family maps onto one CLI exit code (see tools/pcpe_main.cpp).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between tensors.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by an op, or a diverged training loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff tape (e.g. backward twice on the same graph).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Invalid arguments to a pure function (empty rank lists, all-masked rows).
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed dialogue files, unknown ids, protocol violations in data.
class DataError : public Error {
 public:
  using Error::Error;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

}  // namespace pcpe
