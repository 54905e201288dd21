#pragma once

#include <stdexcept>
#include <string>

namespace sentinel {

/// Operand extents are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced NaN/Inf or failed to factor.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file or byte stream does not follow the expected layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user configuration (unknown key, missing path, invalid range).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace sentinel
