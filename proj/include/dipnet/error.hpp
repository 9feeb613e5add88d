#pragma once

#include <stdexcept>
#include <string>

namespace dipnet {

// Error taxonomy.  ConfigError maps to CLI exit code 1, everything else to 2.
struct Error : std::runtime_error {
  explicit Error(const std::string& m) : std::runtime_error(m) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape: " + m) {}
};

// Raised when a forward or backward pass produces a non-finite value, or when
// training diverges.  Non-finite tensors are never silently propagated.
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric: " + m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config: " + m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io: " + m) {}
};

}  // namespace dipnet
