#pragma once

#include <stdexcept>
#include <string>

namespace fpcd {

// Shape / axis mismatches between tensors.
struct DimError : std::runtime_error {
  explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated operation precondition (T < 2, empty kernel list, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range indices (labels, bins).
struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad run configuration (unpaired layers, invalid schedule, missing dataset).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf produced during a forward or backward pass.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failures, always carrying the offending path.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fpcd
