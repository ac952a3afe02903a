#pragma once

#include <stdexcept>
#include <string>

namespace golf {

// Invalid argument to a numerical routine (non-positive variance, size
// mismatch, non-finite input). Maps to CLI exit code 4.
struct invalid_parameter : std::invalid_argument {
  explicit invalid_parameter(const std::string& msg) : std::invalid_argument(msg) {}
};

// Numerical failure at runtime (factorization breakdown, degenerate
// conditional). Maps to CLI exit code 4.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent configuration. Maps to CLI exit code 2.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent input data. Maps to CLI exit code 3.
struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace golf
