#pragma once

#include <stdexcept>
#include <string>

namespace commvq {

// Raised when a fit cannot proceed (singular normal equations, divergence
// that leaves no usable state, degenerate calibration data). Carries a
// human-readable diagnostic; invalid arguments use std::invalid_argument.
class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

// Raised for malformed or unreadable serialized artifacts.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace commvq
