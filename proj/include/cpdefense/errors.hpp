#pragma once

#include <stdexcept>
#include <string>

namespace cpd {

// Bad or inconsistent configuration (unknown layer, infeasible covering, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input that violates an operation's precondition (shape mismatch, out-of-bounds placement).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerically degenerate input: all-zero matrices, zero-variance functions, empty sets.
class DegenerateInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Cached artifact whose recorded fingerprint no longer matches its inputs.
class StaleArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cpd
