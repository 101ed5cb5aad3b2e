#pragma once

#include <stdexcept>
#include <string>

namespace rep {

// Each error class maps onto one CLI exit code (see tools/rep.cpp).

/// Invalid configuration or malformed shapes supplied by the caller.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid input data (out-of-range labels, wrong grid size, bad files).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Persisted state disagrees with the requested configuration.
class StateMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or Inf produced during a forward or backward pass.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Broken internal contract (e.g. a hook changed the token layout).
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace rep
