#pragma once

#include <stdexcept>
#include <string>

namespace mwm {

// Invalid problem statement or malformed input. CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical breakdown: degenerate geometry, failed factorization, integration
// failure. CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// No feasible point could be produced. CLI maps this to exit code 4.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mwm
