#pragma once

#include <stdexcept>
#include <string>

namespace emunet {

/// Input has the wrong shape for the operation it was passed to.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Value lies outside the support of a distribution or the domain of a function.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// NaN/Inf appeared where a finite value is required.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SimulatorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace emunet
