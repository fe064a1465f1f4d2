#pragma once

#include <stdexcept>
#include <string>

namespace calib {

/// Base class for all toolkit errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor/matrix shapes.
struct DimensionError : Error {
  using Error::Error;
};

/// Invalid configuration value (bin counts, bandwidths, ratios, ...).
struct ConfigError : Error {
  using Error::Error;
};

/// API contract violation (non-scalar loss, double backward, negative gamma).
struct ContractError : Error {
  using Error::Error;
};

/// Invalid input data (failed validation of predictions, labels, ...).
struct InputError : Error {
  using Error::Error;
};

/// Malformed file contents; messages carry the offending line number.
struct ParseError : InputError {
  using InputError::InputError;
};

/// Numerical divergence (NaN gradients, exploding losses).
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace calib
