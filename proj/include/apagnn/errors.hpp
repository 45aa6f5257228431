#pragma once

#include <stdexcept>
#include <string>

namespace apagnn {

// Dimension disagreement between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Caller broke an API precondition (non-scalar backward root, bad label, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid user-facing configuration or hyperparameters.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed dataset, manifest, montage or checkpoint file.
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An operation produced NaN or Inf.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Optimization diverged (non-finite gradient, ...).
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace apagnn
