#pragma once

#include <stdexcept>
#include <string>

namespace ecl {

/// Shapes or axis lengths that do not line up.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Out-of-range hyperparameter or argument value.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Caller violated a documented precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Input data failed validation (e.g. a target row that is not a distribution).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct LookupError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// Batch statistics cannot be formed (train-mode batch norm on one sample).
struct DegenerateBatchError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct AlignmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ecl
