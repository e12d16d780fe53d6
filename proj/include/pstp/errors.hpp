#pragma once

#include <stdexcept>
#include <string>

namespace pstp {

// Error taxonomy. The CLI maps these onto process exit codes:
//   ConfigError -> 2, DataError -> 3, NumericalError -> 4.

// Invalid configuration: bad field values, incompatible dimensions,
// malformed config files.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatch between tensors handed to an op.
struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};

// Problems with stored artifacts (bundles, datasets, checkpoints).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Container-level failures, kept distinct so callers and tests can tell
// them apart.
struct BadMagicError : DataError {
  using DataError::DataError;
};
struct VersionMismatchError : DataError {
  using DataError::DataError;
};
struct TruncatedPayloadError : DataError {
  using DataError::DataError;
};
struct DimMismatchError : DataError {
  using DataError::DataError;
};

// Non-finite values where finite ones are required (e.g. NaN loss).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pstp
