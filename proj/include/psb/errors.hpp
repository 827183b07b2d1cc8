// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace psb {

/// Raised when tensor extents are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation would produce NaN/Inf or hits a degenerate
/// normalization (fully masked row, starved slot).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated precondition of a metric or protocol (empty foreground, M > N).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Base of file-format failures; subclasses keep the failure modes distinct.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class HeaderError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Checkpoint contents do not match the requested configuration.
class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or unknown configuration key/value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace psb
