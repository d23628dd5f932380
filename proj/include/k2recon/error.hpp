#pragma once

#include <stdexcept>
#include <string>

namespace k2recon {

/// Base for every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape mismatch, non-scalar loss, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Invalid or infeasible configuration (bad acceleration budget, empty loss mask, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// On-disk container failed validation (checksum, shape, truncated file).
class CorruptDataset : public IoError {
 public:
  using IoError::IoError;
};

class UnsupportedVersion : public IoError {
 public:
  using IoError::IoError;
};

/// Non-finite values or a solver that could not make progress.
class NumericalBreakdown : public Error {
 public:
  using Error::Error;
};

}  // namespace k2recon
