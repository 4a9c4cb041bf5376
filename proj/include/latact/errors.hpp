#pragma once

#include <stdexcept>
#include <string>

namespace latact {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not line up (matmul inner dims, elementwise ops, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated (non-scalar backward seed,
/// non-rotation matrix input, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents; the message names the offending line where known.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Unknown modality or embodiment name.
class RegistryError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required (diverged training,
/// rejected optimizer step, degenerate objective).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Numerically degenerate geometric input (Gram-Schmidt on near-parallel
/// or near-zero columns).
class DegeneracyError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint container problems: bad magic, version mismatch, checksum.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace latact
