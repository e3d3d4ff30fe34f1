// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kdcal {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters, specs or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes or label values that violate an operation's contract.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced during a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward on a stale activation cache.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (dataset records, checkpoints).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace kdcal
