// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mmfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree (matmul inner dims, elementwise mismatch, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A tensor has the wrong rank for the operation (e.g. non-matrix weight init).
class ShapeError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

/// A layer or encoder configuration violates its invariants.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite input or output where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A forward cache does not belong to the layer/gradients it is used with.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed tensor file or archive manifest.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmfuse
