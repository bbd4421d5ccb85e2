#pragma once

#include <stdexcept>
#include <string>

namespace usam {

// Base for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or array shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input values outside their documented domain (NaN, out-of-range ids, ...).
class InvalidValue : public Error {
 public:
  using Error::Error;
};

// Slice filtering left nothing to train or evaluate on.
class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

// Checkpoint and model parameters do not agree.
class IncompatibleCheckpoint : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace usam
