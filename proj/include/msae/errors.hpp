#pragma once

#include <stdexcept>
#include <string>

namespace msae {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data violates a documented invariant (shapes, weights, area sets).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A linear system that must be solved is singular or numerically rank deficient.
class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

/// Weight calibration is infeasible for some area.
class CalibrationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// File could not be read, parsed or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace msae
