#pragma once

#include <stdexcept>
#include <string>

namespace dqnlab {

/// Dimension mismatch between operands (matrices, weights, feature vectors).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration or function parameter outside its admissible domain.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Requested size exceeds what a container or probe supports.
class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A scalar function produced NaN or Inf where a finite value was required.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Regression over a degenerate design (too few or identical abscissae).
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dqnlab
