#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace autoiv {

/// A caller broke a documented precondition (shape, range, empty input).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

/// A NaN or infinity showed up where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::ptrdiff_t node = -1)
      : std::runtime_error(what), node_(node) {}

  /// Graph node that produced the bad value, or -1 when not tied to a node.
  std::ptrdiff_t node() const noexcept { return node_; }

 private:
  std::ptrdiff_t node_;
};

/// Cholesky factorization failed (matrix not positive definite after ridge).
class DecompositionError : public std::runtime_error {
 public:
  explicit DecompositionError(const std::string& what) : std::runtime_error(what) {}
};

/// A downstream estimator could not be fitted.
class FitError : public std::runtime_error {
 public:
  explicit FitError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace autoiv
