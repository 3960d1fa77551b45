#pragma once

#include "autoiv/tensor.hpp"

namespace autoiv {

/// Solve (A + ridge * I) X = B for symmetric positive-definite A.
/// Throws DecompositionError when the shifted matrix is not positive definite.
Tensor cholesky_solve(const Tensor& A, const Tensor& B, double ridge = 0.0);

/// Least-squares coefficients of y on the columns of X (no implicit
/// intercept). Throws FitError naming `what` when X is rank deficient.
Tensor least_squares(const Tensor& X, const Tensor& y, const char* what);

/// Gram matrix X^T X.
Tensor gram(const Tensor& X);
/// Plain matrix product.
Tensor matmul(const Tensor& A, const Tensor& B);

}  // namespace autoiv
