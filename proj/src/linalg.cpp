#include "autoiv/linalg.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "autoiv/errors.hpp"

namespace autoiv {

Tensor cholesky_solve(const Tensor& A, const Tensor& B, double ridge) {
  if (A.rows() != A.cols()) throw ContractViolation("cholesky_solve: A not square " + A.shape_str());
  if (B.rows() != A.rows()) {
    throw ContractViolation("cholesky_solve: B " + B.shape_str() + " vs A " + A.shape_str());
  }
  if (!(ridge >= 0.0)) throw ContractViolation("cholesky_solve: ridge must be >= 0");

  Eigen::MatrixXd shifted = A.mat();
  shifted.diagonal().array() += ridge;
  Eigen::LLT<Eigen::MatrixXd> llt(shifted);
  if (llt.info() != Eigen::Success) {
    throw DecompositionError("cholesky_solve: matrix " + A.shape_str() +
                             " is not positive definite (ridge " + std::to_string(ridge) + ")");
  }
  Eigen::MatrixXd x = llt.solve(Eigen::MatrixXd(B.mat()));
  if (!x.allFinite()) throw DecompositionError("cholesky_solve: non-finite solution");
  return Tensor::from_matrix(x);
}

Tensor least_squares(const Tensor& X, const Tensor& y, const char* what) {
  if (X.rows() != y.rows()) {
    throw ContractViolation(std::string(what) + ": design " + X.shape_str() + " vs target " +
                            y.shape_str());
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(X.mat()));
  qr.setThreshold(1e-10);
  if (qr.rank() < static_cast<Eigen::Index>(X.cols())) {
    throw FitError(std::string(what) + ": design matrix is rank deficient (rank " +
                   std::to_string(qr.rank()) + " < " + std::to_string(X.cols()) + ")");
  }
  return Tensor::from_matrix(Eigen::MatrixXd(qr.solve(Eigen::MatrixXd(y.mat()))));
}

Tensor gram(const Tensor& X) {
  Tensor out(X.cols(), X.cols());
  out.mat().noalias() = X.mat().transpose() * X.mat();
  return out;
}

Tensor matmul(const Tensor& A, const Tensor& B) {
  if (A.cols() != B.rows()) {
    throw ContractViolation("matmul shape mismatch " + A.shape_str() + " * " + B.shape_str());
  }
  Tensor out(A.rows(), B.cols());
  out.mat().noalias() = A.mat() * B.mat();
  return out;
}

}  // namespace autoiv
