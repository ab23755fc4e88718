#include "msae/linalg.hpp"

#include "msae/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msae {

SymmetricSolver::SymmetricSolver(const Matrix& a, std::string_view context) { compute(a, context); }

void SymmetricSolver::compute(const Matrix& a, std::string_view context) {
  if (a.rows() != a.cols()) {
    throw SingularMatrixError(std::string(context) + ": matrix is not square");
  }
  size_ = a.rows();
  if (size_ == 0) return;
  if (!a.allFinite()) {
    throw SingularMatrixError(std::string(context) + ": matrix has non-finite entries");
  }
  ldlt_.compute(a);
  if (ldlt_.info() != Eigen::Success) {
    throw SingularMatrixError(std::string(context) + ": factorization failed");
  }
  const Vector pivots = ldlt_.vectorD();
  const double largest = pivots.cwiseAbs().maxCoeff();
  const double smallest = pivots.cwiseAbs().minCoeff();
  if (!(largest > 0.0) || smallest < kPivotTolerance * largest) {
    throw SingularMatrixError(std::string(context) + ": matrix is singular to working precision");
  }
}

Matrix SymmetricSolver::inverse() const {
  return ldlt_.solve(Matrix::Identity(size_, size_));
}

double SymmetricSolver::log_determinant() const {
  const Vector pivots = ldlt_.vectorD();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < pivots.size(); ++i) sum += std::log(pivots[i]);
  return sum;
}

bool SymmetricSolver::positive_definite() const {
  return size_ == 0 || (ldlt_.vectorD().array() > 0.0).all();
}

double asymmetry(const Matrix& m) {
  if (m.rows() != m.cols()) return std::numeric_limits<double>::infinity();
  return (m - m.transpose()).cwiseAbs().maxCoeff();
}

double min_eigenvalue(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

bool is_symmetric_psd(const Matrix& m, double tol) {
  if (m.rows() != m.cols()) return false;
  if (m.size() == 0) return true;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if (asymmetry(m) > tol * scale) return false;
  return min_eigenvalue(m) >= -tol * scale;
}

bool is_positive_definite(const Matrix& m) {
  if (m.rows() != m.cols() || !m.allFinite()) return false;
  if (asymmetry(m) > 1e-10 * std::max(1.0, m.cwiseAbs().maxCoeff())) return false;
  Eigen::LLT<Matrix> llt(symmetrize(m));
  return llt.info() == Eigen::Success;
}

Matrix covariance_factor(const Matrix& m) {
  const Matrix s = symmetrize(m);
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  const Vector roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal();
}

Matrix project_to_pd(const Matrix& m, double floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m));
  const Vector clipped = eig.eigenvalues().cwiseMax(floor);
  return symmetrize(eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose());
}

}  // namespace msae
