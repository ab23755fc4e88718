#pragma once

#include <Eigen/Dense>

#include <string>
#include <string_view>

namespace msae {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Relative pivot tolerance used by every symmetric solve in the library.
inline constexpr double kPivotTolerance = 1e-12;

/// LDLT factorization of a symmetric matrix that refuses to continue when a
/// pivot falls below kPivotTolerance relative to the largest one.
class SymmetricSolver {
 public:
  SymmetricSolver() = default;
  SymmetricSolver(const Matrix& a, std::string_view context);

  void compute(const Matrix& a, std::string_view context);

  [[nodiscard]] Matrix solve(const Matrix& b) const { return ldlt_.solve(b); }
  [[nodiscard]] Vector solve(const Vector& b) const { return ldlt_.solve(b); }
  [[nodiscard]] Matrix inverse() const;

  /// log|A|; valid only when all pivots are positive (A positive definite).
  [[nodiscard]] double log_determinant() const;
  [[nodiscard]] bool positive_definite() const;

 private:
  Eigen::LDLT<Matrix> ldlt_;
  Eigen::Index size_ = 0;
};

[[nodiscard]] inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Largest absolute entry of M - M^T.
[[nodiscard]] double asymmetry(const Matrix& m);

/// Smallest eigenvalue of the symmetric part of M.
[[nodiscard]] double min_eigenvalue(const Matrix& m);

/// True when M is symmetric (to tol) with eigenvalues >= -tol * max(1, ||M||).
[[nodiscard]] bool is_symmetric_psd(const Matrix& m, double tol = 1e-10);

/// Cholesky-based check for strict positive definiteness.
[[nodiscard]] bool is_positive_definite(const Matrix& m);

/// Symmetric square root factor F with F F^T = M, tolerating singular PSD input.
[[nodiscard]] Matrix covariance_factor(const Matrix& m);

/// Eigenvalue clipping so every eigenvalue is at least floor.
[[nodiscard]] Matrix project_to_pd(const Matrix& m, double floor);

}  // namespace msae
