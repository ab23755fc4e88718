#pragma once

#include "msae/aggregate.hpp"
#include "msae/data_model.hpp"

#include <vector>

namespace msae {

/// Explicit stacked matrices of one area under the sample model
/// y_ds = X_ds beta + Z_ds u_d + e_ds. Units are stacked in stored order.
struct AreaDesign {
  int units = 0;
  Vector y;  ///< R n_d
  Matrix x;  ///< R n_d x p
  Matrix z;  ///< R n_d x R, stacked identities

  /// V_eds(theta) = diag(Sigma_e, ..., Sigma_e).
  [[nodiscard]] Matrix error_covariance(const VarianceComponents& theta) const;
  /// V_ds(theta) = Z Sigma_u Z^T + V_eds(theta).
  [[nodiscard]] Matrix covariance(const VarianceComponents& theta) const;
};

[[nodiscard]] AreaDesign build_area_design(const Dataset& dataset, std::size_t area);

/// Unweighted cross-product moments of one area, reused across theta evaluations.
struct AreaMoments {
  double units = 0.0;
  Matrix xtx;   ///< x^T x, p x p
  Matrix xty;   ///< x^T y, p x R
  Vector xsum;  ///< column sums of x
  Vector ysum;  ///< column sums of y
};

/// GLS/REML quantities for a given theta, computed blockwise: V_ds^{-1} is
/// never formed, using V_ds^{-1} = I (x) Sigma_e^{-1} - 1 1^T (x) C_d with
/// C_d = Sigma_e^{-1} Sigma_u (Sigma_e + n_d Sigma_u)^{-1}.
struct GlsEvaluation {
  Vector beta;          ///< WLS estimate for this theta
  Matrix information;   ///< sum_d X_ds^T V_ds^{-1} X_ds
  double log_det_v = 0.0;
  double log_det_information = 0.0;
  double quadratic = 0.0;   ///< sum_d r_ds^T V_ds^{-1} r_ds at beta
  double loglik = 0.0;      ///< restricted log-likelihood including -(nR-p)/2 log(2 pi)
  Matrix grad_sigma_u;      ///< d loglik / d Sigma_u (symmetric-matrix gradient)
  Matrix grad_sigma_e;
};

/// Precomputed view of a dataset for repeated likelihood evaluations.
class MnerSystem {
 public:
  explicit MnerSystem(const Dataset& dataset);

  /// Throws SingularMatrixError when theta is not positive definite or the
  /// normal equations are rank deficient.
  [[nodiscard]] GlsEvaluation evaluate(const VarianceComponents& theta, bool with_gradient) const;

  [[nodiscard]] const Dataset& dataset() const { return *dataset_; }

 private:
  const Dataset* dataset_;
  std::vector<AreaMoments> moments_;
};

/// (sum_d X^T V^{-1} X)^{-1} sum_d X^T V^{-1} y.
[[nodiscard]] Vector wls_beta(const Dataset& dataset, const VarianceComponents& theta);

struct AreaEffects {
  std::vector<Vector> area_effects;  ///< u~_dw per area
  std::vector<Matrix> residuals;     ///< e^_di per area, n_d x R
};

/// u~_dw = Gamma_dw (ybar_dw - Xbar_dw beta) and e^_di = y_di - X_di beta - u~_dw.
[[nodiscard]] AreaEffects predict_area_effects(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                               const VarianceComponents& theta, const Vector& beta);

}  // namespace msae
