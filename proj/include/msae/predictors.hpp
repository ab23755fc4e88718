#pragma once

#include "msae/aggregate.hpp"
#include "msae/data_model.hpp"
#include "msae/reml.hpp"

#include <optional>
#include <span>
#include <vector>

namespace msae {

/// Design-based covariance estimator of the weighted area mean.
enum class DesignVariance {
  with_replacement,  ///< w_d.^-2 sum w (w - 1) (y - ybar)(y - ybar)^T
  srswor_fpc,        ///< (1 - n_d / N_d) S_d / n_d
};

/// nullopt when the area has a single sampled unit.
[[nodiscard]] std::optional<Matrix> design_covariance(const AreaSample& area, const AreaAggregates& aggregates,
                                                      DesignVariance kind);

/// Hajek direct estimator with its design-based covariance.
[[nodiscard]] std::vector<AreaPrediction> direct_estimator(const Dataset& dataset,
                                                           DesignVariance kind = DesignVariance::with_replacement);

/// Shrinkage matrix Sigma_u (Sigma_u + k2 Sigma_e)^{-1}.
[[nodiscard]] Matrix gamma_dw(const VarianceComponents& theta, double k2);

/// Gamma [ybar_w + (Xbar_d - Xbar_w) beta] + (I - Gamma) Xbar_d beta.
[[nodiscard]] Vector mpbp_area(const Matrix& gamma, const AreaAggregates& aggregates, const Vector& population_xbar,
                               const BlockLayout& layout, const Vector& beta);
/// Equivalent form Xbar_d beta + Gamma (ybar_w - Xbar_w beta).
[[nodiscard]] Vector mpbp_area_shrinkage_form(const Matrix& gamma, const AreaAggregates& aggregates,
                                              const Vector& population_xbar, const BlockLayout& layout, const Vector& beta);

/// Pseudo-best predictor for every area at known (theta, beta).
[[nodiscard]] std::vector<AreaPrediction> mpbp(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                               const VarianceComponents& theta, const Vector& beta,
                                               Estimator tag = Estimator::myr);

struct SurveyWeightedBeta {
  Vector beta;
  Matrix phi;  ///< exact covariance of beta under the model at theta
};

/// Solution of the survey-weighted estimating equation
/// sum_d sum_i w X^T (y - X beta - Gamma (ybar_w - Xbar_w beta)) = 0, with its covariance.
[[nodiscard]] SurveyWeightedBeta beta_w(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                        const VarianceComponents& theta);

/// Same estimator through its projection form: the right-hand side is
/// sum_i w (X_i - Gamma^T Xbar_w)^T y_i, using sum_i w X_i = w_d. Xbar_w.
[[nodiscard]] Vector beta_w_projection_form(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                            const VarianceComponents& theta);

/// REML fit followed by beta_w at theta-hat (coefficient_method = survey_weighted).
[[nodiscard]] FittedModel fit_survey_weighted(const Dataset& dataset, const RemlOptions& options = {});

/// Replaces the coefficients of a REML fit with beta_w and Phi_w.
[[nodiscard]] FittedModel with_survey_weighted_beta(const Dataset& dataset, FittedModel fitted);

/// Multivariate pseudo-EBLUP; requires survey-weighted coefficients.
[[nodiscard]] std::vector<AreaPrediction> mpeblup(const Dataset& dataset, const FittedModel& fitted);

/// Gamma ybar_w + (I - Gamma) Xbar_d beta on calibrated weights (checked to 1e-6).
[[nodiscard]] std::vector<AreaPrediction> unified_predictor(const Dataset& calibrated, const FittedModel& fitted);

/// Univariate pseudo-EBLUP of response r (R = 1 predictions, tag UYR).
[[nodiscard]] std::vector<AreaPrediction> univariate_peblup(const Dataset& dataset, int response,
                                                            const RemlOptions& options = {});

/// Stacks the R univariate pseudo-EBLUPs into R-vectors.
[[nodiscard]] std::vector<AreaPrediction> univariate_peblup_all(const Dataset& dataset, const RemlOptions& options = {});

/// Area-level multivariate Fay-Herriot fit with known error covariances.
struct MfhFit {
  Matrix sigma_u;
  Vector beta;
  std::vector<bool> used;  ///< areas entering the fit
  ConvergenceRecord convergence;
};

/// Area means used as regressors of the area-level model.
enum class MfhRegressor {
  population,       ///< Xbar_d
  sample_weighted,  ///< Xbar_dw
};

/// Smallest eigenvalue below which a direct covariance is treated as unusable.
inline constexpr double kMfhMinEigenvalue = 1e-10;

[[nodiscard]] std::vector<bool> mfh_usable_areas(std::span<const std::optional<Matrix>> direct_cov);

/// REML estimate of Sigma_u (and GLS beta) for ybar_w = Xbar_d beta + u_d + eps_d, Var(eps_d) = direct_cov_d.
[[nodiscard]] MfhFit fit_mfh(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                             std::span<const std::optional<Matrix>> direct_cov, const RemlOptions& options = {},
                             MfhRegressor regressor = MfhRegressor::population);

/// Restricted log-likelihood of the area-level model at sigma_u over the areas in `used`.
[[nodiscard]] double mfh_restricted_loglik(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                           std::span<const std::optional<Matrix>> direct_cov,
                                           const std::vector<bool>& used, const Matrix& sigma_u,
                                           Matrix* gradient = nullptr,
                                           MfhRegressor regressor = MfhRegressor::population);

/// EBLUP at a given sigma_u for the areas in `used`; beta is re-estimated by GLS.
[[nodiscard]] std::vector<AreaPrediction> mfh_predict(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                                      std::span<const std::optional<Matrix>> direct_cov,
                                                      const std::vector<bool>& used, const Matrix& sigma_u,
                                                      MfhRegressor regressor = MfhRegressor::population);

/// fit_mfh + mfh_predict; predictions only for usable areas.
[[nodiscard]] std::vector<AreaPrediction> mfh_eblup(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                                    std::span<const std::optional<Matrix>> direct_cov,
                                                    const RemlOptions& options = {},
                                                    MfhRegressor regressor = MfhRegressor::population);

}  // namespace msae
