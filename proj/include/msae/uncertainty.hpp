#pragma once

#include "msae/aggregate.hpp"
#include "msae/data_model.hpp"
#include "msae/reml.hpp"
#include "msae/rng.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace msae {

struct MseComponents {
  Matrix g1;
  Matrix g2;
  Matrix total;
};

/// (I - Gamma_dw) Sigma_u, symmetrized.
[[nodiscard]] Matrix g1(const VarianceComponents& theta, double k2);

/// Var((Xbar_d - Gamma Xbar_dw)(beta~_w - beta)) = P Phi P^T with P = Xbar_d - Gamma Xbar_dw (R x p).
[[nodiscard]] Matrix g2(const VarianceComponents& theta, const Matrix& phi, const AreaAggregates& aggregates,
                        const Vector& population_xbar, const BlockLayout& layout);

/// G1 + G2 per area at theta with the given coefficient covariance.
[[nodiscard]] std::vector<MseComponents> analytic_mse(const Dataset& dataset, const VarianceComponents& theta,
                                                      const Matrix& phi);

/// One draw of the sample-unit model at (theta, beta).
struct ModelDraw {
  std::vector<Vector> u;   ///< area effects
  std::vector<Matrix> y;   ///< n_d x R responses
  std::vector<Vector> mu;  ///< Xbar_d beta + u_d
};

/// Draws u_d ~ N(0, Sigma_u) then e_di ~ N(0, Sigma_e) for the sampled units, area by area.
[[nodiscard]] ModelDraw draw_from_model(const Dataset& dataset, const VarianceComponents& theta, const Vector& beta,
                                        Engine& rng);

struct BootstrapConfig {
  int replicates = 200;           ///< B >= 1
  std::uint64_t seed = 0;
  unsigned workers = 1;           ///< 0 = hardware concurrency
  bool refit_theta = true;        ///< false: plug in theta-hat in every replicate
  RemlOptions reml;
};

struct BootstrapResult {
  std::vector<Matrix> mse;  ///< per area, R x R
  int used = 0;
  int retried = 0;
  int dropped = 0;
};

/// Outer products (mu-hat* - mu*)(mu-hat* - mu*)^T of bootstrap replicate `index`;
/// nullopt when the refit failed twice. `retried` is set when the first refit failed.
[[nodiscard]] std::optional<std::vector<Matrix>> bootstrap_replicate(const Dataset& dataset, const FittedModel& fitted,
                                                                     const BootstrapConfig& config, Estimator estimator,
                                                                     std::size_t index, bool* retried = nullptr);

/// Parametric bootstrap MSE of the MPEBLUP (estimator myr) or of the MU predictor
/// (estimator mu; the dataset must already carry calibrated weights).
[[nodiscard]] BootstrapResult bootstrap_mse(const Dataset& dataset, const FittedModel& fitted,
                                            const BootstrapConfig& config, Estimator estimator = Estimator::myr);

/// Copies the per-area matrices into the predictions' mse fields.
void attach_mse(std::vector<AreaPrediction>& predictions, const std::vector<Matrix>& mse, MseSource source);

struct CrossTermCheck {
  std::vector<Matrix> mean;            ///< per area E[(mu~_w - mu~)(mu~ - mu)^T]
  std::vector<Matrix> standard_error;  ///< Monte Carlo s.e. of each entry
};

/// Monte Carlo estimate of the cross term between the coefficient-estimation error
/// and the prediction error of the pseudo-BLUP, at known (theta, beta).
[[nodiscard]] CrossTermCheck mse_cross_term_check(const Dataset& dataset, const VarianceComponents& theta,
                                                  const Vector& beta, int replicates, std::uint64_t seed,
                                                  unsigned workers = 1);

}  // namespace msae
