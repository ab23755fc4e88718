#pragma once

#include "msae/data_model.hpp"

#include <span>
#include <vector>

namespace msae {

/// Survey-weighted summaries of one area's sample.
struct AreaAggregates {
  Vector ybar;          ///< weighted mean response, length R
  Vector xbar;          ///< weighted mean of concatenated covariate rows, length p
  double weight_total = 0.0;  ///< w_d.
  double k2 = 0.0;            ///< sum w^2 / w_d.^2, in [1/n_d, 1]
};

[[nodiscard]] AreaAggregates aggregate_area(const AreaSample& area);
[[nodiscard]] std::vector<AreaAggregates> aggregate(const Dataset& dataset);

/// Per-area outcome of linear (chi-square distance) calibration.
struct AreaCalibration {
  Vector lambda;                 ///< Lagrange multipliers, constant first
  std::vector<int> constrained;  ///< concatenated covariate columns used as constraints
  Vector weights;                ///< calibrated weights
};

/// Calibrates one area's weights so that sum w~ = N_d and the weighted means of
/// all distinct non-constant covariate columns equal the population means.
/// Throws CalibrationError when the system is singular or a weight turns nonpositive.
[[nodiscard]] AreaCalibration calibrate_area(const AreaSample& area);

/// Joint calibration of every area; returns a dataset with calibrated weights.
[[nodiscard]] Dataset calibrate_weights(const Dataset& dataset);

/// Largest |weighted mean - population mean| over covariates, and |w_d. - N_d| / N_d, over areas.
struct CalibrationGap {
  double mean_gap = 0.0;
  double total_gap = 0.0;
};
[[nodiscard]] CalibrationGap calibration_gap(const Dataset& dataset);

/// sum_d N_d mu_d - [Y_hat + (X - X_hat) beta] for MYR predictions. Zero (to rounding)
/// whenever w_d. = N_d in every area and each response block carries a constant.
[[nodiscard]] Vector benchmark_totals(const Dataset& dataset, const Vector& beta,
                                      std::span<const AreaPrediction> predictions);

}  // namespace msae
