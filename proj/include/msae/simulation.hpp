#pragma once

#include "msae/data_model.hpp"
#include "msae/reml.hpp"
#include "msae/rng.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace msae {

struct SimulationDesign {
  int areas = 50;
  int population_size = 500;      ///< N_d, identical across areas
  std::vector<int> sample_sizes;  ///< n_d per area
  VarianceComponents theta;
  Vector beta;
  std::uint64_t seed = 0;

  /// D = 50, N_d = 500, n_d = 5, 10, ..., 25 in blocks of ten areas, bivariate truth.
  [[nodiscard]] static SimulationDesign standard(std::uint64_t seed = 20240601);
  void validate() const;
};

/// Fixed finite population covariates and the SRSWOR sample drawn once from the design seed.
struct SimulationFrame {
  BlockLayout layout;
  std::vector<Matrix> x;               ///< per area, N_d x p concatenated covariate rows
  std::vector<std::vector<int>> sample;  ///< sampled unit indices per area (sorted)
  Dataset sample_dataset;              ///< sampled covariates, weights N_d/n_d, responses zero
};

[[nodiscard]] SimulationFrame build_frame(const SimulationDesign& design);

struct PopulationDraw {
  std::vector<Matrix> y;   ///< per area, N_d x R
  std::vector<Vector> mu;  ///< finite-population means
  std::vector<Vector> u;
};

/// Population responses y = X beta + u_d + e_di for every unit at the design truth.
[[nodiscard]] PopulationDraw generate_population(const SimulationFrame& frame, const SimulationDesign& design,
                                                 Engine& rng);

/// Sample responses of a population draw, ready for the estimators.
[[nodiscard]] Dataset sample_of(const SimulationFrame& frame, const PopulationDraw& population);

/// Percent relative bias and relative root MSE with Monte Carlo-mean denominators.
struct AreaMetric {
  double rb = 0.0;
  double rrmse = 0.0;
};

/// Accumulates estimates and truths over replicates for one estimator.
class MetricAccumulator {
 public:
  MetricAccumulator(std::size_t areas, int responses);
  /// NaN estimates are skipped for that area/response.
  void add(std::size_t area, const Vector& estimate, const Vector& truth);
  [[nodiscard]] AreaMetric metric(std::size_t area, int response) const;
  [[nodiscard]] std::size_t count(std::size_t area, int response) const;

 private:
  int responses_;
  std::vector<double> error_sum_, squared_sum_, truth_sum_;
  std::vector<std::size_t> count_;
};

inline constexpr std::array<Estimator, 4> kExperimentEstimators{Estimator::dir, Estimator::mfh, Estimator::myr,
                                                                Estimator::uyr};

struct GroupRow {
  Estimator estimator = Estimator::dir;
  int response = 0;     ///< 0-based
  int sample_size = 0;  ///< n_d of the group
  double arb = 0.0;     ///< mean |RB| over the group's areas, percent
  double rrmse = 0.0;   ///< mean RRMSE over the group's areas, percent
};

struct AreaSeriesRow {
  AreaLabel area_id = 0;
  int sample_size = 0;
  Estimator estimator = Estimator::dir;
  int response = 0;
  AreaMetric metric;
};

struct ExperimentAOptions {
  int replicates = 1000;
  unsigned workers = 1;
  RemlOptions reml;
};

struct ExperimentAResult {
  std::vector<GroupRow> groups;
  std::vector<AreaSeriesRow> areas;
  int used = 0;
  int dropped = 0;
  int retried = 0;

  [[nodiscard]] const GroupRow& group(Estimator e, int response, int sample_size) const;
};

/// DIR (SRSWOR covariance with fpc), MFH, MYR and UYR over L population replicates.
[[nodiscard]] ExperimentAResult run_experiment_a(const SimulationDesign& design, const ExperimentAOptions& options);

/// Group averages of per-area metrics; exposed for testing metric definitions.
[[nodiscard]] std::vector<GroupRow> group_average(const std::vector<AreaSeriesRow>& rows);

struct ExperimentBOptions {
  int truth_replicates = 1000;  ///< replicates for the Monte Carlo true MSE of the MPEBLUP
  int replicates = 100;         ///< L outer replicates
  int bootstrap = 200;          ///< B per outer replicate
  unsigned workers = 1;
  bool refit_theta = true;
  RemlOptions reml;
};

struct ExperimentBRow {
  AreaLabel area_id = 0;
  int sample_size = 0;
  int response = 0;
  double true_mse = 0.0;
  double bootstrap_mse = 0.0;  ///< mean over outer replicates
  [[nodiscard]] double relative_error() const { return (bootstrap_mse - true_mse) / true_mse; }
};

struct ExperimentBResult {
  std::vector<ExperimentBRow> rows;
  int truth_used = 0;
  int outer_used = 0;
  int dropped = 0;
};

/// Truth run for the MPEBLUP MSE, then L outer replicates of the B-replicate bootstrap.
[[nodiscard]] ExperimentBResult run_experiment_b(const SimulationDesign& design, const ExperimentBOptions& options);

/// Delimited-text renderings.
[[nodiscard]] std::string format_group_table(const std::vector<GroupRow>& rows);
[[nodiscard]] std::string format_area_series(const std::vector<AreaSeriesRow>& rows);
[[nodiscard]] std::string format_experiment_b(const std::vector<ExperimentBRow>& rows);

}  // namespace msae
