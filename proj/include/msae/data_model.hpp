#pragma once

#include "msae/errors.hpp"
#include "msae/linalg.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace msae {

using AreaLabel = std::int64_t;

/// Per-response covariate block sizes p_1..p_R of the block-diagonal design.
///
/// A unit's R x p design matrix X_di = diag(x_di1^T, ..., x_diR^T) is stored
/// compactly as the concatenation (x_di1^T, ..., x_diR^T) of length p.
class BlockLayout {
 public:
  BlockLayout() = default;
  explicit BlockLayout(std::vector<int> sizes);

  [[nodiscard]] int responses() const { return static_cast<int>(sizes_.size()); }
  [[nodiscard]] int covariates() const { return total_; }
  [[nodiscard]] int size(int r) const { return sizes_[static_cast<std::size_t>(r)]; }
  [[nodiscard]] int offset(int r) const { return offsets_[static_cast<std::size_t>(r)]; }
  [[nodiscard]] const std::vector<int>& sizes() const { return sizes_; }

  /// Block-diagonal R x p matrix from a concatenated covariate row.
  [[nodiscard]] Matrix expand(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
  /// X_di beta for a concatenated covariate row.
  [[nodiscard]] Vector apply(const Eigen::Ref<const Eigen::RowVectorXd>& row, const Vector& beta) const;
  /// Response index owning concatenated column j.
  [[nodiscard]] int response_of(int column) const;

  friend bool operator==(const BlockLayout&, const BlockLayout&) = default;

 private:
  std::vector<int> sizes_;
  std::vector<int> offsets_;
  int total_ = 0;
};

/// One sampled unit as supplied by the caller.
struct UnitRecord {
  AreaLabel area_id = 0;
  double weight = 0.0;
  Vector y;                          ///< R responses
  std::vector<Vector> covariates;    ///< x_dir for r = 1..R, lengths p_r
};

/// Population information for one area.
struct AuxRecord {
  AreaLabel area_id = 0;
  std::int64_t population_size = 0;  ///< N_d
  std::vector<Vector> xbar;          ///< population covariate means per response
};

/// Validated sample of one area. Units keep the order in which they were supplied.
struct AreaSample {
  AreaLabel label = 0;
  std::int64_t population_size = 0;
  Vector xbar;        ///< concatenated population means (length p)
  Vector weights;     ///< w_di, length n_d
  Matrix y;           ///< n_d x R
  Matrix x;           ///< n_d x p concatenated covariate rows

  [[nodiscard]] int units() const { return static_cast<int>(weights.size()); }
};

/// Immutable validated survey dataset; areas are indexed densely 0..D-1 in
/// increasing label order. Construct through validate_dataset().
class Dataset {
 public:
  [[nodiscard]] const BlockLayout& layout() const { return layout_; }
  [[nodiscard]] int responses() const { return layout_.responses(); }
  [[nodiscard]] int covariates() const { return layout_.covariates(); }
  [[nodiscard]] std::size_t areas() const { return areas_.size(); }
  [[nodiscard]] std::size_t total_units() const { return total_units_; }
  [[nodiscard]] const AreaSample& area(std::size_t d) const { return areas_[d]; }
  [[nodiscard]] std::span<const AreaSample> all_areas() const { return areas_; }
  [[nodiscard]] std::optional<std::size_t> find_area(AreaLabel label) const;

  /// Copy with new per-area weights (positivity re-checked).
  [[nodiscard]] Dataset with_weights(const std::vector<Vector>& weights) const;
  /// Copy with new per-area n_d x R response matrices.
  [[nodiscard]] Dataset with_responses(const std::vector<Matrix>& responses) const;
  /// Single-response dataset for response index r (0-based).
  [[nodiscard]] Dataset response_subset(int r) const;

  /// Flattened unit records (for writing files).
  [[nodiscard]] std::vector<UnitRecord> unit_records() const;
  [[nodiscard]] std::vector<AuxRecord> aux_records() const;

 private:
  friend Dataset validate_dataset(std::span<const UnitRecord>, std::span<const AuxRecord>);
  friend Dataset make_dataset(BlockLayout, std::vector<AreaSample>);

  BlockLayout layout_;
  std::vector<AreaSample> areas_;
  std::size_t total_units_ = 0;
};

/// Checks every input invariant and builds the dense-indexed dataset.
/// Throws ValidationError naming the area and field on failure.
[[nodiscard]] Dataset validate_dataset(std::span<const UnitRecord> units, std::span<const AuxRecord> aux);

/// Re-validates an existing dataset; the result compares equal to the input.
[[nodiscard]] Dataset validate_dataset(const Dataset& dataset);

/// Builds a dataset from already area-grouped samples (validated).
[[nodiscard]] Dataset make_dataset(BlockLayout layout, std::vector<AreaSample> areas);

bool operator==(const Dataset& a, const Dataset& b);

/// The two R x R covariance matrices of the model.
struct VarianceComponents {
  Matrix sigma_u;
  Matrix sigma_e;

  [[nodiscard]] int responses() const { return static_cast<int>(sigma_u.rows()); }

  /// theta = (variances of u, covariances of u, variances of e, covariances of e),
  /// covariances ordered (1,2), (1,3), ..., (R-1,R).
  [[nodiscard]] Vector theta() const;
  [[nodiscard]] static VarianceComponents from_theta(int responses, const Vector& theta);
  [[nodiscard]] static int theta_size(int responses) { return responses * (responses + 1); }

  /// Both matrices symmetric positive definite.
  [[nodiscard]] bool valid() const;
};

enum class CoefficientMethod { wls, survey_weighted };

struct ConvergenceRecord {
  int iterations = 0;
  int evaluations = 0;
  double gradient_norm = 0.0;
  double loglik = 0.0;
  double initial_loglik = 0.0;
  bool converged = false;
  bool boundary = false;  ///< a diagonal of chol(Sigma_u) sits at the 1e-8 floor
};

struct FittedModel {
  VarianceComponents theta;
  Vector beta;
  std::optional<Matrix> phi;  ///< covariance of the survey-weighted coefficients
  std::string fit_method = "REML";
  CoefficientMethod coefficient_method = CoefficientMethod::wls;
  ConvergenceRecord convergence;
};

enum class Estimator { dir, myr, mu, uyr, mfh };
enum class MseSource { analytic, bootstrap, design, none };

[[nodiscard]] std::string_view to_string(Estimator e);
[[nodiscard]] std::string_view to_string(MseSource s);
[[nodiscard]] Estimator parse_estimator(std::string_view name);
[[nodiscard]] MseSource parse_mse_source(std::string_view name);

struct AreaPrediction {
  AreaLabel area_id = 0;
  Estimator estimator = Estimator::dir;
  Vector mu;
  std::optional<Matrix> mse;
  MseSource mse_source = MseSource::none;
};

/// Known combination vector a for delta_d = a^T mu_d.
class LinearCombination {
 public:
  explicit LinearCombination(Vector a);
  [[nodiscard]] const Vector& coefficients() const { return a_; }

 private:
  Vector a_;
};

struct ScalarPrediction {
  AreaLabel area_id = 0;
  Estimator estimator = Estimator::dir;
  double value = 0.0;
  std::optional<double> mse;
  MseSource mse_source = MseSource::none;
};

/// a^T mu_d, with MSE a^T M a when the prediction carries an MSE matrix.
[[nodiscard]] ScalarPrediction apply(const LinearCombination& combination, const AreaPrediction& prediction);

}  // namespace msae
