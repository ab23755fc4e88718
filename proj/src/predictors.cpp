#include "msae/predictors.hpp"

#include "msae/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace msae {

namespace {

std::string area_message(AreaLabel label, std::string_view what) {
  return "area " + std::to_string(label) + ": " + std::string(what);
}

void check_aggregates(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates) {
  if (aggregates.size() != dataset.areas()) throw ValidationError("aggregates do not match the dataset's areas");
}

Vector lower_entries(const Matrix& m) {
  const int r = static_cast<int>(m.rows());
  Vector out(r * (r + 1) / 2);
  int k = 0;
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j <= i; ++j) out[k++] = m(i, j);
  }
  return out;
}

Matrix lower_from(int r, const Vector& v) {
  Matrix m = Matrix::Zero(r, r);
  int k = 0;
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j <= i; ++j) m(i, j) = v[k++];
  }
  return m;
}

// sum_i w_i X_i^T A X_i over an area, for block-diagonal X_i in compact form.
Matrix weighted_cross(const AreaSample& area, const BlockLayout& layout, const Vector& weights, const Matrix& a) {
  const int p = layout.covariates();
  Matrix out(p, p);
  for (int r = 0; r < layout.responses(); ++r) {
    const auto xr = area.x.middleCols(layout.offset(r), layout.size(r));
    for (int s = 0; s < layout.responses(); ++s) {
      const auto xs = area.x.middleCols(layout.offset(s), layout.size(s));
      out.block(layout.offset(r), layout.offset(s), layout.size(r), layout.size(s)) =
          a(r, s) * (xr.transpose() * weights.asDiagonal() * xs);
    }
  }
  return out;
}

// sum_i w_i X_i^T y_i.
Vector weighted_cross_response(const AreaSample& area, const BlockLayout& layout) {
  Vector out(layout.covariates());
  for (int r = 0; r < layout.responses(); ++r) {
    const auto xr = area.x.middleCols(layout.offset(r), layout.size(r));
    out.segment(layout.offset(r), layout.size(r)) = xr.transpose() * area.weights.cwiseProduct(area.y.col(r));
  }
  return out;
}

std::vector<AreaPrediction> tagged(const Dataset& dataset, std::vector<Vector> mus, Estimator tag) {
  std::vector<AreaPrediction> out;
  out.reserve(mus.size());
  for (std::size_t d = 0; d < mus.size(); ++d) {
    AreaPrediction p;
    p.area_id = dataset.area(d).label;
    p.estimator = tag;
    p.mu = std::move(mus[d]);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

std::optional<Matrix> design_covariance(const AreaSample& area, const AreaAggregates& aggregates, DesignVariance kind) {
  const int n = area.units();
  if (n < 2) return std::nullopt;
  const Matrix centered = area.y.rowwise() - aggregates.ybar.transpose();
  Matrix cov;
  if (kind == DesignVariance::with_replacement) {
    const Vector factor = area.weights.cwiseProduct((area.weights.array() - 1.0).matrix());
    cov = centered.transpose() * factor.asDiagonal() * centered / (aggregates.weight_total * aggregates.weight_total);
  } else {
    const double fraction = static_cast<double>(n) / static_cast<double>(area.population_size);
    const Matrix s = centered.transpose() * centered / (n - 1.0);
    cov = (1.0 - fraction) * s / static_cast<double>(n);
  }
  return symmetrize(cov);
}

std::vector<AreaPrediction> direct_estimator(const Dataset& dataset, DesignVariance kind) {
  std::vector<AreaPrediction> out;
  out.reserve(dataset.areas());
  for (const AreaSample& area : dataset.all_areas()) {
    const AreaAggregates agg = aggregate_area(area);
    AreaPrediction p;
    p.area_id = area.label;
    p.estimator = Estimator::dir;
    p.mu = agg.ybar;
    p.mse = design_covariance(area, agg, kind);
    p.mse_source = p.mse ? MseSource::design : MseSource::none;
    out.push_back(std::move(p));
  }
  return out;
}

Matrix gamma_dw(const VarianceComponents& theta, double k2) {
  if (!(k2 >= 0.0) || !std::isfinite(k2)) throw ValidationError("k2 must be finite and nonnegative");
  const Matrix v = symmetrize(theta.sigma_u + k2 * theta.sigma_e);
  SymmetricSolver solver;
  solver.compute(v, "V_dw");
  // Sigma_u V^{-1} = (V^{-1} Sigma_u)^T
  return solver.solve(Matrix(theta.sigma_u)).transpose();
}

Vector mpbp_area(const Matrix& gamma, const AreaAggregates& aggregates, const Vector& population_xbar,
                 const BlockLayout& layout, const Vector& beta) {
  const Vector synthetic = layout.apply(population_xbar.transpose(), beta);
  const Vector sample = layout.apply(aggregates.xbar.transpose(), beta);
  const Matrix identity = Matrix::Identity(gamma.rows(), gamma.cols());
  return gamma * (aggregates.ybar + synthetic - sample) + (identity - gamma) * synthetic;
}

Vector mpbp_area_shrinkage_form(const Matrix& gamma, const AreaAggregates& aggregates, const Vector& population_xbar,
                                const BlockLayout& layout, const Vector& beta) {
  const Vector synthetic = layout.apply(population_xbar.transpose(), beta);
  const Vector sample = layout.apply(aggregates.xbar.transpose(), beta);
  return synthetic + gamma * (aggregates.ybar - sample);
}

std::vector<AreaPrediction> mpbp(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                 const VarianceComponents& theta, const Vector& beta, Estimator tag) {
  check_aggregates(dataset, aggregates);
  std::vector<Vector> mus;
  mus.reserve(dataset.areas());
  for (std::size_t d = 0; d < dataset.areas(); ++d) {
    const Matrix gamma = gamma_dw(theta, aggregates[d].k2);
    mus.push_back(mpbp_area(gamma, aggregates[d], dataset.area(d).xbar, dataset.layout(), beta));
  }
  return tagged(dataset, std::move(mus), tag);
}

SurveyWeightedBeta beta_w(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                          const VarianceComponents& theta) {
  check_aggregates(dataset, aggregates);
  const BlockLayout& layout = dataset.layout();
  const int p = layout.covariates();
  const int responses = layout.responses();
  const Matrix identity = Matrix::Identity(responses, responses);

  Matrix k = Matrix::Zero(p, p);
  Vector rhs = Vector::Zero(p);
  Matrix middle = Matrix::Zero(p, p);
  for (std::size_t d = 0; d < dataset.areas(); ++d) {
    const AreaSample& area = dataset.area(d);
    const AreaAggregates& agg = aggregates[d];
    const Matrix gamma = gamma_dw(theta, agg.k2);
    const Matrix xbar_w = layout.expand(agg.xbar.transpose());
    const double wt = agg.weight_total;

    k += weighted_cross(area, layout, area.weights, identity) - wt * xbar_w.transpose() * gamma * xbar_w;
    rhs += weighted_cross_response(area, layout) - wt * xbar_w.transpose() * gamma * agg.ybar;

    // B_i = w_i (X_i - Gamma^T Xbar_w); Var = sum_i B_i^T Sigma_e B_i + (sum B_i)^T Sigma_u (sum B_i)
    const Matrix shifted = gamma.transpose() * xbar_w;
    const Vector w2 = area.weights.cwiseAbs2();
    Matrix unit_part = weighted_cross(area, layout, w2, theta.sigma_e);
    const Matrix xw2 = [&] {
      Matrix m = Matrix::Zero(responses, p);
      for (int r = 0; r < responses; ++r) {
        const auto xr = area.x.middleCols(layout.offset(r), layout.size(r));
        m.block(r, layout.offset(r), 1, layout.size(r)) = (xr.transpose() * w2).transpose();
      }
      return m;
    }();
    const double w2sum = w2.sum();
    unit_part -= xw2.transpose() * theta.sigma_e * shifted + shifted.transpose() * theta.sigma_e * xw2;
    unit_part += w2sum * shifted.transpose() * theta.sigma_e * shifted;
    const Matrix total = wt * (identity - gamma.transpose()) * xbar_w;
    middle += unit_part + total.transpose() * theta.sigma_u * total;
  }

  const Eigen::FullPivLU<Matrix> lu(k);
  if (lu.rank() < p || std::abs(lu.rcond()) < kPivotTolerance) {
    throw SingularMatrixError("rank-deficient survey-weighted estimating equation");
  }
  SurveyWeightedBeta out;
  out.beta = lu.solve(rhs);
  const Matrix kinv_middle = lu.solve(symmetrize(middle));
  out.phi = symmetrize(lu.solve(Matrix(kinv_middle.transpose())));
  return out;
}

Vector beta_w_projection_form(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                              const VarianceComponents& theta) {
  check_aggregates(dataset, aggregates);
  const BlockLayout& layout = dataset.layout();
  const int p = layout.covariates();
  Matrix lhs = Matrix::Zero(p, p);
  Vector rhs = Vector::Zero(p);
  for (std::size_t d = 0; d < dataset.areas(); ++d) {
    const AreaSample& area = dataset.area(d);
    const AreaAggregates& agg = aggregates[d];
    const Matrix gamma_t = gamma_dw(theta, agg.k2).transpose();
    const Matrix shifted = gamma_t * layout.expand(agg.xbar.transpose());
    for (int i = 0; i < area.units(); ++i) {
      const Matrix xi = layout.expand(area.x.row(i));
      const Matrix a = area.weights[i] * (xi - shifted);
      lhs += a.transpose() * xi;
      rhs += a.transpose() * area.y.row(i).transpose();
    }
  }
  const Eigen::FullPivLU<Matrix> lu(lhs);
  if (lu.rank() < p) throw SingularMatrixError("rank-deficient survey-weighted estimating equation");
  return lu.solve(rhs);
}

FittedModel with_survey_weighted_beta(const Dataset& dataset, FittedModel fitted) {
  const SurveyWeightedBeta bw = beta_w(dataset, aggregate(dataset), fitted.theta);
  fitted.beta = bw.beta;
  fitted.phi = bw.phi;
  fitted.coefficient_method = CoefficientMethod::survey_weighted;
  return fitted;
}

FittedModel fit_survey_weighted(const Dataset& dataset, const RemlOptions& options) {
  return with_survey_weighted_beta(dataset, fit_reml(dataset, options));
}

std::vector<AreaPrediction> mpeblup(const Dataset& dataset, const FittedModel& fitted) {
  if (fitted.coefficient_method != CoefficientMethod::survey_weighted) {
    throw ValidationError("MPEBLUP needs survey-weighted coefficients");
  }
  return mpbp(dataset, aggregate(dataset), fitted.theta, fitted.beta, Estimator::myr);
}

std::vector<AreaPrediction> unified_predictor(const Dataset& calibrated, const FittedModel& fitted) {
  if (fitted.coefficient_method != CoefficientMethod::survey_weighted) {
    throw ValidationError("MU predictor needs survey-weighted coefficients");
  }
  const CalibrationGap gap = calibration_gap(calibrated);
  if (gap.mean_gap > 1e-6 || gap.total_gap > 1e-6) {
    throw ValidationError("MU predictor requires calibrated weights: covariate mean gap " + std::to_string(gap.mean_gap));
  }
  const auto aggregates = aggregate(calibrated);
  const BlockLayout& layout = calibrated.layout();
  std::vector<Vector> mus;
  mus.reserve(calibrated.areas());
  for (std::size_t d = 0; d < calibrated.areas(); ++d) {
    const Matrix gamma = gamma_dw(fitted.theta, aggregates[d].k2);
    const Vector synthetic = layout.apply(calibrated.area(d).xbar.transpose(), fitted.beta);
    const Matrix identity = Matrix::Identity(gamma.rows(), gamma.cols());
    mus.push_back(gamma * aggregates[d].ybar + (identity - gamma) * synthetic);
  }
  return tagged(calibrated, std::move(mus), Estimator::mu);
}

std::vector<AreaPrediction> univariate_peblup(const Dataset& dataset, int response, const RemlOptions& options) {
  if (response < 0 || response >= dataset.responses()) {
    throw ValidationError("response index " + std::to_string(response + 1) + " out of range");
  }
  const Dataset sub = dataset.response_subset(response);
  auto out = mpeblup(sub, fit_survey_weighted(sub, options));
  for (AreaPrediction& p : out) p.estimator = Estimator::uyr;
  return out;
}

std::vector<AreaPrediction> univariate_peblup_all(const Dataset& dataset, const RemlOptions& options) {
  const int responses = dataset.responses();
  std::vector<Vector> mus(dataset.areas(), Vector(responses));
  for (int r = 0; r < responses; ++r) {
    const auto single = univariate_peblup(dataset, r, options);
    for (std::size_t d = 0; d < single.size(); ++d) mus[d][r] = single[d].mu[0];
  }
  return tagged(dataset, std::move(mus), Estimator::uyr);
}

std::vector<bool> mfh_usable_areas(std::span<const std::optional<Matrix>> direct_cov) {
  std::vector<bool> used(direct_cov.size(), false);
  for (std::size_t d = 0; d < direct_cov.size(); ++d) {
    const auto& cov = direct_cov[d];
    used[d] = cov.has_value() && cov->allFinite() && asymmetry(*cov) <= 1e-10 * (1.0 + cov->cwiseAbs().maxCoeff()) &&
              min_eigenvalue(*cov) >= kMfhMinEigenvalue;
  }
  return used;
}

namespace {

struct MfhArea {
  std::size_t index;
  Matrix x;  // R x p
  Vector y;
  Matrix psi;
};

std::vector<MfhArea> mfh_areas(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                               std::span<const std::optional<Matrix>> direct_cov, const std::vector<bool>& used,
                               MfhRegressor regressor) {
  check_aggregates(dataset, aggregates);
  if (direct_cov.size() != dataset.areas() || used.size() != dataset.areas()) {
    throw ValidationError("direct covariances do not match the dataset's areas");
  }
  std::vector<MfhArea> out;
  for (std::size_t d = 0; d < dataset.areas(); ++d) {
    if (!used[d]) continue;
    if (!direct_cov[d]) throw ValidationError(area_message(dataset.area(d).label, "direct covariance unavailable"));
    const Vector& means = regressor == MfhRegressor::population ? dataset.area(d).xbar : aggregates[d].xbar;
    out.push_back(MfhArea{d, dataset.layout().expand(means.transpose()), aggregates[d].ybar, *direct_cov[d]});
  }
  return out;
}

struct MfhEvaluation {
  Vector beta;
  double loglik = 0.0;
  Matrix gradient;
};

MfhEvaluation mfh_evaluate(const std::vector<MfhArea>& areas, int covariates, const Matrix& sigma_u, bool with_gradient) {
  const int responses = static_cast<int>(sigma_u.rows());
  std::vector<SymmetricSolver> solvers(areas.size());
  Matrix h = Matrix::Zero(covariates, covariates);
  Vector g = Vector::Zero(covariates);
  double log_det_v = 0.0;
  std::vector<Matrix> vinv_x(areas.size());
  for (std::size_t a = 0; a < areas.size(); ++a) {
    solvers[a].compute(symmetrize(sigma_u + areas[a].psi), "area-level covariance");
    if (!solvers[a].positive_definite()) throw SingularMatrixError("area-level covariance not positive definite");
    log_det_v += solvers[a].log_determinant();
    vinv_x[a] = solvers[a].solve(areas[a].x);
    h += areas[a].x.transpose() * vinv_x[a];
    g += vinv_x[a].transpose() * areas[a].y;
  }
  SymmetricSolver info;
  try {
    info.compute(symmetrize(h), "area-level information");
  } catch (const SingularMatrixError&) {
    throw SingularMatrixError("rank-deficient area-level GLS normal equations");
  }
  MfhEvaluation out;
  out.beta = info.solve(g);
  double quadratic = 0.0;
  if (with_gradient) out.gradient = Matrix::Zero(responses, responses);
  const Matrix hinv = with_gradient ? info.inverse() : Matrix();
  for (std::size_t a = 0; a < areas.size(); ++a) {
    const Vector resid = areas[a].y - areas[a].x * out.beta;
    const Vector q = solvers[a].solve(resid);
    quadratic += resid.dot(q);
    if (with_gradient) {
      const Matrix vinv = solvers[a].inverse();
      const Matrix pdd = vinv - vinv_x[a] * hinv * vinv_x[a].transpose();
      out.gradient -= 0.5 * (pdd - q * q.transpose());
    }
  }
  const double dof = static_cast<double>(areas.size()) * responses - covariates;
  out.loglik = -0.5 * (log_det_v + info.log_determinant() + quadratic) - 0.5 * dof * std::log(2.0 * std::numbers::pi);
  if (with_gradient) out.gradient = symmetrize(out.gradient);
  return out;
}

void check_usable_count(const std::vector<MfhArea>& areas, int covariates) {
  if (static_cast<int>(areas.size()) < covariates + 1) {
    throw ValidationError("MFH fit needs at least " + std::to_string(covariates + 1) + " usable areas, found " +
                          std::to_string(areas.size()));
  }
}

}  // namespace

double mfh_restricted_loglik(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                             std::span<const std::optional<Matrix>> direct_cov, const std::vector<bool>& used,
                             const Matrix& sigma_u, Matrix* gradient, MfhRegressor regressor) {
  const auto areas = mfh_areas(dataset, aggregates, direct_cov, used, regressor);
  check_usable_count(areas, dataset.covariates());
  const MfhEvaluation eval = mfh_evaluate(areas, dataset.covariates(), sigma_u, gradient != nullptr);
  if (gradient) *gradient = eval.gradient;
  return eval.loglik;
}

MfhFit fit_mfh(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
               std::span<const std::optional<Matrix>> direct_cov, const RemlOptions& options, MfhRegressor regressor) {
  if (options.gradient_tolerance <= 0.0 || options.step_tolerance <= 0.0) {
    throw ValidationError("REML tolerances must be strictly positive");
  }
  const std::vector<bool> used = mfh_usable_areas(direct_cov);
  const auto areas = mfh_areas(dataset, aggregates, direct_cov, used, regressor);
  const int p = dataset.covariates();
  const int responses = dataset.responses();
  check_usable_count(areas, p);

  // Start: OLS residual covariance of the area means minus the average error covariance.
  Matrix xtx = Matrix::Zero(p, p);
  Vector xty = Vector::Zero(p);
  Matrix psi_mean = Matrix::Zero(responses, responses);
  for (const MfhArea& a : areas) {
    xtx += a.x.transpose() * a.x;
    xty += a.x.transpose() * a.y;
    psi_mean += a.psi;
  }
  psi_mean /= static_cast<double>(areas.size());
  SymmetricSolver ols;
  try {
    ols.compute(xtx, "area-level OLS");
  } catch (const SingularMatrixError&) {
    throw SingularMatrixError("rank-deficient area-level regressors");
  }
  const Vector coef = ols.solve(xty);
  Matrix spread = Matrix::Zero(responses, responses);
  for (const MfhArea& a : areas) {
    const Vector r = a.y - a.x * coef;
    spread += r * r.transpose();
  }
  const double dof = std::max(1.0, static_cast<double>(areas.size()) - static_cast<double>(p) / responses);
  Matrix start = spread / dof - psi_mean;
  for (int r = 0; r < responses; ++r) {
    start(r, r) = std::max(start(r, r), 0.1 * std::max(psi_mean(r, r), 1e-8 * std::abs(spread(r, r) / dof) + 1e-12));
  }
  if (options.initializer == Initializer::given && options.initial) start = options.initial->sigma_u;
  for (int r = 0; r < responses; ++r) {
    for (int s = 0; s < responses; ++s) {
      if (r == s) continue;
      const double bound = 0.95 * std::sqrt(start(r, r) * start(s, s));
      start(r, s) = std::clamp(start(r, s), -bound, bound);
    }
  }
  start = project_to_pd(symmetrize(start), 1e-6 * start.diagonal().maxCoeff());

  const VarianceComponents as_components{start, Matrix::Identity(responses, responses)};
  const Matrix l0 = CholeskyParam::from_components(as_components).l_u;
  Vector lower = CholeskyParam::lower_bounds(responses).head(responses * (responses + 1) / 2);

  const Objective objective = [&](const Vector& x, Vector& grad) {
    const Matrix l = lower_from(responses, x);
    const MfhEvaluation eval = mfh_evaluate(areas, p, l * l.transpose(), true);
    grad = -lower_entries(2.0 * eval.gradient * l);
    return -eval.loglik;
  };
  const BfgsResult result = minimize_bfgs(objective, lower_entries(l0), lower,
                                          BfgsOptions{options.max_iterations, options.gradient_tolerance, options.step_tolerance});
  const Matrix l = lower_from(responses, result.x);

  MfhFit fit;
  fit.sigma_u = l * l.transpose();
  fit.used = used;
  fit.convergence.iterations = result.iterations;
  fit.convergence.evaluations = result.evaluations;
  fit.convergence.gradient_norm = result.projected_gradient_norm;
  fit.convergence.loglik = -result.value;
  fit.convergence.initial_loglik = -result.initial_value;
  fit.convergence.converged = result.converged;
  for (int r = 0; r < responses; ++r) {
    if (l(r, r) <= CholeskyParam::kDiagonalFloor * (1.0 + 1e-6)) fit.convergence.boundary = true;
  }
  if (!result.converged) {
    throw ConvergenceError("MFH REML did not converge: projected gradient norm " +
                               std::to_string(result.projected_gradient_norm),
                           VarianceComponents{fit.sigma_u, Matrix::Zero(responses, responses)}, fit.convergence);
  }
  fit.beta = mfh_evaluate(areas, p, fit.sigma_u, false).beta;
  return fit;
}

std::vector<AreaPrediction> mfh_predict(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                        std::span<const std::optional<Matrix>> direct_cov, const std::vector<bool>& used,
                                        const Matrix& sigma_u, MfhRegressor regressor) {
  const auto areas = mfh_areas(dataset, aggregates, direct_cov, used, regressor);
  if (areas.empty()) return {};
  const Vector beta = mfh_evaluate(areas, dataset.covariates(), sigma_u, false).beta;
  std::vector<AreaPrediction> out;
  out.reserve(areas.size());
  for (const MfhArea& a : areas) {
    SymmetricSolver solver(symmetrize(sigma_u + a.psi), "area-level covariance");
    const Matrix gamma = solver.solve(sigma_u).transpose();
    const Matrix identity = Matrix::Identity(gamma.rows(), gamma.cols());
    AreaPrediction p;
    p.area_id = dataset.area(a.index).label;
    p.estimator = Estimator::mfh;
    p.mu = gamma * a.y + (identity - gamma) * (a.x * beta);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<AreaPrediction> mfh_eblup(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                      std::span<const std::optional<Matrix>> direct_cov, const RemlOptions& options,
                                      MfhRegressor regressor) {
  const MfhFit fit = fit_mfh(dataset, aggregates, direct_cov, options, regressor);
  return mfh_predict(dataset, aggregates, direct_cov, fit.used, fit.sigma_u, regressor);
}

}  // namespace msae
