#include "msae/reml.hpp"

#include "msae/optimizer.hpp"
#include "msae/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace msae {

namespace {

Vector lower_entries(const Matrix& m) {
  const int r = static_cast<int>(m.rows());
  Vector out(r * (r + 1) / 2);
  int k = 0;
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j <= i; ++j) out[k++] = m(i, j);
  }
  return out;
}

Matrix lower_from(int r, const Vector& v, int start) {
  Matrix m = Matrix::Zero(r, r);
  int k = start;
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j <= i; ++j) m(i, j) = v[k++];
  }
  return m;
}

Matrix lower_factor(const Matrix& sigma) {
  Eigen::LLT<Matrix> llt(symmetrize(sigma));
  Matrix l;
  if (llt.info() == Eigen::Success) {
    l = llt.matrixL();
  } else {
    const double scale = std::max(1.0, sigma.diagonal().cwiseAbs().maxCoeff());
    Eigen::LLT<Matrix> shifted(project_to_pd(sigma, 1e-12 * scale));
    l = shifted.matrixL();
  }
  for (Eigen::Index i = 0; i < l.rows(); ++i) l(i, i) = std::max(l(i, i), CholeskyParam::kDiagonalFloor);
  return l;
}

// d loglik / d L for Sigma = L L^T given the symmetric-matrix gradient G: 2 G L.
Vector factor_gradient(const Matrix& g, const Matrix& l) { return lower_entries(2.0 * g * l); }

Vector cholesky_gradient(const GlsEvaluation& eval, const CholeskyParam& param) {
  const Vector gu = factor_gradient(eval.grad_sigma_u, param.l_u);
  const Vector ge = factor_gradient(eval.grad_sigma_e, param.l_e);
  Vector out(gu.size() + ge.size());
  out << gu, ge;
  return out;
}

bool at_boundary(const CholeskyParam& param) {
  for (Eigen::Index i = 0; i < param.l_u.rows(); ++i) {
    if (param.l_u(i, i) <= CholeskyParam::kDiagonalFloor * (1.0 + 1e-6)) return true;
  }
  return false;
}

VarianceComponents perturbed(const VarianceComponents& base, std::uint64_t seed, int attempt) {
  std::mt19937_64 rng(derive_seed(seed, 0x9e3779b9ULL, static_cast<std::uint64_t>(attempt)));
  std::normal_distribution<double> normal(0.0, 0.5);
  std::uniform_real_distribution<double> shrink(0.3, 1.0);
  VarianceComponents out = base;
  for (Matrix* m : {&out.sigma_u, &out.sigma_e}) {
    Vector scale(m->rows());
    for (Eigen::Index i = 0; i < scale.size(); ++i) scale[i] = std::exp(normal(rng));
    const double factor = shrink(rng);
    Matrix next = *m;
    for (Eigen::Index i = 0; i < m->rows(); ++i) {
      for (Eigen::Index j = 0; j < m->cols(); ++j) {
        const double root = std::sqrt(scale[i] * scale[j]);
        next(i, j) = (i == j) ? (*m)(i, j) * scale[i] : (*m)(i, j) * root * factor;
      }
    }
    *m = next;
  }
  return out;
}

}  // namespace

CholeskyParam CholeskyParam::from_components(const VarianceComponents& vc) {
  return CholeskyParam{lower_factor(vc.sigma_u), lower_factor(vc.sigma_e)};
}

VarianceComponents CholeskyParam::components() const {
  return VarianceComponents{l_u * l_u.transpose(), l_e * l_e.transpose()};
}

Vector CholeskyParam::to_vector() const {
  const Vector u = lower_entries(l_u);
  const Vector e = lower_entries(l_e);
  Vector out(u.size() + e.size());
  out << u, e;
  return out;
}

CholeskyParam CholeskyParam::from_vector(int responses, const Vector& v) {
  if (v.size() != size(responses)) throw ValidationError("Cholesky parameter vector has wrong length");
  return CholeskyParam{lower_from(responses, v, 0), lower_from(responses, v, responses * (responses + 1) / 2)};
}

Vector CholeskyParam::lower_bounds(int responses) {
  Vector lower = Vector::Constant(size(responses), -std::numeric_limits<double>::infinity());
  const int half = responses * (responses + 1) / 2;
  int k = 0;
  for (int i = 0; i < responses; ++i) {
    for (int j = 0; j <= i; ++j, ++k) {
      if (i == j) {
        lower[k] = kDiagonalFloor;
        lower[k + half] = kDiagonalFloor;
      }
    }
  }
  return lower;
}

double restricted_loglik(const Dataset& dataset, const VarianceComponents& theta) {
  if (!theta.valid()) throw SingularMatrixError("invalid theta: variance components must be positive definite");
  return MnerSystem(dataset).evaluate(theta, false).loglik;
}

Vector restricted_loglik_gradient(const Dataset& dataset, const CholeskyParam& param) {
  const GlsEvaluation eval = MnerSystem(dataset).evaluate(param.components(), true);
  return cholesky_gradient(eval, param);
}

VarianceComponents moment_initializer(const Dataset& dataset) {
  const BlockLayout& layout = dataset.layout();
  const int responses = layout.responses();
  const auto areas = dataset.all_areas();

  std::vector<Matrix> residuals;
  residuals.reserve(areas.size());
  for (const AreaSample& a : areas) residuals.push_back(a.y);
  for (int r = 0; r < responses; ++r) {
    const int pr = layout.size(r);
    Matrix xtx = Matrix::Zero(pr, pr);
    Vector xty = Vector::Zero(pr);
    for (const AreaSample& a : areas) {
      const auto xr = a.x.middleCols(layout.offset(r), pr);
      xtx += xr.transpose() * xr;
      xty += xr.transpose() * a.y.col(r);
    }
    SymmetricSolver solver;
    try {
      solver.compute(xtx, "OLS");
    } catch (const SingularMatrixError&) {
      throw SingularMatrixError("rank-deficient normal equations: covariate block of response " + std::to_string(r + 1) +
                                " is collinear");
    }
    const Vector coef = solver.solve(xty);
    for (std::size_t d = 0; d < areas.size(); ++d) {
      residuals[d].col(r) -= areas[d].x.middleCols(layout.offset(r), pr) * coef;
    }
  }

  const double n = static_cast<double>(dataset.total_units());
  const double areas_count = static_cast<double>(areas.size());
  Matrix within = Matrix::Zero(responses, responses);
  Matrix means(static_cast<Eigen::Index>(areas.size()), responses);
  double inverse_n = 0.0;
  for (std::size_t d = 0; d < areas.size(); ++d) {
    const Eigen::RowVectorXd mean = residuals[d].colwise().mean();
    means.row(static_cast<Eigen::Index>(d)) = mean;
    const Matrix centered = residuals[d].rowwise() - mean;
    within += centered.transpose() * centered;
    inverse_n += 1.0 / areas[d].units();
  }
  within /= (n - areas_count);
  inverse_n /= areas_count;
  const Matrix centered_means = means.rowwise() - means.colwise().mean();
  const Matrix between = centered_means.transpose() * centered_means / std::max(1.0, areas_count - 1.0);

  const double scale_e = std::max(within.diagonal().maxCoeff(), 1e-12);
  VarianceComponents vc;
  vc.sigma_e = project_to_pd(within, 1e-6 * scale_e);

  Matrix candidate = between - vc.sigma_e * inverse_n;
  for (int r = 0; r < responses; ++r) candidate(r, r) = std::max(candidate(r, r), 0.1 * vc.sigma_e(r, r));
  for (int r = 0; r < responses; ++r) {
    for (int s = 0; s < responses; ++s) {
      if (r == s) continue;
      const double bound = 0.95 * std::sqrt(candidate(r, r) * candidate(s, s));
      candidate(r, s) = std::clamp(candidate(r, s), -bound, bound);
    }
  }
  vc.sigma_u = project_to_pd(candidate, 1e-6 * candidate.diagonal().maxCoeff());
  return vc;
}

FittedModel fit_reml(const Dataset& dataset, const RemlOptions& options) {
  if (options.gradient_tolerance <= 0.0 || options.step_tolerance <= 0.0) {
    throw ValidationError("REML tolerances must be strictly positive");
  }
  if (dataset.areas() < 2) throw ValidationError("REML needs at least two areas");
  if (static_cast<int>(dataset.total_units()) <= dataset.covariates()) {
    throw ValidationError("REML needs more sampled units than covariates");
  }
  const int responses = dataset.responses();
  const MnerSystem system(dataset);

  VarianceComponents start;
  if (options.initializer == Initializer::given) {
    if (!options.initial) throw ValidationError("initializer 'given' requires an initial theta");
    start = *options.initial;
  } else {
    start = moment_initializer(dataset);
  }

  const Vector lower = CholeskyParam::lower_bounds(responses);
  const Objective objective = [&](const Vector& x, Vector& grad) {
    const CholeskyParam param = CholeskyParam::from_vector(responses, x);
    const GlsEvaluation eval = system.evaluate(param.components(), true);
    grad = -cholesky_gradient(eval, param);
    return -eval.loglik;
  };
  const BfgsOptions bfgs{options.max_iterations, options.gradient_tolerance, options.step_tolerance};

  BfgsResult best;
  bool have_best = false;
  double start_value = 0.0;
  for (int attempt = 0; attempt <= options.restarts; ++attempt) {
    const VarianceComponents init = attempt == 0 ? start : perturbed(start, options.seed, attempt);
    BfgsResult result = minimize_bfgs(objective, CholeskyParam::from_components(init).to_vector(), lower, bfgs);
    if (attempt == 0) start_value = result.initial_value;
    if (!have_best || result.value < best.value) {
      best = result;
      have_best = true;
    }
    if (result.converged) break;
  }

  const CholeskyParam param = CholeskyParam::from_vector(responses, best.x);
  ConvergenceRecord record;
  record.iterations = best.iterations;
  record.evaluations = best.evaluations;
  record.gradient_norm = best.projected_gradient_norm;
  record.loglik = -best.value;
  record.initial_loglik = -start_value;
  record.converged = best.converged;
  record.boundary = at_boundary(param);
  const VarianceComponents theta = param.components();
  if (!best.converged) {
    throw ConvergenceError("REML did not converge: projected gradient norm " + std::to_string(best.projected_gradient_norm) +
                               " after " + std::to_string(best.iterations) + " iterations",
                           theta, record);
  }

  FittedModel fitted;
  fitted.theta = theta;
  fitted.beta = system.evaluate(theta, false).beta;
  fitted.coefficient_method = CoefficientMethod::wls;
  fitted.convergence = record;
  return fitted;
}

}  // namespace msae
