#include "msae/mner_core.hpp"

#include "msae/predictors.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace msae {

namespace {

// Block (r, s) of the p x p matrix sum_i X_i^T A X_i equals A(r, s) * xtx(block r, block s).
Matrix weighted_cross(const BlockLayout& layout, const Matrix& a, const Matrix& xtx) {
  const int p = layout.covariates();
  Matrix out(p, p);
  for (int r = 0; r < layout.responses(); ++r) {
    for (int s = 0; s < layout.responses(); ++s) {
      out.block(layout.offset(r), layout.offset(s), layout.size(r), layout.size(s)) =
          a(r, s) * xtx.block(layout.offset(r), layout.offset(s), layout.size(r), layout.size(s));
    }
  }
  return out;
}

// sum_i X_i^T A y_i from x^T y.
Vector weighted_cross_y(const BlockLayout& layout, const Matrix& a, const Matrix& xty) {
  Vector out(layout.covariates());
  for (int r = 0; r < layout.responses(); ++r) {
    out.segment(layout.offset(r), layout.size(r)) = xty.middleRows(layout.offset(r), layout.size(r)) * a.col(r);
  }
  return out;
}

// K_rs = sum_i x_ir^T M_rs x_is = <M_rs, xtx_rs>.
Matrix block_trace(const BlockLayout& layout, const Matrix& m, const Matrix& xtx) {
  const int responses = layout.responses();
  Matrix out(responses, responses);
  for (int r = 0; r < responses; ++r) {
    for (int s = 0; s < responses; ++s) {
      out(r, s) = m.block(layout.offset(r), layout.offset(s), layout.size(r), layout.size(s))
                      .cwiseProduct(xtx.block(layout.offset(r), layout.offset(s), layout.size(r), layout.size(s)))
                      .sum();
    }
  }
  return out;
}

Matrix residual_matrix(const BlockLayout& layout, const AreaSample& area, const Vector& beta) {
  Matrix res = area.y;
  for (int r = 0; r < layout.responses(); ++r) {
    res.col(r).noalias() -= area.x.middleCols(layout.offset(r), layout.size(r)) * beta.segment(layout.offset(r), layout.size(r));
  }
  return res;
}

[[noreturn]] void throw_rank_deficient(const BlockLayout& layout, const Matrix& information) {
  for (int r = 0; r < layout.responses(); ++r) {
    const Matrix block = information.block(layout.offset(r), layout.offset(r), layout.size(r), layout.size(r));
    try {
      SymmetricSolver check(block, "block");
    } catch (const SingularMatrixError&) {
      std::ostringstream os;
      os << "rank-deficient normal equations: covariate block of response " << (r + 1) << " is collinear";
      throw SingularMatrixError(os.str());
    }
  }
  throw SingularMatrixError("rank-deficient normal equations: covariate blocks are jointly collinear");
}

}  // namespace

Matrix AreaDesign::error_covariance(const VarianceComponents& theta) const {
  const int r = theta.responses();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(units) * r, static_cast<Eigen::Index>(units) * r);
  for (int i = 0; i < units; ++i) out.block(i * r, i * r, r, r) = theta.sigma_e;
  return out;
}

Matrix AreaDesign::covariance(const VarianceComponents& theta) const {
  return z * theta.sigma_u * z.transpose() + error_covariance(theta);
}

AreaDesign build_area_design(const Dataset& dataset, std::size_t area) {
  if (area >= dataset.areas()) throw ValidationError("area index out of range");
  const AreaSample& a = dataset.area(area);
  const int r = dataset.responses();
  const int n = a.units();
  AreaDesign out;
  out.units = n;
  out.y.resize(n * r);
  out.x.resize(n * r, dataset.covariates());
  out.z.resize(n * r, r);
  for (int i = 0; i < n; ++i) {
    out.y.segment(i * r, r) = a.y.row(i).transpose();
    out.x.middleRows(i * r, r) = dataset.layout().expand(a.x.row(i));
    out.z.middleRows(i * r, r).setIdentity();
  }
  return out;
}

MnerSystem::MnerSystem(const Dataset& dataset) : dataset_(&dataset) {
  moments_.reserve(dataset.areas());
  for (const AreaSample& a : dataset.all_areas()) {
    AreaMoments m;
    m.units = a.units();
    m.xtx = a.x.transpose() * a.x;
    m.xty = a.x.transpose() * a.y;
    m.xsum = a.x.colwise().sum().transpose();
    m.ysum = a.y.colwise().sum().transpose();
    moments_.push_back(std::move(m));
  }
}

GlsEvaluation MnerSystem::evaluate(const VarianceComponents& theta, bool with_gradient) const {
  const Dataset& data = *dataset_;
  const BlockLayout& layout = data.layout();
  const int responses = layout.responses();
  const int p = layout.covariates();
  const std::size_t areas = data.areas();
  if (theta.responses() != responses) throw ValidationError("theta dimension differs from the number of responses");

  SymmetricSolver sigma_e_solver(theta.sigma_e, "Sigma_e");
  if (!sigma_e_solver.positive_definite()) throw SingularMatrixError("invalid theta: Sigma_e is not positive definite");
  const Matrix a = symmetrize(sigma_e_solver.inverse());
  const double log_det_e = sigma_e_solver.log_determinant();

  std::vector<Matrix> c(areas);
  std::vector<Matrix> sx(areas);
  GlsEvaluation out;
  out.information = Matrix::Zero(p, p);
  Vector score = Vector::Zero(p);
  for (std::size_t d = 0; d < areas; ++d) {
    const AreaMoments& m = moments_[d];
    const Matrix s = theta.sigma_e + m.units * theta.sigma_u;
    SymmetricSolver s_solver(s, "Sigma_e + n_d Sigma_u");
    if (!s_solver.positive_definite()) throw SingularMatrixError("invalid theta: V_ds is not positive definite");
    c[d] = symmetrize(a * theta.sigma_u * s_solver.inverse());
    out.log_det_v += (m.units - 1.0) * log_det_e + s_solver.log_determinant();
    sx[d] = layout.expand(m.xsum.transpose());
    out.information += weighted_cross(layout, a, m.xtx) - sx[d].transpose() * c[d] * sx[d];
    score += weighted_cross_y(layout, a, m.xty) - sx[d].transpose() * (c[d] * m.ysum);
  }
  out.information = symmetrize(out.information);

  SymmetricSolver info_solver;
  try {
    info_solver.compute(out.information, "normal equations");
  } catch (const SingularMatrixError&) {
    throw_rank_deficient(layout, out.information);
  }
  if (!info_solver.positive_definite()) throw_rank_deficient(layout, out.information);
  out.beta = info_solver.solve(score);
  out.log_det_information = info_solver.log_determinant();

  Matrix info_inv;
  if (with_gradient) {
    info_inv = symmetrize(info_solver.inverse());
    out.grad_sigma_u = Matrix::Zero(responses, responses);
    out.grad_sigma_e = Matrix::Zero(responses, responses);
  }

  for (std::size_t d = 0; d < areas; ++d) {
    const AreaMoments& m = moments_[d];
    const Matrix res = residual_matrix(layout, data.area(d), out.beta);
    const Vector rsum = res.colwise().sum().transpose();
    const Matrix rtr = res.transpose() * res;
    out.quadratic += (a * rtr).trace() - rsum.dot(c[d] * rsum);
    if (!with_gradient) continue;

    const double n = m.units;
    const Vector z = a * rsum - n * (c[d] * rsum);
    const Matrix u = a * sx[d] - n * (c[d] * sx[d]);
    const Matrix zpz = n * a - (n * n) * c[d] - u * info_inv * u.transpose();
    out.grad_sigma_u += zpz - z * z.transpose();

    const Matrix k = block_trace(layout, info_inv, m.xtx);
    const Matrix sxh = sx[d] * info_inv * sx[d].transpose();
    const Matrix a_sxh_c = a * sxh * c[d];
    const Matrix w = a * k * a - a_sxh_c - a_sxh_c.transpose() + n * (c[d] * sxh * c[d]);
    const Matrix diag_p = n * a - n * c[d] - w;
    const Matrix a_rr_c = a * rsum * rsum.transpose() * c[d];
    const Matrix qq = a * rtr * a - a_rr_c - a_rr_c.transpose() + n * (c[d] * rsum * rsum.transpose() * c[d]);
    out.grad_sigma_e += diag_p - qq;
  }
  if (with_gradient) {
    out.grad_sigma_u = -0.5 * symmetrize(out.grad_sigma_u);
    out.grad_sigma_e = -0.5 * symmetrize(out.grad_sigma_e);
  }

  const double nr = static_cast<double>(data.total_units()) * responses;
  out.loglik = -0.5 * (out.log_det_v + out.log_det_information + out.quadratic) -
               0.5 * (nr - p) * std::log(2.0 * std::numbers::pi);
  return out;
}

Vector wls_beta(const Dataset& dataset, const VarianceComponents& theta) {
  return MnerSystem(dataset).evaluate(theta, false).beta;
}

AreaEffects predict_area_effects(const Dataset& dataset, const std::vector<AreaAggregates>& aggregates,
                                 const VarianceComponents& theta, const Vector& beta) {
  if (aggregates.size() != dataset.areas()) throw ValidationError("one aggregate per area required");
  const BlockLayout& layout = dataset.layout();
  AreaEffects out;
  out.area_effects.reserve(dataset.areas());
  out.residuals.reserve(dataset.areas());
  for (std::size_t d = 0; d < dataset.areas(); ++d) {
    const AreaAggregates& agg = aggregates[d];
    const Matrix gamma = gamma_dw(theta, agg.k2);
    const Vector effect = gamma * (agg.ybar - layout.apply(agg.xbar.transpose(), beta));
    Matrix res = residual_matrix(layout, dataset.area(d), beta);
    res.rowwise() -= effect.transpose();
    out.area_effects.push_back(effect);
    out.residuals.push_back(std::move(res));
  }
  return out;
}

}  // namespace msae
