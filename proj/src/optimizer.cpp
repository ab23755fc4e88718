#include "msae/optimizer.hpp"

#include "msae/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msae {

namespace {

Vector project(const Vector& x, const Vector& lower) { return x.cwiseMax(lower); }

// Coordinates pinned at their bound with the gradient pushing outward.
std::vector<bool> active_set(const Vector& x, const Vector& g, const Vector& lower) {
  std::vector<bool> active(static_cast<std::size_t>(x.size()), false);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (std::isfinite(lower[i]) && x[i] <= lower[i] * (1.0 + 1e-12) + 1e-300 && g[i] > 0.0) {
      active[static_cast<std::size_t>(i)] = true;
    }
  }
  return active;
}

Vector masked(const Vector& v, const std::vector<bool>& active) {
  Vector out = v;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (active[static_cast<std::size_t>(i)]) out[i] = 0.0;
  }
  return out;
}

}  // namespace

BfgsResult minimize_bfgs(const Objective& objective, const Vector& start, const Vector& lower, const BfgsOptions& options) {
  const Eigen::Index n = start.size();
  BfgsResult result;
  result.x = project(start, lower);
  Vector grad(n);
  result.value = objective(result.x, grad);
  result.initial_value = result.value;
  result.evaluations = 1;
  if (!std::isfinite(result.value) || !grad.allFinite()) throw Error("objective is not finite at the starting point");

  Matrix inv_hessian = Matrix::Identity(n, n);
  bool scaled = false;
  Vector trial_grad(n);

  for (result.iterations = 0; result.iterations < options.max_iterations; ++result.iterations) {
    std::vector<bool> active = active_set(result.x, grad, lower);
    const Vector pg = masked(grad, active);
    result.projected_gradient_norm = pg.norm();
    if (result.projected_gradient_norm < options.gradient_tolerance) {
      result.converged = true;
      return result;
    }

    Matrix h = inv_hessian;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (active[static_cast<std::size_t>(i)]) {
        h.row(i).setZero();
        h.col(i).setZero();
      }
    }
    Vector direction = -(h * pg);
    if (direction.dot(pg) >= 0.0 || !direction.allFinite()) {
      inv_hessian.setIdentity();
      scaled = false;
      direction = -pg;
    }
    if (!scaled) {
      // Unscaled first step: keep the trial move modest relative to x.
      const double limit = 0.1 * std::max(1.0, result.x.norm());
      const double len = direction.norm();
      if (len > limit) direction *= limit / len;
    }

    double step = 1.0;
    Vector trial;
    double trial_value = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int attempt = 0; attempt < 60; ++attempt) {
      trial = project(result.x + step * direction, lower);
      const double decrease = grad.dot(trial - result.x);
      try {
        trial_value = objective(trial, trial_grad);
        ++result.evaluations;
      } catch (const Error&) {
        trial_value = std::numeric_limits<double>::infinity();
      }
      if (!std::isfinite(trial_value) || !trial_grad.allFinite()) {
        step *= 0.5;
        continue;
      }
      if (trial_value <= result.value + 1e-4 * decrease) {
        accepted = true;
        break;
      }
      // flat to rounding: accept when the projected gradient shrinks
      const double noise = 1e-12 * (1.0 + std::abs(result.value));
      if (trial_value <= result.value + noise &&
          masked(trial_grad, active_set(trial, trial_grad, lower)).norm() < 0.9 * result.projected_gradient_norm) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (scaled) {
        inv_hessian.setIdentity();
        scaled = false;
        continue;
      }
      break;
    }

    const Vector s = trial - result.x;
    const Vector y = trial_grad - grad;
    const double previous = result.value;
    result.x = trial;
    result.value = trial_value;
    grad = trial_grad;

    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        inv_hessian = Matrix::Identity(n, n) * (sy / y.squaredNorm());
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Matrix identity = Matrix::Identity(n, n);
      inv_hessian = (identity - rho * s * y.transpose()) * inv_hessian * (identity - rho * y * s.transpose()) +
                    rho * s * s.transpose();
    }

    if (s.norm() < options.step_tolerance * (1.0 + result.x.norm()) &&
        std::abs(previous - result.value) <= 1e-14 * (1.0 + std::abs(result.value))) {
      active = active_set(result.x, grad, lower);
      result.projected_gradient_norm = masked(grad, active).norm();
      result.converged = result.projected_gradient_norm < options.gradient_tolerance;
      return result;
    }
  }
  const std::vector<bool> active = active_set(result.x, grad, lower);
  result.projected_gradient_norm = masked(grad, active).norm();
  result.converged = result.projected_gradient_norm < options.gradient_tolerance;
  return result;
}

}  // namespace msae
