#pragma once

#include "msae/linalg.hpp"

#include <functional>
#include <optional>

namespace msae {

struct BfgsOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-6;
  double step_tolerance = 1e-9;
};

struct BfgsResult {
  Vector x;
  double value = 0.0;
  double initial_value = 0.0;
  double projected_gradient_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

/// Objective returning f(x) and writing grad f(x) into the second argument.
/// May throw; a throwing trial point is treated as infeasible by the line search.
using Objective = std::function<double(const Vector&, Vector&)>;

/// Quasi-Newton (BFGS) minimization subject to optional lower bounds
/// x_i >= lower_i (use -infinity for free coordinates). Bounds are handled by
/// projection with an active set; convergence requires the projected gradient
/// norm to fall below gradient_tolerance.
[[nodiscard]] BfgsResult minimize_bfgs(const Objective& objective, const Vector& start, const Vector& lower,
                                       const BfgsOptions& options);

}  // namespace msae
