#pragma once

#include "msae/data_model.hpp"
#include "msae/mner_core.hpp"

#include <cstdint>
#include <optional>

namespace msae {

enum class Initializer {
  moment,  ///< pooled within/between-area moment start
  given,   ///< RemlOptions::initial
};

struct RemlOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-6;
  double step_tolerance = 1e-9;
  Initializer initializer = Initializer::moment;
  std::optional<VarianceComponents> initial;
  std::uint64_t seed = 0;   ///< drives perturbed restarts
  int restarts = 0;         ///< perturbed-start retries after a failed fit
};

/// Unconstrained-ish coordinates for (Sigma_u, Sigma_e): lower-triangular
/// factors with diagonals floored at kDiagonalFloor, so Sigma = L L^T is
/// always positive definite.
struct CholeskyParam {
  static constexpr double kDiagonalFloor = 1e-8;

  Matrix l_u;
  Matrix l_e;

  [[nodiscard]] static CholeskyParam from_components(const VarianceComponents& vc);
  [[nodiscard]] VarianceComponents components() const;

  /// Row-major lower-triangular entries of L_u followed by those of L_e.
  [[nodiscard]] Vector to_vector() const;
  [[nodiscard]] static CholeskyParam from_vector(int responses, const Vector& v);
  /// Optimizer bounds: kDiagonalFloor on diagonal coordinates, -inf elsewhere.
  [[nodiscard]] static Vector lower_bounds(int responses);
  [[nodiscard]] static int size(int responses) { return responses * (responses + 1); }
};

/// Non-convergent REML fit; carries the best point reached.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, VarianceComponents best, ConvergenceRecord record)
      : Error(what), best_(std::move(best)), record_(record) {}
  [[nodiscard]] const VarianceComponents& best() const { return best_; }
  [[nodiscard]] const ConvergenceRecord& record() const { return record_; }

 private:
  VarianceComponents best_;
  ConvergenceRecord record_;
};

/// Restricted log-likelihood of theta (constant -(nR-p)/2 log 2 pi included).
[[nodiscard]] double restricted_loglik(const Dataset& dataset, const VarianceComponents& theta);

/// Analytic gradient of the restricted log-likelihood in CholeskyParam coordinates.
[[nodiscard]] Vector restricted_loglik_gradient(const Dataset& dataset, const CholeskyParam& param);

/// Moment-based starting value.
[[nodiscard]] VarianceComponents moment_initializer(const Dataset& dataset);

/// REML fit of theta; beta is the WLS estimate at theta-hat.
[[nodiscard]] FittedModel fit_reml(const Dataset& dataset, const RemlOptions& options = {});

}  // namespace msae
