#include "msae/aggregate.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace msae {

namespace {

std::string calibration_message(AreaLabel label, std::string_view what) {
  std::ostringstream os;
  os << "area " << label << ": calibration: " << what;
  return os.str();
}

bool nearly_equal(double a, double b, double tol) { return std::abs(a - b) <= tol * (1.0 + std::max(std::abs(a), std::abs(b))); }

}  // namespace

AreaAggregates aggregate_area(const AreaSample& area) {
  AreaAggregates out;
  out.weight_total = area.weights.sum();
  out.ybar = (area.y.transpose() * area.weights) / out.weight_total;
  out.xbar = (area.x.transpose() * area.weights) / out.weight_total;
  out.k2 = area.weights.squaredNorm() / (out.weight_total * out.weight_total);
  return out;
}

std::vector<AreaAggregates> aggregate(const Dataset& dataset) {
  std::vector<AreaAggregates> out;
  out.reserve(dataset.areas());
  for (const AreaSample& a : dataset.all_areas()) out.push_back(aggregate_area(a));
  return out;
}

AreaCalibration calibrate_area(const AreaSample& area) {
  const int n = area.units();
  const int p = static_cast<int>(area.x.cols());
  constexpr double kTol = 1e-12;

  AreaCalibration out;
  for (int j = 0; j < p; ++j) {
    const auto col = area.x.col(j);
    const double first = col[0];
    const bool constant = (col.array() - first).abs().maxCoeff() <= kTol * (1.0 + std::abs(first));
    if (constant) {
      if (!nearly_equal(first, area.xbar[j], 1e-8)) {
        throw CalibrationError(calibration_message(area.label, "covariate column " + std::to_string(j + 1) +
                                                                   " is constant in the sample but its population mean differs"));
      }
      continue;
    }
    bool duplicate = false;
    for (int k : out.constrained) {
      if ((area.x.col(k) - col).cwiseAbs().maxCoeff() <= kTol * (1.0 + col.cwiseAbs().maxCoeff())) {
        if (!nearly_equal(area.xbar[k], area.xbar[j], 1e-8)) {
          throw CalibrationError(calibration_message(area.label, "identical sample columns with different population means"));
        }
        duplicate = true;
        break;
      }
    }
    if (!duplicate) out.constrained.push_back(j);
  }

  const int m = 1 + static_cast<int>(out.constrained.size());
  Matrix c(n, m);
  c.col(0).setOnes();
  Vector target(m);
  const double population = static_cast<double>(area.population_size);
  target[0] = population;
  for (int k = 0; k < m - 1; ++k) {
    c.col(k + 1) = area.x.col(out.constrained[static_cast<std::size_t>(k)]);
    target[k + 1] = population * area.xbar[out.constrained[static_cast<std::size_t>(k)]];
  }
  const Matrix system = c.transpose() * area.weights.asDiagonal() * c;
  const Vector current = c.transpose() * area.weights;
  SymmetricSolver solver;
  try {
    solver.compute(system, "calibration");
  } catch (const SingularMatrixError&) {
    throw CalibrationError(calibration_message(area.label, "singular calibration system (infeasible constraints)"));
  }
  out.lambda = solver.solve(Vector(target - current));
  out.weights = area.weights.array() * (1.0 + (c * out.lambda).array());
  if ((out.weights.array() <= 0.0).any()) {
    throw CalibrationError(calibration_message(area.label, "nonpositive calibrated weight; use fewer constraints"));
  }
  return out;
}

Dataset calibrate_weights(const Dataset& dataset) {
  std::vector<Vector> weights;
  weights.reserve(dataset.areas());
  for (const AreaSample& a : dataset.all_areas()) weights.push_back(calibrate_area(a).weights);
  Dataset out = dataset.with_weights(weights);
  for (const AreaSample& a : out.all_areas()) {
    const AreaAggregates agg = aggregate_area(a);
    const double gap = (agg.xbar - a.xbar).cwiseAbs().maxCoeff();
    if (gap > 1e-8 * (1.0 + a.xbar.cwiseAbs().maxCoeff())) {
      throw CalibrationError(calibration_message(a.label, "calibrated means miss their targets"));
    }
  }
  return out;
}

CalibrationGap calibration_gap(const Dataset& dataset) {
  CalibrationGap gap;
  for (const AreaSample& a : dataset.all_areas()) {
    const AreaAggregates agg = aggregate_area(a);
    gap.mean_gap = std::max(gap.mean_gap, (agg.xbar - a.xbar).cwiseAbs().maxCoeff());
    const double population = static_cast<double>(a.population_size);
    gap.total_gap = std::max(gap.total_gap, std::abs(agg.weight_total - population) / population);
  }
  return gap;
}

Vector benchmark_totals(const Dataset& dataset, const Vector& beta, std::span<const AreaPrediction> predictions) {
  if (predictions.size() != dataset.areas()) throw ValidationError("benchmark_totals: one prediction per area required");
  const BlockLayout& layout = dataset.layout();
  const int responses = dataset.responses();
  Vector predicted_total = Vector::Zero(responses);
  Vector y_hat = Vector::Zero(responses);
  Vector x_total = Vector::Zero(layout.covariates());
  Vector x_hat = Vector::Zero(layout.covariates());
  for (std::size_t d = 0; d < dataset.areas(); ++d) {
    const AreaSample& a = dataset.area(d);
    const AreaPrediction& pred = predictions[d];
    if (pred.area_id != a.label) throw ValidationError("benchmark_totals: predictions out of area order");
    const double population = static_cast<double>(a.population_size);
    predicted_total += population * pred.mu;
    y_hat += a.y.transpose() * a.weights;
    x_total += population * a.xbar;
    x_hat += a.x.transpose() * a.weights;
  }
  const Vector regression = layout.apply((x_total - x_hat).transpose(), beta);
  return predicted_total - (y_hat + regression);
}

}  // namespace msae
