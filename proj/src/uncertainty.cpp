#include "msae/uncertainty.hpp"

#include "msae/parallel.hpp"
#include "msae/predictors.hpp"

#include <cmath>
#include <optional>

namespace msae {

namespace {

constexpr std::uint64_t kBootstrapStream = 0xb007'0001ULL;
constexpr std::uint64_t kRetryStream = 0xb007'0002ULL;
constexpr std::uint64_t kCrossTermStream = 0xc405'0001ULL;

std::vector<Vector> predict_for(const Dataset& data, const FittedModel& fitted, Estimator estimator) {
  const auto predictions = estimator == Estimator::mu ? unified_predictor(data, fitted) : mpeblup(data, fitted);
  std::vector<Vector> out;
  out.reserve(predictions.size());
  for (const AreaPrediction& p : predictions) out.push_back(p.mu);
  return out;
}

VarianceComponents jitter(const VarianceComponents& theta, std::uint64_t seed, std::uint64_t index) {
  Engine rng = make_engine(seed, kRetryStream, index);
  std::uniform_real_distribution<double> scale(0.5, 2.0);
  VarianceComponents out = theta;
  out.sigma_u *= scale(rng);
  out.sigma_e *= scale(rng);
  out.sigma_u.diagonal().array() += 1e-3 * theta.sigma_e.diagonal().array();
  return out;
}

}  // namespace

Matrix g1(const VarianceComponents& theta, double k2) {
  const Matrix gamma = gamma_dw(theta, k2);
  const Matrix raw = (Matrix::Identity(gamma.rows(), gamma.cols()) - gamma) * theta.sigma_u;
  const double scale = 1.0 + raw.cwiseAbs().maxCoeff();
  if (asymmetry(raw) > 1e-10 * scale) throw Error("G1 asymmetry exceeds tolerance");
  return symmetrize(raw);
}

Matrix g2(const VarianceComponents& theta, const Matrix& phi, const AreaAggregates& aggregates,
          const Vector& population_xbar, const BlockLayout& layout) {
  const Matrix gamma = gamma_dw(theta, aggregates.k2);
  const Matrix p = layout.expand(population_xbar.transpose()) - gamma * layout.expand(aggregates.xbar.transpose());
  return symmetrize(p * phi * p.transpose());
}

std::vector<MseComponents> analytic_mse(const Dataset& dataset, const VarianceComponents& theta, const Matrix& phi) {
  const auto aggregates = aggregate(dataset);
  std::vector<MseComponents> out;
  out.reserve(dataset.areas());
  for (std::size_t d = 0; d < dataset.areas(); ++d) {
    MseComponents m;
    m.g1 = g1(theta, aggregates[d].k2);
    m.g2 = g2(theta, phi, aggregates[d], dataset.area(d).xbar, dataset.layout());
    m.total = m.g1 + m.g2;
    out.push_back(std::move(m));
  }
  return out;
}

ModelDraw draw_from_model(const Dataset& dataset, const VarianceComponents& theta, const Vector& beta, Engine& rng) {
  const GaussianSampler area_sampler(theta.sigma_u);
  const GaussianSampler unit_sampler(theta.sigma_e);
  const BlockLayout& layout = dataset.layout();
  ModelDraw draw;
  draw.u.reserve(dataset.areas());
  draw.y.reserve(dataset.areas());
  draw.mu.reserve(dataset.areas());
  for (const AreaSample& area : dataset.all_areas()) {
    const Vector u = area_sampler.draw(rng);
    Matrix y = unit_sampler.draw_rows(rng, area.units());
    for (int i = 0; i < area.units(); ++i) y.row(i) += (layout.apply(area.x.row(i), beta) + u).transpose();
    draw.mu.push_back(layout.apply(area.xbar.transpose(), beta) + u);
    draw.u.push_back(u);
    draw.y.push_back(std::move(y));
  }
  return draw;
}

std::optional<std::vector<Matrix>> bootstrap_replicate(const Dataset& dataset, const FittedModel& fitted,
                                                       const BootstrapConfig& config, Estimator estimator,
                                                       std::size_t index, bool* retried) {
  Engine rng = make_engine(config.seed, kBootstrapStream, index);
  const ModelDraw draw = draw_from_model(dataset, fitted.theta, fitted.beta, rng);
  const Dataset star = dataset.with_responses(draw.y);

  std::optional<std::vector<Vector>> predicted;
  if (!config.refit_theta) {
    FittedModel plug = fitted;
    plug.fit_method = "plug-in";
    predicted = predict_for(star, with_survey_weighted_beta(star, plug), estimator);
  } else {
    for (int attempt = 0; attempt < 2 && !predicted; ++attempt) {
      RemlOptions options = config.reml;
      if (attempt == 1) {
        if (retried) *retried = true;
        options.initializer = Initializer::given;
        options.initial = jitter(fitted.theta, config.seed, index);
      }
      try {
        predicted = predict_for(star, fit_survey_weighted(star, options), estimator);
      } catch (const ConvergenceError&) {
      } catch (const SingularMatrixError&) {
      }
    }
  }
  if (!predicted) return std::nullopt;
  std::vector<Matrix> outer(dataset.areas());
  for (std::size_t d = 0; d < outer.size(); ++d) {
    const Vector diff = (*predicted)[d] - draw.mu[d];
    outer[d] = diff * diff.transpose();
  }
  return outer;
}

BootstrapResult bootstrap_mse(const Dataset& dataset, const FittedModel& fitted, const BootstrapConfig& config,
                              Estimator estimator) {
  if (config.replicates < 1) throw ValidationError("bootstrap needs at least one replicate");
  if (estimator != Estimator::myr && estimator != Estimator::mu) {
    throw ValidationError("bootstrap MSE is available for MYR and MU only");
  }
  if (fitted.coefficient_method != CoefficientMethod::survey_weighted) {
    throw ValidationError("bootstrap needs a fit with survey-weighted coefficients");
  }
  if (estimator == Estimator::mu) {
    const CalibrationGap gap = calibration_gap(dataset);
    if (gap.mean_gap > 1e-6 || gap.total_gap > 1e-6) throw ValidationError("MU bootstrap requires calibrated weights");
  }
  const std::size_t areas = dataset.areas();
  const auto count = static_cast<std::size_t>(config.replicates);

  struct Slot {
    std::optional<std::vector<Matrix>> outer;
    bool retried = false;
  };
  std::vector<Slot> slots(count);

  parallel_for(count, config.workers, [&](std::size_t b) {
    slots[b].outer = bootstrap_replicate(dataset, fitted, config, estimator, b, &slots[b].retried);
  });

  BootstrapResult result;
  std::vector<std::vector<Matrix>> kept;
  for (const Slot& s : slots) {
    result.retried += s.retried ? 1 : 0;
    if (s.outer) {
      kept.push_back(*s.outer);
    } else {
      ++result.dropped;
    }
  }
  if (result.dropped > 0.05 * config.replicates) {
    throw ConvergenceError("bootstrap dropped " + std::to_string(result.dropped) + " of " +
                               std::to_string(config.replicates) + " replicates (limit 5%)",
                           fitted.theta, fitted.convergence);
  }
  result.used = static_cast<int>(kept.size());
  result.mse.resize(areas);
  std::vector<Matrix> column(kept.size());
  for (std::size_t d = 0; d < areas; ++d) {
    for (std::size_t k = 0; k < kept.size(); ++k) column[k] = kept[k][d];
    result.mse[d] = symmetrize(pairwise_sum(column, 0, column.size()) / static_cast<double>(kept.size()));
  }
  return result;
}

void attach_mse(std::vector<AreaPrediction>& predictions, const std::vector<Matrix>& mse, MseSource source) {
  if (predictions.size() != mse.size()) throw ValidationError("MSE matrices do not match the predictions");
  for (std::size_t d = 0; d < predictions.size(); ++d) {
    predictions[d].mse = mse[d];
    predictions[d].mse_source = source;
  }
}

CrossTermCheck mse_cross_term_check(const Dataset& dataset, const VarianceComponents& theta, const Vector& beta,
                                    int replicates, std::uint64_t seed, unsigned workers) {
  if (replicates < 2) throw ValidationError("cross-term check needs at least two replicates");
  const std::size_t areas = dataset.areas();
  const auto count = static_cast<std::size_t>(replicates);
  std::vector<std::vector<Matrix>> first(count);
  std::vector<std::vector<Matrix>> second(count);

  parallel_for(count, workers, [&](std::size_t l) {
    Engine rng = make_engine(seed, kCrossTermStream, l);
    const ModelDraw draw = draw_from_model(dataset, theta, beta, rng);
    const Dataset sample = dataset.with_responses(draw.y);
    const auto aggregates = aggregate(sample);
    const Vector estimated = beta_w(sample, aggregates, theta).beta;
    const auto with_estimated = mpbp(sample, aggregates, theta, estimated);
    const auto with_true = mpbp(sample, aggregates, theta, beta);
    first[l].resize(areas);
    second[l].resize(areas);
    for (std::size_t d = 0; d < areas; ++d) {
      const Matrix cross = (with_estimated[d].mu - with_true[d].mu) * (with_true[d].mu - draw.mu[d]).transpose();
      first[l][d] = cross;
      second[l][d] = cross.cwiseAbs2();
    }
  });

  CrossTermCheck out;
  out.mean.resize(areas);
  out.standard_error.resize(areas);
  std::vector<Matrix> a(count);
  std::vector<Matrix> b(count);
  const double n = static_cast<double>(count);
  for (std::size_t d = 0; d < areas; ++d) {
    for (std::size_t l = 0; l < count; ++l) {
      a[l] = first[l][d];
      b[l] = second[l][d];
    }
    const Matrix mean = pairwise_sum(a, 0, count) / n;
    const Matrix second_moment = pairwise_sum(b, 0, count) / n;
    const Matrix variance = ((second_moment - mean.cwiseAbs2()) * (n / (n - 1.0))).cwiseMax(0.0);
    out.mean[d] = mean;
    out.standard_error[d] = (variance / n).cwiseSqrt();
  }
  return out;
}

}  // namespace msae
