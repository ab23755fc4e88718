#include "msae/simulation.hpp"

#include "msae/aggregate.hpp"
#include "msae/format.hpp"
#include "msae/parallel.hpp"
#include "msae/predictors.hpp"
#include "msae/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

namespace msae {

namespace {

constexpr std::uint64_t kCovariateStream = 0x5151'0001ULL;
constexpr std::uint64_t kSampleStream = 0x5151'0002ULL;
constexpr std::uint64_t kReplicateStream = 0x5151'0003ULL;
constexpr std::uint64_t kTruthStream = 0x5151'0004ULL;
constexpr std::uint64_t kOuterStream = 0x5151'0005ULL;
constexpr std::uint64_t kBootstrapSeedStream = 0x5151'0006ULL;
constexpr std::uint64_t kRestartStream = 0x5151'0007ULL;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

RemlOptions retry_options(const RemlOptions& base, std::uint64_t seed, std::uint64_t stream, std::size_t index) {
  RemlOptions out = base;
  out.restarts = std::max(base.restarts, 3);
  out.seed = derive_seed(seed, kRestartStream ^ stream, index);
  return out;
}

void check_drop_rate(int dropped, int total, const std::string& what) {
  if (dropped > 0.05 * total) {
    throw ConvergenceError(what + ": " + std::to_string(dropped) + " of " + std::to_string(total) +
                               " replicates failed (limit 5%)",
                           VarianceComponents{}, ConvergenceRecord{});
  }
}

std::string estimator_label(Estimator e) { return std::string(to_string(e)); }

}  // namespace

SimulationDesign SimulationDesign::standard(std::uint64_t seed) {
  SimulationDesign d;
  d.areas = 50;
  d.population_size = 500;
  for (int a = 0; a < d.areas; ++a) d.sample_sizes.push_back(5 * (a / 10 + 1));
  Vector theta(6);
  theta << 0.1, 0.4, 0.16, 0.9, 1.0, 0.75;
  d.theta = VarianceComponents::from_theta(2, theta);
  d.beta = Vector(4);
  d.beta << 1.0, 1.0, 4.0, 0.5;
  d.seed = seed;
  return d;
}

void SimulationDesign::validate() const {
  if (areas < 2) throw ValidationError("simulation needs at least two areas");
  if (static_cast<int>(sample_sizes.size()) != areas) throw ValidationError("one sample size per area is required");
  for (int n : sample_sizes) {
    if (n < 1 || n > population_size) throw ValidationError("sample sizes must lie in [1, N_d]");
  }
  if (theta.responses() != 2 || beta.size() != 4) {
    throw ValidationError("the simulation frame generates two responses with an intercept and one covariate each");
  }
}

SimulationFrame build_frame(const SimulationDesign& design) {
  design.validate();
  SimulationFrame frame;
  frame.layout = BlockLayout({2, 2});
  const int big_n = design.population_size;
  std::vector<AreaSample> samples;
  frame.x.reserve(static_cast<std::size_t>(design.areas));
  frame.sample.reserve(static_cast<std::size_t>(design.areas));
  for (int d = 0; d < design.areas; ++d) {
    Engine cov_rng = make_engine(design.seed, kCovariateStream, static_cast<std::uint64_t>(d));
    std::gamma_distribution<double> first(2.0, 5.0);
    std::gamma_distribution<double> second(5.0 + 3.0 * (d + 1) / design.areas, 5.0);
    Matrix x(big_n, 4);
    for (int i = 0; i < big_n; ++i) {
      x(i, 0) = 1.0;
      x(i, 1) = first(cov_rng);
      x(i, 2) = 1.0;
      x(i, 3) = second(cov_rng);
    }

    Engine sample_rng = make_engine(design.seed, kSampleStream, static_cast<std::uint64_t>(d));
    std::vector<int> indices(static_cast<std::size_t>(big_n));
    std::iota(indices.begin(), indices.end(), 0);
    const int n = design.sample_sizes[static_cast<std::size_t>(d)];
    // Partial Fisher-Yates: the first n entries form the SRSWOR sample.
    for (int i = 0; i < n; ++i) {
      std::uniform_int_distribution<int> pick(i, big_n - 1);
      std::swap(indices[static_cast<std::size_t>(i)], indices[static_cast<std::size_t>(pick(sample_rng))]);
    }
    std::vector<int> chosen(indices.begin(), indices.begin() + n);
    std::sort(chosen.begin(), chosen.end());

    AreaSample s;
    s.label = d + 1;
    s.population_size = big_n;
    s.xbar = x.colwise().mean().transpose();
    s.weights = Vector::Constant(n, static_cast<double>(big_n) / n);
    s.y = Matrix::Zero(n, 2);
    s.x.resize(n, 4);
    for (int i = 0; i < n; ++i) s.x.row(i) = x.row(chosen[static_cast<std::size_t>(i)]);
    samples.push_back(std::move(s));
    frame.x.push_back(std::move(x));
    frame.sample.push_back(std::move(chosen));
  }
  frame.sample_dataset = make_dataset(frame.layout, std::move(samples));
  return frame;
}

PopulationDraw generate_population(const SimulationFrame& frame, const SimulationDesign& design, Engine& rng) {
  const GaussianSampler area_sampler(design.theta.sigma_u);
  const GaussianSampler unit_sampler(design.theta.sigma_e);
  PopulationDraw draw;
  for (std::size_t d = 0; d < frame.x.size(); ++d) {
    const Matrix& x = frame.x[d];
    const Vector u = area_sampler.draw(rng);
    Matrix y = unit_sampler.draw_rows(rng, x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) y.row(i) += (frame.layout.apply(x.row(i), design.beta) + u).transpose();
    draw.mu.push_back(y.colwise().mean().transpose());
    draw.u.push_back(u);
    draw.y.push_back(std::move(y));
  }
  return draw;
}

Dataset sample_of(const SimulationFrame& frame, const PopulationDraw& population) {
  std::vector<Matrix> responses;
  responses.reserve(frame.sample.size());
  for (std::size_t d = 0; d < frame.sample.size(); ++d) {
    const auto& idx = frame.sample[d];
    Matrix y(static_cast<Eigen::Index>(idx.size()), population.y[d].cols());
    for (std::size_t i = 0; i < idx.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = population.y[d].row(idx[i]);
    responses.push_back(std::move(y));
  }
  return frame.sample_dataset.with_responses(responses);
}

MetricAccumulator::MetricAccumulator(std::size_t areas, int responses)
    : responses_(responses),
      error_sum_(areas * static_cast<std::size_t>(responses), 0.0),
      squared_sum_(error_sum_.size(), 0.0),
      truth_sum_(error_sum_.size(), 0.0),
      count_(error_sum_.size(), 0) {}

void MetricAccumulator::add(std::size_t area, const Vector& estimate, const Vector& truth) {
  for (int r = 0; r < responses_; ++r) {
    if (!std::isfinite(estimate[r])) continue;
    const std::size_t k = area * static_cast<std::size_t>(responses_) + static_cast<std::size_t>(r);
    const double err = estimate[r] - truth[r];
    error_sum_[k] += err;
    squared_sum_[k] += err * err;
    truth_sum_[k] += truth[r];
    ++count_[k];
  }
}

std::size_t MetricAccumulator::count(std::size_t area, int response) const {
  return count_[area * static_cast<std::size_t>(responses_) + static_cast<std::size_t>(response)];
}

AreaMetric MetricAccumulator::metric(std::size_t area, int response) const {
  const std::size_t k = area * static_cast<std::size_t>(responses_) + static_cast<std::size_t>(response);
  if (count_[k] == 0) return AreaMetric{kNaN, kNaN};
  const double n = static_cast<double>(count_[k]);
  const double truth_mean = truth_sum_[k] / n;
  return AreaMetric{100.0 * (error_sum_[k] / n) / truth_mean, 100.0 * std::sqrt(squared_sum_[k] / n) / truth_mean};
}

const GroupRow& ExperimentAResult::group(Estimator e, int response, int sample_size) const {
  for (const GroupRow& g : groups) {
    if (g.estimator == e && g.response == response && g.sample_size == sample_size) return g;
  }
  throw ValidationError("no such group in the metric table");
}

std::vector<GroupRow> group_average(const std::vector<AreaSeriesRow>& rows) {
  std::map<std::tuple<int, int, int>, std::pair<GroupRow, int>> groups;
  for (const AreaSeriesRow& row : rows) {
    const auto order = std::find(kExperimentEstimators.begin(), kExperimentEstimators.end(), row.estimator) -
                       kExperimentEstimators.begin();
    auto& [g, count] = groups[{static_cast<int>(order), row.response, row.sample_size}];
    g.estimator = row.estimator;
    g.response = row.response;
    g.sample_size = row.sample_size;
    g.arb += std::abs(row.metric.rb);
    g.rrmse += row.metric.rrmse;
    ++count;
  }
  std::vector<GroupRow> out;
  for (auto& [key, entry] : groups) {
    GroupRow g = entry.first;
    g.arb /= entry.second;
    g.rrmse /= entry.second;
    out.push_back(g);
  }
  return out;
}

ExperimentAResult run_experiment_a(const SimulationDesign& design, const ExperimentAOptions& options) {
  if (options.replicates < 1) throw ValidationError("Experiment A needs at least one replicate");
  const SimulationFrame frame = build_frame(design);
  const std::size_t areas = frame.sample.size();
  const int responses = frame.layout.responses();
  const auto count = static_cast<std::size_t>(options.replicates);
  constexpr std::size_t kEstimators = kExperimentEstimators.size();

  struct Slot {
    std::vector<Vector> truth;
    std::array<std::vector<Vector>, kEstimators> estimates;
    bool ok = false;
    bool retried = false;
  };
  std::vector<Slot> slots(count);

  parallel_for(count, options.workers, [&](std::size_t l) {
    Engine rng = make_engine(design.seed, kReplicateStream, l);
    const PopulationDraw population = generate_population(frame, design, rng);
    const Dataset sample = sample_of(frame, population);
    const auto aggregates = aggregate(sample);
    Slot& slot = slots[l];

    for (int attempt = 0; attempt < 2 && !slot.ok; ++attempt) {
      const RemlOptions reml = attempt == 0 ? options.reml : retry_options(options.reml, design.seed, kReplicateStream, l);
      slot.retried = attempt > 0;
      try {
        const auto direct = direct_estimator(sample, DesignVariance::srswor_fpc);
        std::vector<std::optional<Matrix>> cov;
        cov.reserve(areas);
        for (const AreaPrediction& p : direct) cov.push_back(p.mse);

        const FittedModel fitted = fit_survey_weighted(sample, reml);
        const auto myr = mpeblup(sample, fitted);
        const auto uyr = univariate_peblup_all(sample, reml);

        RemlOptions mfh_options = reml;
        if (attempt > 0) {
          mfh_options.initializer = Initializer::given;
          mfh_options.initial = fitted.theta;
        }
        const auto mfh = mfh_eblup(sample, aggregates, cov, mfh_options);

        for (auto& e : slot.estimates) e.assign(areas, Vector::Constant(responses, kNaN));
        for (std::size_t d = 0; d < areas; ++d) {
          slot.estimates[0][d] = direct[d].mu;
          slot.estimates[2][d] = myr[d].mu;
          slot.estimates[3][d] = uyr[d].mu;
        }
        for (const AreaPrediction& p : mfh) slot.estimates[1][*sample.find_area(p.area_id)] = p.mu;
        slot.truth = population.mu;
        slot.ok = true;
      } catch (const Error&) {
      }
    }
  });

  ExperimentAResult result;
  std::vector<MetricAccumulator> acc(kEstimators, MetricAccumulator(areas, responses));
  for (const Slot& slot : slots) {
    result.retried += slot.retried ? 1 : 0;
    if (!slot.ok) {
      ++result.dropped;
      continue;
    }
    ++result.used;
    for (std::size_t e = 0; e < kEstimators; ++e) {
      for (std::size_t d = 0; d < areas; ++d) acc[e].add(d, slot.estimates[e][d], slot.truth[d]);
    }
  }
  check_drop_rate(result.dropped, options.replicates, "Experiment A");

  for (std::size_t e = 0; e < kEstimators; ++e) {
    for (int r = 0; r < responses; ++r) {
      for (std::size_t d = 0; d < areas; ++d) {
        AreaSeriesRow row;
        row.area_id = frame.sample_dataset.area(d).label;
        row.sample_size = frame.sample_dataset.area(d).units();
        row.estimator = kExperimentEstimators[e];
        row.response = r;
        row.metric = acc[e].metric(d, r);
        result.areas.push_back(row);
      }
    }
  }
  result.groups = group_average(result.areas);
  return result;
}

ExperimentBResult run_experiment_b(const SimulationDesign& design, const ExperimentBOptions& options) {
  if (options.truth_replicates < 1 || options.replicates < 1 || options.bootstrap < 1) {
    throw ValidationError("Experiment B needs positive replicate counts");
  }
  const SimulationFrame frame = build_frame(design);
  const std::size_t areas = frame.sample.size();
  const int responses = frame.layout.responses();

  // Monte Carlo true MSE of the MPEBLUP.
  const auto truth_count = static_cast<std::size_t>(options.truth_replicates);
  std::vector<std::optional<std::vector<Vector>>> truth_slots(truth_count);
  parallel_for(truth_count, options.workers, [&](std::size_t l) {
    Engine rng = make_engine(design.seed, kTruthStream, l);
    const PopulationDraw population = generate_population(frame, design, rng);
    const Dataset sample = sample_of(frame, population);
    for (int attempt = 0; attempt < 2 && !truth_slots[l]; ++attempt) {
      const RemlOptions reml = attempt == 0 ? options.reml : retry_options(options.reml, design.seed, kTruthStream, l);
      try {
        const auto myr = mpeblup(sample, fit_survey_weighted(sample, reml));
        std::vector<Vector> sq(areas);
        for (std::size_t d = 0; d < areas; ++d) sq[d] = (myr[d].mu - population.mu[d]).cwiseAbs2();
        truth_slots[l] = std::move(sq);
      } catch (const Error&) {
      }
    }
  });

  ExperimentBResult result;
  int truth_dropped = 0;
  std::vector<Vector> true_mse(areas, Vector::Zero(responses));
  for (const auto& slot : truth_slots) {
    if (!slot) {
      ++truth_dropped;
      continue;
    }
    ++result.truth_used;
    for (std::size_t d = 0; d < areas; ++d) true_mse[d] += (*slot)[d];
  }
  check_drop_rate(truth_dropped, options.truth_replicates, "Experiment B truth run");
  for (Vector& v : true_mse) v /= result.truth_used;

  const auto outer_count = static_cast<std::size_t>(options.replicates);
  std::vector<std::optional<std::vector<Vector>>> outer_slots(outer_count);
  parallel_for(outer_count, options.workers, [&](std::size_t l) {
    Engine rng = make_engine(design.seed, kOuterStream, l);
    const PopulationDraw population = generate_population(frame, design, rng);
    const Dataset sample = sample_of(frame, population);
    for (int attempt = 0; attempt < 2 && !outer_slots[l]; ++attempt) {
      const RemlOptions reml = attempt == 0 ? options.reml : retry_options(options.reml, design.seed, kOuterStream, l);
      try {
        const FittedModel fitted = fit_survey_weighted(sample, reml);
        BootstrapConfig config;
        config.replicates = options.bootstrap;
        config.seed = derive_seed(design.seed, kBootstrapSeedStream, l);
        config.workers = 1;
        config.refit_theta = options.refit_theta;
        config.reml = options.reml;
        const BootstrapResult boot = bootstrap_mse(sample, fitted, config);
        std::vector<Vector> diag(areas);
        for (std::size_t d = 0; d < areas; ++d) diag[d] = boot.mse[d].diagonal();
        outer_slots[l] = std::move(diag);
      } catch (const Error&) {
      }
    }
  });

  std::vector<Vector> boot_mean(areas, Vector::Zero(responses));
  for (const auto& slot : outer_slots) {
    if (!slot) {
      ++result.dropped;
      continue;
    }
    ++result.outer_used;
    for (std::size_t d = 0; d < areas; ++d) boot_mean[d] += (*slot)[d];
  }
  check_drop_rate(result.dropped, options.replicates, "Experiment B");
  for (Vector& v : boot_mean) v /= result.outer_used;

  for (std::size_t d = 0; d < areas; ++d) {
    for (int r = 0; r < responses; ++r) {
      ExperimentBRow row;
      row.area_id = frame.sample_dataset.area(d).label;
      row.sample_size = frame.sample_dataset.area(d).units();
      row.response = r;
      row.true_mse = true_mse[d][r];
      row.bootstrap_mse = boot_mean[d][r];
      result.rows.push_back(row);
    }
  }
  return result;
}

std::string format_group_table(const std::vector<GroupRow>& rows) {
  std::ostringstream os;
  os << "estimator,response,n_d,arb_percent,rrmse_percent\n";
  for (const GroupRow& g : rows) {
    os << estimator_label(g.estimator) << ',' << g.response + 1 << ',' << g.sample_size << ',' << format_double(g.arb)
       << ',' << format_double(g.rrmse) << '\n';
  }
  return os.str();
}

std::string format_area_series(const std::vector<AreaSeriesRow>& rows) {
  // Wide layout: one row per area, RB and RRMSE columns per estimator and response.
  std::map<AreaLabel, std::pair<int, std::map<std::pair<int, int>, AreaMetric>>> by_area;
  std::vector<std::pair<int, int>> columns;
  for (const AreaSeriesRow& row : rows) {
    const int e = static_cast<int>(row.estimator);
    auto& [n, metrics] = by_area[row.area_id];
    n = row.sample_size;
    metrics[{e, row.response}] = row.metric;
    if (std::find(columns.begin(), columns.end(), std::pair{e, row.response}) == columns.end()) {
      columns.emplace_back(e, row.response);
    }
  }
  std::ostringstream os;
  os << "area_id,n_d";
  for (const auto& [e, r] : columns) {
    const std::string tag = estimator_label(static_cast<Estimator>(e)) + "_" + std::to_string(r + 1);
    os << ",rb_" << tag << ",rrmse_" << tag;
  }
  os << '\n';
  for (const auto& [label, entry] : by_area) {
    os << label << ',' << entry.first;
    for (const auto& key : columns) {
      const auto it = entry.second.find(key);
      const AreaMetric m = it == entry.second.end() ? AreaMetric{kNaN, kNaN} : it->second;
      os << ',' << format_double(m.rb) << ',' << format_double(m.rrmse);
    }
    os << '\n';
  }
  return os.str();
}

std::string format_experiment_b(const std::vector<ExperimentBRow>& rows) {
  std::ostringstream os;
  os << "area_id,n_d,response,true_mse,bootstrap_mse,relative_error\n";
  for (const ExperimentBRow& row : rows) {
    os << row.area_id << ',' << row.sample_size << ',' << row.response + 1 << ',' << format_double(row.true_mse) << ','
       << format_double(row.bootstrap_mse) << ',' << format_double(row.relative_error()) << '\n';
  }
  return os.str();
}

}  // namespace msae
