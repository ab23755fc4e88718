#include "fixtures.hpp"

#include "msae/aggregate.hpp"
#include "msae/predictors.hpp"
#include "msae/simulation.hpp"
#include "msae/uncertainty.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace msae;
using fixture::vec;

TEST_CASE("standard design") {
  const SimulationDesign d = SimulationDesign::standard();
  CHECK(d.areas == 50);
  CHECK(d.population_size == 500);
  CHECK(std::accumulate(d.sample_sizes.begin(), d.sample_sizes.end(), 0) == 750);
  CHECK(d.sample_sizes[0] == 5);
  CHECK(d.sample_sizes[9] == 5);
  CHECK(d.sample_sizes[10] == 10);
  CHECK(d.sample_sizes[49] == 25);
  CHECK(d.theta.theta() == vec({0.1, 0.4, 0.16, 0.9, 1.0, 0.75}));
  CHECK(d.beta == vec({1, 1, 4, 0.5}));
  SimulationDesign bad = d;
  bad.sample_sizes[3] = 501;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = d;
  bad.sample_sizes.pop_back();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("frame: fixed covariates, SRSWOR sample, equal weights") {
  const SimulationDesign design = SimulationDesign::standard(7);
  const SimulationFrame frame = build_frame(design);
  const SimulationFrame again = build_frame(design);
  CHECK(frame.sample == again.sample);
  CHECK(frame.sample_dataset == again.sample_dataset);
  std::size_t total = 0;
  for (std::size_t d = 0; d < frame.x.size(); ++d) {
    const Matrix& x = frame.x[d];
    total += static_cast<std::size_t>(x.rows());
    CHECK(x.rows() == 500);
    CHECK((x.col(0).array() == 1.0).all());
    CHECK((x.col(2).array() == 1.0).all());
    CHECK((x.col(1).array() > 0.0).all());
    CHECK(x == again.x[d]);
    const auto& s = frame.sample[d];
    CHECK(static_cast<int>(s.size()) == design.sample_sizes[d]);
    CHECK(std::set<int>(s.begin(), s.end()).size() == s.size());
    CHECK(std::is_sorted(s.begin(), s.end()));
    const AreaSample& a = frame.sample_dataset.area(d);
    CHECK((a.xbar - x.colwise().mean().transpose()).norm() < 1e-12);
    CHECK(aggregate_area(a).k2 == doctest::Approx(1.0 / a.units()).epsilon(1e-15));
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(a.x.row(static_cast<Eigen::Index>(i)) == x.row(s[i]));
  }
  CHECK(total == 25000);
  // the second covariate's shape grows with the area index
  CHECK(frame.x[49].col(3).mean() > frame.x[0].col(3).mean());
  CHECK(build_frame(SimulationDesign::standard(8)).sample != frame.sample);
}

TEST_CASE("population generation") {
  SimulationDesign design = SimulationDesign::standard(9);
  const SimulationFrame frame = build_frame(design);
  SimulationDesign degenerate = design;
  degenerate.theta = VarianceComponents{Matrix::Zero(2, 2), Matrix::Zero(2, 2)};
  Engine rng(1);
  const PopulationDraw flat = generate_population(frame, degenerate, rng);
  for (std::size_t d = 0; d < frame.x.size(); ++d) {
    const Vector expected = frame.layout.apply(frame.x[d].colwise().mean(), design.beta);
    CHECK((flat.mu[d] - expected).norm() < 1e-12);
  }

  Matrix sum = Matrix::Zero(2, 2);
  int draws = 0;
  for (int l = 0; l < 200; ++l) {
    Engine r = make_engine(10, 0, static_cast<std::uint64_t>(l));
    const PopulationDraw p = generate_population(frame, design, r);
    for (std::size_t d = 0; d < p.u.size(); ++d) {
      sum += p.u[d] * p.u[d].transpose();
      ++draws;
      if (l == 0) CHECK((p.mu[d] - p.y[d].colwise().mean().transpose()).norm() < 1e-12);
    }
    if (l == 0) {
      const Dataset s = sample_of(frame, p);
      for (std::size_t d = 0; d < frame.sample.size(); ++d) {
        for (std::size_t i = 0; i < frame.sample[d].size(); ++i) {
          CHECK(s.area(d).y.row(static_cast<Eigen::Index>(i)) == p.y[d].row(frame.sample[d][i]));
        }
      }
    }
  }
  CHECK(draws == 10000);
  const Matrix cov = sum / draws;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) CHECK(std::abs(cov(i, j) / design.theta.sigma_u(i, j) - 1.0) < 0.05);
  }
}

TEST_CASE("metric definitions") {
  MetricAccumulator exact(1, 2);
  MetricAccumulator offset(1, 2);
  for (int l = 0; l < 10; ++l) {
    exact.add(0, vec({2.0, 3.0 + l}), vec({2.0, 3.0 + l}));
    offset.add(0, vec({2.1, std::nan("")}), vec({2.0, 5.0}));
  }
  CHECK(exact.metric(0, 0).rb == 0.0);
  CHECK(exact.metric(0, 1).rrmse == 0.0);
  CHECK(offset.metric(0, 0).rb == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(offset.metric(0, 0).rrmse == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(offset.count(0, 1) == 0);
  CHECK(std::isnan(offset.metric(0, 1).rb));

  // denominators are Monte Carlo means of the truth
  MetricAccumulator varying(1, 1);
  varying.add(0, vec({1.5}), vec({1.0}));
  varying.add(0, vec({2.5}), vec({3.0}));
  CHECK(varying.metric(0, 0).rb == doctest::Approx(0.0));
  CHECK(varying.metric(0, 0).rrmse == doctest::Approx(100.0 * 0.5 / 2.0));

  std::vector<AreaSeriesRow> rows;
  for (int d = 0; d < 4; ++d) {
    rows.push_back(AreaSeriesRow{d + 1, d < 2 ? 5 : 10, Estimator::myr, 0, AreaMetric{d % 2 ? -1.0 : 3.0, 2.0 + d}});
  }
  const auto groups = group_average(rows);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].sample_size == 5);
  CHECK(groups[0].arb == doctest::Approx(2.0));
  CHECK(groups[0].rrmse == doctest::Approx(2.5));
  CHECK(groups[1].rrmse == doctest::Approx(4.5));
}

TEST_CASE("Experiment A is reproducible and worker independent") {
  const SimulationDesign design = SimulationDesign::standard(11);
  ExperimentAOptions options;
  options.replicates = 4;
  const ExperimentAResult a = run_experiment_a(design, options);
  options.workers = 3;
  const ExperimentAResult b = run_experiment_a(design, options);
  CHECK(format_group_table(a.groups) == format_group_table(b.groups));
  CHECK(format_area_series(a.areas) == format_area_series(b.areas));
  CHECK(a.used + a.dropped == 4);
  CHECK(a.groups.size() == 4 * 2 * 5);
  CHECK(a.areas.size() == 4 * 2 * 50);
  const std::string table = format_group_table(a.groups);
  CHECK(table.rfind("estimator,response,n_d,arb_percent,rrmse_percent\n", 0) == 0);
  CHECK(format_area_series(a.areas).rfind("area_id,n_d,rb_DIR_1,rrmse_DIR_1,", 0) == 0);
  for (const GroupRow& g : a.groups) {
    CHECK(std::isfinite(g.arb));
    CHECK(std::isfinite(g.rrmse));
  }
  CHECK(a.group(Estimator::myr, 1, 25).rrmse < a.group(Estimator::dir, 1, 25).rrmse);
  CHECK_THROWS_AS((void)a.group(Estimator::mu, 0, 5), ValidationError);
  options.replicates = 0;
  CHECK_THROWS_AS((void)run_experiment_a(design, options), ValidationError);
}

TEST_CASE("Experiment B with one outer replicate and one bootstrap draw") {
  const SimulationDesign design = SimulationDesign::standard(12);
  ExperimentBOptions options;
  options.truth_replicates = 3;
  options.replicates = 1;
  options.bootstrap = 1;
  const ExperimentBResult result = run_experiment_b(design, options);
  CHECK(result.rows.size() == 100);
  CHECK(result.outer_used == 1);

  // the same replicate rebuilt by hand
  const SimulationFrame frame = build_frame(design);
  Engine rng = make_engine(design.seed, 0x5151'0005ULL, 0);
  const Dataset sample = sample_of(frame, generate_population(frame, design, rng));
  const FittedModel fitted = fit_survey_weighted(sample);
  BootstrapConfig config;
  config.replicates = 1;
  config.seed = derive_seed(design.seed, 0x5151'0006ULL, 0);
  const auto outer = bootstrap_replicate(sample, fitted, config, Estimator::myr, 0);
  REQUIRE(outer.has_value());
  for (const ExperimentBRow& row : result.rows) {
    const auto d = *sample.find_area(row.area_id);
    CHECK(row.bootstrap_mse == (*outer)[d](row.response, row.response));
    CHECK(row.true_mse > 0.0);
  }
  CHECK(format_experiment_b(result.rows).rfind("area_id,n_d,response,true_mse,bootstrap_mse,relative_error\n", 0) == 0);
}
