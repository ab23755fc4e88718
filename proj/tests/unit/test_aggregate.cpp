#include "fixtures.hpp"
#include "oracles.hpp"

#include "msae/aggregate.hpp"
#include "msae/predictors.hpp"

#include <doctest.h>

using namespace msae;
using fixture::mat;
using fixture::vec;

TEST_CASE("aggregates of small areas") {
  const AreaAggregates equal = aggregate_area(fixture::area(1, 30, Vector::Constant(3, 10.0), mat({{1}, {2}, {6}}),
                                                            Matrix::Ones(3, 1), vec({1})));
  CHECK(equal.k2 == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(equal.ybar[0] == doctest::Approx(3.0));
  CHECK(equal.weight_total == 30.0);

  const AreaAggregates single = aggregate_area(fixture::area(1, 30, vec({4.0}), mat({{7.5, -2.0}}), mat({{1, 3}}), vec({1, 3})));
  CHECK(single.k2 == 1.0);
  CHECK(single.ybar == vec({7.5, -2.0}));

  const AreaAggregates hand = aggregate_area(fixture::area(1, 30, vec({3, 1}), mat({{1}, {5}}), mat({{1}, {1}}), vec({1})));
  CHECK(hand.ybar[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(hand.k2 == doctest::Approx(0.625).epsilon(1e-15));
}

TEST_CASE("k2 lies in [1/n, 1] and is smallest at equal weights") {
  Engine rng(41);
  std::uniform_real_distribution<double> unit(-0.9, 0.9);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 7;
    Vector w = Vector::Constant(n, 5.0);
    Vector delta(n);
    for (int i = 0; i < n; ++i) delta[i] = unit(rng);
    delta.array() -= delta.mean();
    w += 5.0 * delta;
    CHECK(std::abs(w.sum() - 5.0 * n) < 1e-9);
    const AreaAggregates a = aggregate_area(fixture::area(1, 1000, w, Matrix::Zero(n, 1), Matrix::Ones(n, 1), vec({1})));
    CHECK(a.k2 >= 1.0 / n - 1e-15);
    CHECK(a.k2 <= 1.0);
  }
}

TEST_CASE("calibration solved by hand") {
  // weights (2, 2), x = (1, 3), N = 4, target mean 2.5
  const AreaCalibration c =
      calibrate_area(fixture::area(1, 4, vec({2, 2}), mat({{0}, {0}}), mat({{1, 1}, {1, 3}}), vec({1, 2.5})));
  CHECK(c.constrained == std::vector<int>{1});
  CHECK(c.lambda[0] == doctest::Approx(-1.0));
  CHECK(c.lambda[1] == doctest::Approx(0.5));
  CHECK(c.weights[0] == doctest::Approx(1.0));
  CHECK(c.weights[1] == doctest::Approx(3.0));
}

TEST_CASE("calibration fixed points") {
  // x mean already 2 with w. = N: nothing to change
  const AreaCalibration fixed =
      calibrate_area(fixture::area(1, 4, vec({2, 2}), mat({{0}, {0}}), mat({{1, 1}, {1, 3}}), vec({1, 2})));
  CHECK(fixed.lambda.norm() < 1e-14);
  CHECK((fixed.weights - vec({2, 2})).norm() < 1e-14);
  const AreaCalibration intercept =
      calibrate_area(fixture::area(1, 9, vec({4, 5}), mat({{0}, {0}}), mat({{1}, {1}}), vec({1})));
  CHECK(intercept.constrained.empty());
  CHECK((intercept.weights - vec({4, 5})).norm() < 1e-14);
}

TEST_CASE("joint calibration hits every target and deduplicates shared columns") {
  Engine rng(42);
  oracle::RandomDesign design;
  design.areas = 10;
  design.min_units = 6;
  design.max_units = 12;
  design.blocks = {2, 3};
  Dataset d = oracle::random_dataset(rng, design);
  // a shared covariate: block 2 column 2 repeats block 1 column 2
  std::vector<AreaSample> areas(d.all_areas().begin(), d.all_areas().end());
  for (AreaSample& a : areas) {
    a.x.col(3) = a.x.col(1);
    a.xbar[3] = a.xbar[1];
    a.xbar[1] = a.weights.dot(a.x.col(1)) / a.weights.sum() + 0.1;
    a.xbar[3] = a.xbar[1];
    a.xbar[4] = a.weights.dot(a.x.col(4)) / a.weights.sum() - 0.1;
  }
  d = make_dataset(d.layout(), areas);
  CHECK(calibrate_area(d.area(0)).constrained == std::vector<int>{1, 4});
  const Dataset c = calibrate_weights(d);
  for (std::size_t k = 0; k < c.areas(); ++k) {
    const AreaAggregates agg = aggregate_area(c.area(k));
    CHECK((agg.xbar - c.area(k).xbar).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(std::abs(agg.weight_total - static_cast<double>(c.area(k).population_size)) <
          1e-9 * static_cast<double>(c.area(k).population_size));
  }
  const CalibrationGap gap = calibration_gap(c);
  CHECK(gap.mean_gap < 1e-8);
  CHECK(gap.total_gap < 1e-12);
  CHECK(calibration_gap(d).mean_gap > 0.1);
}

TEST_CASE("infeasible calibration aborts") {
  // one unit cannot match a covariate mean different from its own value
  CHECK_THROWS_AS((void)calibrate_area(fixture::area(1, 5, vec({2, 2}), mat({{0}, {0}}), mat({{1, 1}, {1, 1}}), vec({1, 3}))),
                  CalibrationError);
  // two identical non-constant columns with different targets
  CHECK_THROWS_AS((void)calibrate_area(fixture::area(1, 5, vec({2, 2}), mat({{0}, {0}}), mat({{1, 2, 2}, {1, 4, 4}}), vec({1, 3, 3.5}))),
                  CalibrationError);
  // target far outside the sample range forces a negative weight
  try {
    (void)calibrate_area(fixture::area(1, 4, vec({2, 2}), mat({{0}, {0}}), mat({{1, 1}, {1, 3}}), vec({1, 5})));
    FAIL("expected a negative weight");
  } catch (const CalibrationError& e) {
    CHECK(std::string(e.what()).find("fewer constraints") != std::string::npos);
  }
  // singular: two non-constant columns, only two units
  CHECK_THROWS_AS((void)calibrate_area(fixture::area(1, 5, vec({2, 2}), mat({{0}, {0}}), mat({{1, 2}, {2, 4.5}}), vec({1.5, 3.4}))),
                  CalibrationError);
}

TEST_CASE("benchmarking identity") {
  const Dataset d = fixture::standard_sample(43, fixture::truth_theta(), fixture::truth_beta());
  const FittedModel fit = fit_survey_weighted(d);
  const auto myr = mpeblup(d, fit);
  CHECK(benchmark_totals(d, fit.beta, myr).norm() < 1e-8);

  // w. != N_d breaks the identity
  std::vector<Vector> w;
  for (const AreaSample& a : d.all_areas()) w.push_back(1.3 * a.weights);
  const Dataset off = d.with_weights(w);
  const FittedModel fit_off = fit_survey_weighted(off);
  CHECK(benchmark_totals(off, fit_off.beta, mpeblup(off, fit_off)).norm() > 1e-3);
}

TEST_CASE("benchmarking residual against brute-force totals on a D=2 instance") {
  std::vector<AreaSample> areas;
  areas.push_back(fixture::area(1, 6, vec({2.5, 3.5}), mat({{1.0, 2.0}, {2.0, 1.5}}), mat({{1, 0.3, 1, 2.0}, {1, 1.2, 1, 0.7}}),
                                vec({1, 0.8, 1, 1.1})));
  areas.push_back(fixture::area(2, 8, vec({4.0, 1.0, 3.0}), mat({{0.5, 3.0}, {1.7, 2.2}, {0.1, 0.4}}),
                                mat({{1, 2.1, 1, 1.4}, {1, 0.2, 1, 0.3}, {1, 1.0, 1, 2.0}}), vec({1, 1.0, 1, 0.9})));
  const Dataset d = make_dataset(BlockLayout({2, 2}), std::move(areas));
  const VarianceComponents theta = fixture::truth_theta();
  const auto aggregates = aggregate(d);
  const Vector beta = beta_w(d, aggregates, theta).beta;
  const auto pred = mpbp(d, aggregates, theta, beta);

  Vector predicted = Vector::Zero(2);
  Vector y_hat = Vector::Zero(2);
  Vector regression = Vector::Zero(2);
  for (std::size_t k = 0; k < 2; ++k) {
    const AreaSample& a = d.area(k);
    predicted += static_cast<double>(a.population_size) * pred[k].mu;
    for (int i = 0; i < a.units(); ++i) {
      y_hat += a.weights[i] * a.y.row(i).transpose();
      regression -= a.weights[i] * d.layout().expand(a.x.row(i)) * beta;
    }
    regression += static_cast<double>(a.population_size) * d.layout().expand(a.xbar.transpose()) * beta;
  }
  const Vector brute = predicted - y_hat - regression;
  CHECK((benchmark_totals(d, beta, pred) - brute).norm() < 1e-12);
  CHECK(brute.norm() < 1e-10);
}
