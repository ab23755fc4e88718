#include "fixtures.hpp"
#include "oracles.hpp"

#include "msae/aggregate.hpp"
#include "msae/mner_core.hpp"
#include "msae/predictors.hpp"
#include "msae/reml.hpp"

#include <doctest.h>

#include <algorithm>

using namespace msae;
using fixture::mat;
using fixture::vec;

namespace {

Dataset tiny_dataset() {
  std::vector<AreaSample> areas;
  areas.push_back(fixture::area(1, 10, vec({2.0, 3.0}), mat({{1.0, 2.0}, {2.0, 1.5}}), mat({{1, 0.3, 1, 2.0}, {1, 1.2, 1, 0.7}}),
                                vec({1, 0.8, 1, 1.1})));
  areas.push_back(fixture::area(2, 12, vec({4.0, 1.0}), mat({{0.5, 3.0}, {1.7, 2.2}}), mat({{1, 2.1, 1, 1.4}, {1, 0.2, 1, 0.3}}),
                                vec({1, 1.0, 1, 0.9})));
  return make_dataset(BlockLayout({2, 2}), std::move(areas));
}

}  // namespace

TEST_CASE("area design shapes") {
  std::vector<AreaSample> areas;
  areas.push_back(fixture::area(1, 5, vec({1.0}), mat({{1.0, 2.0}}), mat({{1, 0.5, 1, 0.2}}), vec({1, 0.5, 1, 0.2})));
  areas.push_back(fixture::area(2, 5, vec({1, 1, 1}), mat({{1, 2}, {3, 4}, {5, 6}}),
                                mat({{1, 1, 1, 1}, {1, 2, 1, 3}, {1, 4, 1, 5}}), vec({1, 2, 1, 2})));
  const Dataset d = make_dataset(BlockLayout({2, 2}), std::move(areas));
  const AreaDesign single = build_area_design(d, 0);
  CHECK(single.y.size() == 2);
  CHECK(single.z == Matrix::Identity(2, 2));
  const AreaDesign three = build_area_design(d, 1);
  CHECK(three.x.rows() == 6);
  CHECK(three.x.cols() == 4);
  CHECK(three.y == vec({1, 2, 3, 4, 5, 6}));
  // block-diagonal rows: response 2 row of unit 2 only touches the second block
  CHECK(three.x.row(3) == vec({0, 0, 1, 3}).transpose());
  const VarianceComponents no_area{Matrix::Zero(2, 2), mat({{1.0, 0.3}, {0.3, 2.0}})};
  const Matrix v = three.covariance(no_area);
  Matrix expected = Matrix::Zero(6, 6);
  for (int i = 0; i < 3; ++i) expected.block(2 * i, 2 * i, 2, 2) = no_area.sigma_e;
  CHECK((v - expected).norm() == 0.0);
  CHECK_THROWS_AS((void)build_area_design(d, 2), ValidationError);
}

TEST_CASE("covariance is SPD for valid theta") {
  Engine rng(5);
  const Dataset d = oracle::random_dataset(rng, {});
  for (int k = 0; k < 10; ++k) {
    const VarianceComponents theta = oracle::random_theta(rng, 2);
    for (std::size_t a = 0; a < d.areas(); ++a) {
      const Matrix v = build_area_design(d, a).covariance(theta);
      CHECK(is_positive_definite(v));
      CHECK(asymmetry(v) == 0.0);
    }
  }
}

TEST_CASE("WLS with identity covariance and no area effect is stacked OLS") {
  Engine rng(11);
  const Dataset d = oracle::random_dataset(rng, {});
  const oracle::DenseModel m = oracle::dense_model(d);
  const Vector ols = (m.x.transpose() * m.x).ldlt().solve(Vector(m.x.transpose() * m.y));
  const VarianceComponents theta{Matrix::Zero(2, 2), Matrix::Identity(2, 2)};
  CHECK((wls_beta(d, theta) - ols).norm() < 1e-10 * (1.0 + ols.norm()));
}

TEST_CASE("WLS recovers noiseless coefficients") {
  Engine rng(12);
  const Vector beta = vec({0.5, -1.0, 2.0, 0.25});
  oracle::RandomDesign design;
  design.areas = 5;
  const Dataset d = fixture::noiseless(oracle::random_dataset(rng, design), beta);
  CHECK((wls_beta(d, fixture::truth_theta()) - beta).norm() < 1e-10);
}

TEST_CASE("WLS and restricted likelihood match the dense GLS oracle") {
  const Dataset tiny = tiny_dataset();
  const VarianceComponents theta = fixture::truth_theta();
  const oracle::DenseGls dense = oracle::dense_gls(tiny, theta);
  CHECK((wls_beta(tiny, theta) - dense.beta).norm() < 1e-9);
  CHECK(restricted_loglik(tiny, theta) == doctest::Approx(dense.loglik).epsilon(1e-10));

  Engine rng(13);
  for (int k = 0; k < 20; ++k) {
    oracle::RandomDesign design;
    design.areas = 3 + k % 3;
    design.blocks = k % 2 ? std::vector<int>{2, 2} : std::vector<int>{1, 3, 2};
    const Dataset d = oracle::random_dataset(rng, design);
    const VarianceComponents t = oracle::random_theta(rng, d.responses());
    const oracle::DenseGls g = oracle::dense_gls(d, t);
    CHECK((wls_beta(d, t) - g.beta).norm() < 1e-9 * (1.0 + g.beta.norm()));
    CHECK(std::abs(restricted_loglik(d, t) - g.loglik) < 1e-8 * (1.0 + std::abs(g.loglik)));
  }
}

TEST_CASE("WLS is invariant to area and unit order") {
  Engine rng(14);
  oracle::RandomDesign design;
  design.areas = 8;
  const Dataset d = oracle::random_dataset(rng, design);
  std::vector<AreaSample> shuffled(d.all_areas().begin(), d.all_areas().end());
  std::vector<AreaLabel> labels;
  for (const AreaSample& a : shuffled) labels.push_back(a.label);
  std::reverse(labels.begin(), labels.end());
  for (std::size_t k = 0; k < shuffled.size(); ++k) {
    AreaSample& a = shuffled[k];
    a.label = labels[k];
    std::vector<int> order(static_cast<std::size_t>(a.units()));
    for (int i = 0; i < a.units(); ++i) order[static_cast<std::size_t>(i)] = a.units() - 1 - i;
    AreaSample b = a;
    for (int i = 0; i < a.units(); ++i) {
      b.weights[i] = a.weights[order[static_cast<std::size_t>(i)]];
      b.y.row(i) = a.y.row(order[static_cast<std::size_t>(i)]);
      b.x.row(i) = a.x.row(order[static_cast<std::size_t>(i)]);
    }
    a = b;
  }
  const Dataset p = make_dataset(d.layout(), shuffled);
  const VarianceComponents theta = oracle::random_theta(rng, 2);
  CHECK((wls_beta(d, theta) - wls_beta(p, theta)).norm() < 1e-10);
  CHECK(std::abs(restricted_loglik(d, theta) - restricted_loglik(p, theta)) < 1e-10);
}

TEST_CASE("rank deficiency names the covariate block") {
  std::vector<AreaSample> areas;
  areas.push_back(fixture::area(1, 5, vec({1, 1}), mat({{1, 2}, {3, 4}}), mat({{1, 2, 1, 1}, {1, 2, 1, 3}}), vec({1, 2, 1, 2})));
  areas.push_back(fixture::area(2, 5, vec({1, 1}), mat({{1, 2}, {3, 4}}), mat({{1, 2, 1, 1}, {1, 2, 1, 2}}), vec({1, 2, 1, 2})));
  const Dataset d = make_dataset(BlockLayout({2, 2}), std::move(areas));
  try {
    (void)wls_beta(d, fixture::truth_theta());
    FAIL("expected a singular system");
  } catch (const SingularMatrixError& e) {
    CHECK(std::string(e.what()).find("response 1") != std::string::npos);
  }
}

TEST_CASE("predicted area effects") {
  Engine rng(15);
  const Vector beta = vec({1.0, 0.5, -1.0, 2.0});
  const Dataset d = oracle::random_dataset(rng, {}, &beta, nullptr);
  const auto aggregates = aggregate(d);

  // no area effect
  const AreaEffects none = predict_area_effects(d, aggregates, {Matrix::Zero(2, 2), Matrix::Identity(2, 2)}, beta);
  for (const Vector& u : none.area_effects) CHECK(u.norm() == 0.0);

  // noiseless data: zero weighted residual everywhere
  const Dataset noiseless = fixture::noiseless(d, beta);
  const AreaEffects zero = predict_area_effects(noiseless, aggregate(noiseless), fixture::truth_theta(), beta);
  for (const Vector& u : zero.area_effects) CHECK(u.norm() < 1e-12);

  // single-unit area with Sigma_u = Sigma_e = I: k2 = 1 so Gamma = I/2
  std::vector<AreaSample> areas;
  areas.push_back(fixture::area(1, 5, vec({3.0}), mat({{2.0, 5.0}}), mat({{1, 1.0, 1, 2.0}}), vec({1, 1, 1, 1})));
  areas.push_back(fixture::area(2, 5, vec({1, 1}), mat({{1, 2}, {3, 4}}), mat({{1, 2, 1, 1}, {1, 0, 1, 3}}), vec({1, 1, 1, 2})));
  const Dataset half = make_dataset(BlockLayout({2, 2}), std::move(areas));
  const VarianceComponents identity{Matrix::Identity(2, 2), Matrix::Identity(2, 2)};
  const AreaEffects h = predict_area_effects(half, aggregate(half), identity, beta);
  // residual: y - X beta = (2 - 1.5, 5 - 3) = (0.5, 2)
  CHECK((h.area_effects[0] - vec({0.25, 1.0})).norm() < 1e-15);
  CHECK((h.residuals[0].row(0) - vec({0.25, 1.0}).transpose()).norm() < 1e-15);
}
