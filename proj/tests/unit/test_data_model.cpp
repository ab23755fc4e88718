#include "fixtures.hpp"
#include "oracles.hpp"

#include "msae/data_model.hpp"

#include <doctest.h>

#include <limits>
#include <string>

using namespace msae;
using fixture::mat;
using fixture::vec;

namespace {

UnitRecord unit(AreaLabel area, double w, Vector y, std::vector<Vector> x) { return UnitRecord{area, w, std::move(y), std::move(x)}; }

AuxRecord aux(AreaLabel area, std::int64_t n, std::vector<Vector> xbar) { return AuxRecord{area, n, std::move(xbar)}; }

std::vector<UnitRecord> two_area_units() {
  return {unit(7, 2.0, vec({1, 2}), {vec({1, 0.5}), vec({1})}), unit(7, 3.0, vec({2, 1}), {vec({1, 1.5}), vec({1})}),
          unit(3, 1.0, vec({0, 4}), {vec({1, 2.0}), vec({1})})};
}

std::vector<AuxRecord> two_area_aux() {
  return {aux(3, 10, {vec({1, 2}), vec({1})}), aux(7, 20, {vec({1, 1}), vec({1})})};
}

std::string message_of(auto&& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("minimal valid input gives dense sorted areas with labels kept") {
  const Dataset d = validate_dataset(two_area_units(), two_area_aux());
  CHECK(d.areas() == 2);
  CHECK(d.responses() == 2);
  CHECK(d.covariates() == 3);
  CHECK(d.total_units() == 3);
  CHECK(d.area(0).label == 3);
  CHECK(d.area(1).label == 7);
  CHECK(d.area(1).units() == 2);
  CHECK(d.area(1).weights[1] == 3.0);
  CHECK(d.area(1).x(1, 1) == 1.5);
  CHECK(d.find_area(7) == std::optional<std::size_t>(1));
  CHECK_FALSE(d.find_area(5).has_value());
}

TEST_CASE("validation failures name area and field") {
  auto units = two_area_units();
  units[1].weight = 0.0;
  CHECK(message_of([&] { (void)validate_dataset(units, two_area_aux()); }).find("nonpositive weight") != std::string::npos);
  CHECK(message_of([&] { (void)validate_dataset(units, two_area_aux()); }).find("area 7") != std::string::npos);

  auto missing = two_area_units();
  missing.push_back(unit(4, 1.0, vec({0, 0}), {vec({1, 1.0}), vec({1})}));
  missing.push_back(unit(4, 1.0, vec({0, 0}), {vec({1, 1.0}), vec({1})}));
  CHECK(message_of([&] { (void)validate_dataset(missing, two_area_aux()); }) == "area 4 lacks auxiliary record");

  auto small = two_area_aux();
  small[1].population_size = 1;
  CHECK(message_of([&] { (void)validate_dataset(two_area_units(), small); }).find("N_d") != std::string::npos);

  auto blocks = two_area_units();
  blocks[2].covariates[1] = vec({1, 2});
  CHECK(message_of([&] { (void)validate_dataset(blocks, two_area_aux()); }).find("inconsistent block structure") !=
        std::string::npos);

  auto nan = two_area_units();
  nan[0].y[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK(message_of([&] { (void)validate_dataset(nan, two_area_aux()); }).find("missing") != std::string::npos);

  auto extra_aux = two_area_aux();
  extra_aux.push_back(aux(11, 5, {vec({1, 1}), vec({1})}));
  CHECK_THROWS_AS((void)validate_dataset(two_area_units(), extra_aux), ValidationError);
  CHECK_THROWS_AS((void)validate_dataset(std::vector<UnitRecord>{}, two_area_aux()), ValidationError);

  // n must exceed D: one unit per area is rejected.
  std::vector<UnitRecord> singles{unit(3, 1.0, vec({0, 0}), {vec({1, 1.0}), vec({1})}),
                                  unit(7, 1.0, vec({0, 0}), {vec({1, 1.0}), vec({1})})};
  CHECK_THROWS_AS((void)validate_dataset(singles, two_area_aux()), ValidationError);
}

TEST_CASE("validation is idempotent") {
  const Dataset d = validate_dataset(two_area_units(), two_area_aux());
  CHECK(validate_dataset(d) == d);
  CHECK(validate_dataset(d.unit_records(), d.aux_records()) == d);
}

TEST_CASE("theta round trips through the matrix pair") {
  Engine rng(42);
  for (int r = 1; r <= 4; ++r) {
    for (int k = 0; k < 5; ++k) {
      const VarianceComponents vc = oracle::random_theta(rng, r);
      const Vector t = vc.theta();
      CHECK(t.size() == VarianceComponents::theta_size(r));
      const VarianceComponents back = VarianceComponents::from_theta(r, t);
      CHECK((back.sigma_u - vc.sigma_u).norm() == 0.0);
      CHECK((back.sigma_e - vc.sigma_e).norm() == 0.0);
      CHECK(back.theta() == t);
    }
  }
  const VarianceComponents truth = fixture::truth_theta();
  CHECK(truth.theta() == vec({0.1, 0.4, 0.16, 0.9, 1.0, 0.75}));
  CHECK(truth.valid());
  CHECK_FALSE((VarianceComponents{mat({{1, 2}, {2, 1}}), Matrix::Identity(2, 2)}.valid()));
}

TEST_CASE("linear combinations transform value and MSE") {
  AreaPrediction p;
  p.area_id = 4;
  p.estimator = Estimator::myr;
  p.mu = vec({1.0, 2.0});
  p.mse = mat({{2.0, 0.5}, {0.5, 1.0}});
  p.mse_source = MseSource::bootstrap;
  const ScalarPrediction s = apply(LinearCombination(vec({1.0, -1.0})), p);
  CHECK(s.value == doctest::Approx(-1.0));
  CHECK(*s.mse == doctest::Approx(2.0));
  CHECK(s.mse_source == MseSource::bootstrap);
  CHECK_THROWS_AS(LinearCombination(vec({0.0, 0.0})), ValidationError);
  CHECK_THROWS_AS(LinearCombination(vec({1.0, std::numeric_limits<double>::infinity()})), ValidationError);
}

TEST_CASE("estimator and source tags parse case-insensitively") {
  CHECK(parse_estimator("MyR") == Estimator::myr);
  CHECK(to_string(Estimator::mfh) == "MFH");
  CHECK(parse_mse_source("bootstrap") == MseSource::bootstrap);
  CHECK_THROWS_AS((void)parse_estimator("eblup"), ValidationError);
}
