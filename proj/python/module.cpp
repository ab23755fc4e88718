#include "msae/aggregate.hpp"
#include "msae/io.hpp"
#include "msae/predictors.hpp"
#include "msae/reml.hpp"
#include "msae/simulation.hpp"
#include "msae/uncertainty.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace msae;

namespace {

Dataset dataset_from_arrays(const Eigen::Ref<const Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>>& area_id,
                            const Vector& weight, const Matrix& y, const Matrix& x, const std::vector<int>& block_sizes,
                            const Eigen::Ref<const Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>>& aux_area_id,
                            const Eigen::Ref<const Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>>& population_size,
                            const Matrix& xbar) {
  const BlockLayout layout(block_sizes);
  const Eigen::Index n = area_id.size();
  if (weight.size() != n || y.rows() != n || x.rows() != n) throw ValidationError("unit arrays differ in length");
  if (y.cols() != layout.responses() || x.cols() != layout.covariates() || xbar.cols() != layout.covariates()) {
    throw ValidationError("inconsistent block structure");
  }
  if (population_size.size() != aux_area_id.size() || xbar.rows() != aux_area_id.size()) {
    throw ValidationError("auxiliary arrays differ in length");
  }
  const auto split = [&](const Eigen::RowVectorXd& row) {
    std::vector<Vector> out;
    for (int r = 0; r < layout.responses(); ++r) out.push_back(row.segment(layout.offset(r), layout.size(r)).transpose());
    return out;
  };
  std::vector<UnitRecord> units;
  for (Eigen::Index i = 0; i < n; ++i) {
    units.push_back(UnitRecord{area_id[i], weight[i], y.row(i).transpose(), split(x.row(i))});
  }
  std::vector<AuxRecord> aux;
  for (Eigen::Index d = 0; d < aux_area_id.size(); ++d) {
    aux.push_back(AuxRecord{aux_area_id[d], population_size[d], split(xbar.row(d))});
  }
  return validate_dataset(units, aux);
}

py::dict convergence_dict(const ConvergenceRecord& c) {
  py::dict d;
  d["iterations"] = c.iterations;
  d["evaluations"] = c.evaluations;
  d["gradient_norm"] = c.gradient_norm;
  d["loglik"] = c.loglik;
  d["initial_loglik"] = c.initial_loglik;
  d["converged"] = c.converged;
  d["boundary"] = c.boundary;
  return d;
}

RemlOptions reml(std::uint64_t seed, int max_iterations) {
  RemlOptions o;
  o.seed = seed;
  o.max_iterations = max_iterations;
  return o;
}

}  // namespace

PYBIND11_MODULE(msae, m) {
  m.doc() = "Multivariate pseudo-EBLUP small-area estimation";
  m.attr("__version__") = MSAE_VERSION;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<SingularMatrixError>(m, "SingularMatrixError", base.ptr());
  py::register_exception<ConvergenceError>(m, "ConvergenceError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  py::class_<VarianceComponents>(m, "VarianceComponents")
      .def(py::init<Matrix, Matrix>(), py::arg("sigma_u"), py::arg("sigma_e"))
      .def_readwrite("sigma_u", &VarianceComponents::sigma_u)
      .def_readwrite("sigma_e", &VarianceComponents::sigma_e)
      .def("theta", &VarianceComponents::theta)
      .def_static("from_theta", &VarianceComponents::from_theta, py::arg("responses"), py::arg("theta"));

  py::class_<Dataset>(m, "Dataset")
      .def_static("from_arrays", &dataset_from_arrays, py::arg("area_id"), py::arg("weight"), py::arg("y"), py::arg("x"),
                  py::arg("block_sizes"), py::arg("aux_area_id"), py::arg("population_size"), py::arg("xbar"))
      .def_static("read", &read_dataset, py::arg("units"), py::arg("aux"))
      .def_property_readonly("responses", &Dataset::responses)
      .def_property_readonly("covariates", &Dataset::covariates)
      .def_property_readonly("areas", &Dataset::areas)
      .def_property_readonly("total_units", &Dataset::total_units)
      .def("area_ids", [](const Dataset& d) {
        std::vector<AreaLabel> ids;
        for (const AreaSample& a : d.all_areas()) ids.push_back(a.label);
        return ids;
      })
      .def("weights", [](const Dataset& d, std::size_t area) { return Vector(d.area(area).weights); }, py::arg("area"))
      .def("write", [](const Dataset& d, const fs::path& units, const fs::path& aux) {
        write_units(d, units);
        write_aux(d, aux);
      }, py::arg("units"), py::arg("aux"));

  py::class_<FittedModel>(m, "FittedModel")
      .def_property_readonly("sigma_u", [](const FittedModel& f) { return f.theta.sigma_u; })
      .def_property_readonly("sigma_e", [](const FittedModel& f) { return f.theta.sigma_e; })
      .def_property_readonly("theta", [](const FittedModel& f) { return f.theta; })
      .def_readonly("beta", &FittedModel::beta)
      .def_readonly("phi", &FittedModel::phi)
      .def_property_readonly("survey_weighted",
                             [](const FittedModel& f) { return f.coefficient_method == CoefficientMethod::survey_weighted; })
      .def_property_readonly("convergence", [](const FittedModel& f) { return convergence_dict(f.convergence); });

  py::class_<AreaPrediction>(m, "AreaPrediction")
      .def_readonly("area_id", &AreaPrediction::area_id)
      .def_property_readonly("estimator", [](const AreaPrediction& p) { return std::string(to_string(p.estimator)); })
      .def_readonly("mu", &AreaPrediction::mu)
      .def_readonly("mse", &AreaPrediction::mse)
      .def_property_readonly("mse_source", [](const AreaPrediction& p) { return std::string(to_string(p.mse_source)); });

  m.def("fit_reml", [](const Dataset& d, std::uint64_t seed, int max_iterations) { return fit_reml(d, reml(seed, max_iterations)); },
        py::arg("dataset"), py::arg("seed") = 0, py::arg("max_iterations") = 200);
  m.def("fit_survey_weighted",
        [](const Dataset& d, std::uint64_t seed, int max_iterations) { return fit_survey_weighted(d, reml(seed, max_iterations)); },
        py::arg("dataset"), py::arg("seed") = 0, py::arg("max_iterations") = 200);
  m.def("restricted_loglik", &restricted_loglik, py::arg("dataset"), py::arg("theta"));
  m.def("calibrate_weights", &calibrate_weights, py::arg("dataset"));
  m.def("gamma_dw", &gamma_dw, py::arg("theta"), py::arg("k2"));
  m.def("g1", &g1, py::arg("theta"), py::arg("k2"));
  m.def("direct_estimator", [](const Dataset& d, bool fpc) {
    return direct_estimator(d, fpc ? DesignVariance::srswor_fpc : DesignVariance::with_replacement);
  }, py::arg("dataset"), py::arg("fpc") = false);
  m.def("beta_w", [](const Dataset& d, const VarianceComponents& theta) {
    const SurveyWeightedBeta b = beta_w(d, aggregate(d), theta);
    return py::make_tuple(b.beta, b.phi);
  }, py::arg("dataset"), py::arg("theta"));
  m.def("mpeblup", &mpeblup, py::arg("dataset"), py::arg("fitted"));
  m.def("unified_predictor", &unified_predictor, py::arg("calibrated"), py::arg("fitted"));
  m.def("univariate_peblup", [](const Dataset& d, std::uint64_t seed) { return univariate_peblup_all(d, reml(seed, 200)); },
        py::arg("dataset"), py::arg("seed") = 0);
  m.def("mfh_eblup", [](const Dataset& d, bool fpc) {
    const auto aggregates = aggregate(d);
    std::vector<std::optional<Matrix>> cov;
    for (std::size_t a = 0; a < d.areas(); ++a) {
      cov.push_back(design_covariance(d.area(a), aggregates[a], fpc ? DesignVariance::srswor_fpc : DesignVariance::with_replacement));
    }
    return mfh_eblup(d, aggregates, cov);
  }, py::arg("dataset"), py::arg("fpc") = false);
  m.def("bootstrap_mse",
        [](const Dataset& d, const FittedModel& f, int replicates, std::uint64_t seed, unsigned workers, bool refit,
           const std::string& estimator) {
          BootstrapConfig config;
          config.replicates = replicates;
          config.seed = seed;
          config.workers = workers;
          config.refit_theta = refit;
          py::gil_scoped_release release;
          return bootstrap_mse(d, f, config, parse_estimator(estimator)).mse;
        },
        py::arg("dataset"), py::arg("fitted"), py::arg("replicates") = 200, py::arg("seed") = 0, py::arg("workers") = 1,
        py::arg("refit_theta") = true, py::arg("estimator") = "myr");
  m.def("experiment_a_table",
        [](int replicates, std::uint64_t seed, unsigned workers) {
          ExperimentAOptions o;
          o.replicates = replicates;
          o.workers = workers;
          ExperimentAResult r;
          {
            py::gil_scoped_release release;
            r = run_experiment_a(SimulationDesign::standard(seed), o);
          }
          py::list rows;
          for (const GroupRow& g : r.groups) {
            rows.append(py::make_tuple(std::string(to_string(g.estimator)), g.response + 1, g.sample_size, g.arb, g.rrmse));
          }
          return rows;
        },
        py::arg("replicates"), py::arg("seed") = 20240601, py::arg("workers") = 1);
}
