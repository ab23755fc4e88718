#include "cli.hpp"

#include "msae/aggregate.hpp"
#include "msae/predictors.hpp"
#include "msae/simulation.hpp"
#include "msae/uncertainty.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#ifndef MSAE_VERSION
#define MSAE_VERSION "unknown"
#endif

namespace msae::cli {

namespace {

const char* on_off(bool v) { return v ? "on" : "off"; }

bool parse_on_off(const std::string& key, const std::string& value) {
  if (value == "on") return true;
  if (value == "off") return false;
  throw ValidationError("flag --" + key + " expects on|off, got '" + value + "'");
}

std::string absolute_or_empty(const std::string& path) {
  return path.empty() ? path : fs::absolute(path).lexically_normal().string();
}

DesignVariance design_variance(const Options& o) {
  return o.fpc ? DesignVariance::srswor_fpc : DesignVariance::with_replacement;
}

RemlOptions reml_options(const Options& o) {
  RemlOptions r;
  r.seed = o.seed;
  r.max_iterations = o.max_iterations;
  return r;
}

struct Context {
  const Options& options;
  RunManifest& manifest;
  fs::path out;

  Dataset load() {
    if (options.units.empty() || options.aux.empty()) throw ValidationError("--units and --aux are required");
    manifest.inputs[options.units] = digest_file(options.units);
    manifest.inputs[options.aux] = digest_file(options.aux);
    Dataset data = read_dataset(options.units, options.aux);
    return options.calibrated ? calibrate_weights(data) : data;
  }

  FittedModel fit(const Dataset& data) {
    FittedModel f = fit_survey_weighted(data, reml_options(options));
    manifest.convergence.push_back(f.convergence);
    return f;
  }

  void output(const std::string& name) { manifest.outputs[name] = ""; }
  fs::path path(const std::string& name) {
    output(name);
    return out / name;
  }
};

void run_fit(Context& c) {
  const Dataset data = c.load();
  write_fitted(c.fit(data), c.path("fit.csv"));
}

void run_calibrate(Context& c) {
  const Dataset data = c.load();
  write_units(calibrate_weights(data), c.path("units_calibrated.csv"));
}

std::vector<AreaPrediction> predictions_for(Context& c, Dataset& data, Estimator e, FittedModel* fitted_out) {
  switch (e) {
    case Estimator::dir:
      return direct_estimator(data, design_variance(c.options));
    case Estimator::myr: {
      FittedModel f = c.fit(data);
      if (fitted_out) *fitted_out = f;
      return mpeblup(data, f);
    }
    case Estimator::mu: {
      if (!c.options.calibrated) data = calibrate_weights(data);
      FittedModel f = c.fit(data);
      if (fitted_out) *fitted_out = f;
      return unified_predictor(data, f);
    }
    case Estimator::uyr:
      return univariate_peblup_all(data, reml_options(c.options));
    case Estimator::mfh: {
      const auto aggregates = aggregate(data);
      std::vector<std::optional<Matrix>> cov;
      for (std::size_t d = 0; d < data.areas(); ++d) {
        cov.push_back(design_covariance(data.area(d), aggregates[d], design_variance(c.options)));
      }
      const MfhFit fit = fit_mfh(data, aggregates, cov, reml_options(c.options));
      c.manifest.convergence.push_back(fit.convergence);
      return mfh_predict(data, aggregates, cov, fit.used, fit.sigma_u);
    }
  }
  throw ValidationError("unknown estimator");
}

void run_predict(Context& c) {
  Dataset data = c.load();
  const Estimator e = parse_estimator(c.options.estimator);
  FittedModel fitted;
  const auto predictions = predictions_for(c, data, e, &fitted);
  if (e == Estimator::myr || e == Estimator::mu) write_fitted(fitted, c.path("fit.csv"));
  write_predictions(predictions, c.path("predictions.csv"));
}

void run_mse(Context& c) {
  Dataset data = c.load();
  const Estimator e = parse_estimator(c.options.estimator);
  if (e != Estimator::myr && e != Estimator::mu) throw ValidationError("mse supports --estimator myr|mu");
  FittedModel fitted;
  auto predictions = predictions_for(c, data, e, &fitted);
  BootstrapConfig config;
  config.replicates = c.options.bootstrap;
  config.seed = c.options.seed;
  config.workers = c.options.threads;
  config.refit_theta = !c.options.plug_in;
  config.reml = reml_options(c.options);
  const BootstrapResult boot = bootstrap_mse(data, fitted, config, e);
  attach_mse(predictions, boot.mse, MseSource::bootstrap);
  write_fitted(fitted, c.path("fit.csv"));
  write_predictions(predictions, c.path("predictions.csv"));
}

void run_simulate(Context& c) {
  const SimulationDesign design = SimulationDesign::standard(c.options.seed);
  if (c.options.experiment == "a") {
    ExperimentAOptions a;
    a.replicates = c.options.replicates;
    a.workers = c.options.threads;
    const ExperimentAResult result = run_experiment_a(design, a);
    write_file_atomic(c.path("table.csv"), format_group_table(result.groups));
    write_file_atomic(c.path("area_series.csv"), format_area_series(result.areas));
  } else if (c.options.experiment == "b") {
    ExperimentBOptions b;
    b.truth_replicates = c.options.truth_replicates;
    b.replicates = c.options.replicates;
    b.bootstrap = c.options.bootstrap;
    b.workers = c.options.threads;
    b.refit_theta = !c.options.plug_in;
    const ExperimentBResult result = run_experiment_b(design, b);
    write_file_atomic(c.path("experiment_b.csv"), format_experiment_b(result.rows));
  } else {
    throw ValidationError("--experiment expects a|b");
  }
}

void run_diagnostics(Context& c) {
  const Dataset data = c.load();
  const FittedModel fitted = c.fit(data);
  write_fitted(fitted, c.path("fit.csv"));
  c.output("qq_area_effects.csv");
  c.output("qq_unit_residuals.csv");
  emit_diagnostics(data, fitted, c.out);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConvergenceError*>(&e)) return kNonConvergence;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return kIo;
  return kValidation;
}

// key = value lines become "--key value" arguments placed before the explicit ones.
std::vector<std::string> config_arguments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos) throw ValidationError("config line without '=': " + line);
      continue;
    }
    const auto strip = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r\"");
      const auto b = s.find_last_not_of(" \t\r\"");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = strip(line.substr(0, eq));
    if (key.rfind("--", 0) == 0) key.erase(0, 2);
    out.push_back("--" + key);
    out.push_back(strip(line.substr(eq + 1)));
  }
  return out;
}

}  // namespace

std::map<std::string, std::string> to_flags(const Options& o) {
  return {
      {"units", absolute_or_empty(o.units)},
      {"aux", absolute_or_empty(o.aux)},
      {"out", absolute_or_empty(o.out)},
      {"seed", std::to_string(o.seed)},
      {"estimator", o.estimator},
      {"bootstrap", std::to_string(o.bootstrap)},
      {"replicates", std::to_string(o.replicates)},
      {"truth-replicates", std::to_string(o.truth_replicates)},
      {"max-iterations", std::to_string(o.max_iterations)},
      {"experiment", o.experiment},
      {"fpc", on_off(o.fpc)},
      {"calibrated", on_off(o.calibrated)},
      {"plug-in", on_off(o.plug_in)},
  };
}

Options from_flags(const std::map<std::string, std::string>& flags) {
  Options o;
  const auto get = [&](const std::string& key) -> const std::string* {
    const auto it = flags.find(key);
    return it == flags.end() ? nullptr : &it->second;
  };
  try {
    if (auto v = get("units")) o.units = *v;
    if (auto v = get("aux")) o.aux = *v;
    if (auto v = get("out")) o.out = *v;
    if (auto v = get("seed")) o.seed = std::stoull(*v);
    if (auto v = get("estimator")) o.estimator = *v;
    if (auto v = get("bootstrap")) o.bootstrap = std::stoi(*v);
    if (auto v = get("replicates")) o.replicates = std::stoi(*v);
    if (auto v = get("truth-replicates")) o.truth_replicates = std::stoi(*v);
    if (auto v = get("max-iterations")) o.max_iterations = std::stoi(*v);
    if (auto v = get("experiment")) o.experiment = *v;
    if (auto v = get("fpc")) o.fpc = parse_on_off("fpc", *v);
    if (auto v = get("calibrated")) o.calibrated = parse_on_off("calibrated", *v);
    if (auto v = get("plug-in")) o.plug_in = parse_on_off("plug-in", *v);
  } catch (const std::logic_error& e) {
    throw ValidationError(std::string("malformed manifest flag: ") + e.what());
  }
  return o;
}

RunManifest run_command(const std::string& command, const Options& options) {
  const auto start = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = command;
  manifest.flags = to_flags(options);
  manifest.seed = options.seed;
  manifest.version = MSAE_VERSION;

  const fs::path out = options.out.empty() ? fs::path(".") : fs::path(options.out);
  fs::create_directories(out);
  Context c{options, manifest, out};
  if (command == "fit") {
    run_fit(c);
  } else if (command == "calibrate") {
    run_calibrate(c);
  } else if (command == "predict") {
    run_predict(c);
  } else if (command == "mse") {
    run_mse(c);
  } else if (command == "simulate") {
    run_simulate(c);
  } else if (command == "diagnostics") {
    run_diagnostics(c);
  } else {
    throw ValidationError("unknown command '" + command + "'");
  }
  for (auto& [name, digest] : manifest.outputs) digest = digest_file(out / name);
  manifest.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_file_atomic(out / "manifest.json", manifest.to_json());
  return manifest;
}

bool replay(const fs::path& manifest_path, const fs::path& out, unsigned threads, std::string& report) {
  const RunManifest recorded = RunManifest::from_json(read_file(manifest_path));
  for (const auto& [path, digest] : recorded.inputs) {
    if (digest_file(path) != digest) {
      report = "input " + path + " changed since the recorded run";
      return false;
    }
  }
  Options options = from_flags(recorded.flags);
  options.out = out.string();
  options.threads = threads;
  const RunManifest again = run_command(recorded.command, options);
  bool same = again.outputs.size() == recorded.outputs.size();
  std::string lines;
  for (const auto& [name, digest] : recorded.outputs) {
    const auto it = again.outputs.find(name);
    const bool match = it != again.outputs.end() && it->second == digest;
    same = same && match;
    lines += (match ? "identical " : "DIFFERENT ") + name + "\n";
  }
  report = lines;
  return same;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") {
      try {
        std::vector<std::string> from_file = config_arguments(args[i + 1]);
        args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
        args.insert(args.begin() + (args.empty() ? 0 : 1), from_file.begin(), from_file.end());
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
      }
      break;
    }
  }

  CLI::App app{"Multivariate pseudo-EBLUP small-area estimation"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_version_flag("--version", MSAE_VERSION);

  Options options;
  std::string fpc = "off";
  std::string calibrated = "off";
  std::string plug_in = "off";
  std::string manifest_path;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--out", options.out, "output directory");
    sub->add_option("--seed", options.seed, "master seed");
    sub->add_option("--threads", options.threads, "worker threads (0 = all cores)");
    sub->add_option("--config", "key = value file mirroring flag names");
  };
  const auto inputs = [&](CLI::App* sub) {
    sub->add_option("--units", options.units, "unit-level sample file")->required();
    sub->add_option("--aux", options.aux, "area auxiliary file")->required();
    sub->add_option("--calibrated", calibrated, "calibrate weights before fitting")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--fpc", fpc, "finite-population correction in design covariances")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--max-iterations", options.max_iterations, "REML iteration cap")->check(CLI::PositiveNumber);
  };

  auto* fit = app.add_subcommand("fit", "REML fit with survey-weighted coefficients");
  common(fit);
  inputs(fit);
  auto* calibrate = app.add_subcommand("calibrate", "calibrate weights to the auxiliary means");
  common(calibrate);
  inputs(calibrate);
  auto* predict = app.add_subcommand("predict", "area predictions");
  common(predict);
  inputs(predict);
  predict->add_option("--estimator", options.estimator, "dir|myr|mu|uyr|mfh")
      ->check(CLI::IsMember({"dir", "myr", "mu", "uyr", "mfh"}, CLI::ignore_case));
  auto* mse = app.add_subcommand("mse", "parametric bootstrap MSE matrices");
  common(mse);
  inputs(mse);
  mse->add_option("--estimator", options.estimator, "myr|mu")->check(CLI::IsMember({"myr", "mu"}, CLI::ignore_case));
  mse->add_option("--bootstrap", options.bootstrap, "bootstrap replicates B")->check(CLI::PositiveNumber);
  mse->add_option("--plug-in", plug_in, "reuse theta-hat in every replicate")->check(CLI::IsMember({"on", "off"}));
  auto* simulate = app.add_subcommand("simulate", "simulation experiments");
  common(simulate);
  simulate->add_option("--experiment", options.experiment, "a|b")->check(CLI::IsMember({"a", "b"}));
  simulate->add_option("--replicates", options.replicates, "Monte Carlo replicates L")->check(CLI::PositiveNumber);
  simulate->add_option("--bootstrap", options.bootstrap, "bootstrap replicates B")->check(CLI::PositiveNumber);
  simulate->add_option("--truth-replicates", options.truth_replicates, "replicates for the true MSE")
      ->check(CLI::PositiveNumber);
  simulate->add_option("--plug-in", plug_in, "reuse theta-hat in every bootstrap replicate")
      ->check(CLI::IsMember({"on", "off"}));
  auto* diagnostics = app.add_subcommand("diagnostics", "Mahalanobis Q-Q plot data");
  common(diagnostics);
  inputs(diagnostics);
  auto* replay_cmd = app.add_subcommand("replay", "re-run a manifest and compare outputs");
  replay_cmd->add_option("--manifest", manifest_path, "manifest.json of a previous run")->required();
  replay_cmd->add_option("--out", options.out, "output directory for the rerun")->required();
  replay_cmd->add_option("--threads", options.threads, "worker threads");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    options.fpc = parse_on_off("fpc", fpc);
    options.calibrated = parse_on_off("calibrated", calibrated);
    options.plug_in = parse_on_off("plug-in", plug_in);
    for (auto& ch : options.estimator) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    CLI::App* chosen = app.get_subcommands().front();
    if (chosen == replay_cmd) {
      std::string report;
      const bool same = replay(manifest_path, options.out, options.threads, report);
      std::cout << report;
      return same ? kSuccess : kMismatch;
    }
    const RunManifest m = run_command(chosen->get_name(), options);
    for (const auto& [name, digest] : m.outputs) std::cout << name << ' ' << digest << '\n';
    return kSuccess;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

}  // namespace msae::cli
