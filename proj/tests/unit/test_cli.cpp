#include "cli.hpp"
#include "fixtures.hpp"

#include "msae/io.hpp"

#include <doctest.h>

#include <string>
#include <vector>

using namespace msae;
using fixture::TempDir;
using fixture::write_text;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "msae");
  std::vector<char*> argv;
  for (std::string& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  return cli::main(static_cast<int>(args.size()), argv.data());
}

struct Inputs {
  TempDir dir{"cli"};
  std::string units = (dir / "units.csv").string();
  std::string aux = (dir / "aux.csv").string();
  Inputs() {
    const Dataset d = fixture::calibratable(fixture::standard_sample(5, fixture::truth_theta(), fixture::truth_beta()));
    write_units(d, units);
    write_aux(d, aux);
  }
  [[nodiscard]] std::string out(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("exit codes follow the error class") {
  const Inputs in;
  CHECK(run({"fit", "--units", in.units, "--aux", in.aux, "--out", in.out("ok")}) == cli::kSuccess);
  CHECK(fs::exists(in.dir / "ok" / "fit.csv"));
  CHECK(fs::exists(in.dir / "ok" / "manifest.json"));

  CHECK(run({"fit", "--units", in.out("missing.csv"), "--aux", in.aux, "--out", in.out("io")}) == cli::kIo);

  write_text(in.dir / "bad.csv", "area_id,weight,y_1,x1_1\n1,-1,0,1\n");
  CHECK(run({"fit", "--units", in.out("bad.csv"), "--aux", in.aux, "--out", in.out("v")}) == cli::kValidation);

  CHECK(run({"fit", "--units", in.units, "--aux", in.aux, "--out", in.out("nc"), "--max-iterations", "1"}) ==
        cli::kNonConvergence);

  CHECK(run({"predict", "--units", in.units, "--aux", in.aux, "--estimator", "nope"}) == cli::kValidation);
  CHECK(run({"fit", "--units", in.units}) == cli::kValidation);
  CHECK(run({}) == cli::kValidation);
}

TEST_CASE("config file supplies flags") {
  const Inputs in;
  write_text(in.dir / "run.cfg", "# comment\nunits = " + in.units + "\naux = \"" + in.aux + "\"\nseed = 9\n");
  CHECK(run({"fit", "--config", in.out("run.cfg"), "--out", in.out("cfg")}) == cli::kSuccess);
  const RunManifest m = RunManifest::from_json(read_file(in.dir / "cfg" / "manifest.json"));
  CHECK(m.seed == 9);
  CHECK(m.flags.at("units") == fs::absolute(in.units).lexically_normal().string());
  CHECK(run({"fit", "--config", in.out("absent.cfg")}) == cli::kIo);
}

TEST_CASE("predict writes one row per area for every estimator") {
  const Inputs in;
  const Dataset d = read_dataset(in.units, in.aux);
  for (const char* e : {"dir", "myr", "mu", "uyr", "mfh"}) {
    CAPTURE(e);
    const std::string out = in.out(std::string("pred_") + e);
    REQUIRE(run({"predict", "--units", in.units, "--aux", in.aux, "--estimator", e, "--out", out}) == cli::kSuccess);
    const auto p = read_predictions(fs::path(out) / "predictions.csv");
    CHECK(p.size() == d.areas());
    CHECK(p.front().area_id == d.area(0).label);
  }
}

TEST_CASE("manifest records flags, digests and convergence") {
  const Inputs in;
  cli::Options o;
  o.units = in.units;
  o.aux = in.aux;
  o.out = in.out("mse");
  o.estimator = "myr";
  o.bootstrap = 4;
  o.seed = 21;
  const RunManifest m = cli::run_command("mse", o);
  CHECK(m.command == "mse");
  CHECK(m.flags.count("threads") == 0);
  CHECK(m.flags.at("bootstrap") == "4");
  CHECK(m.outputs.at("predictions.csv") == digest_file(fs::path(o.out) / "predictions.csv"));
  CHECK(m.inputs.at(in.units) == digest_file(in.units));
  REQUIRE(m.convergence.size() == 1);
  CHECK(m.convergence[0].converged);
  const auto p = read_predictions(fs::path(o.out) / "predictions.csv");
  CHECK(p[0].mse_source == MseSource::bootstrap);
  CHECK(cli::from_flags(cli::to_flags(o)).bootstrap == 4);
}

TEST_CASE("replay with more threads reproduces outputs byte for byte") {
  const Inputs in;
  cli::Options o;
  o.units = in.units;
  o.aux = in.aux;
  o.out = in.out("first");
  o.bootstrap = 6;
  o.seed = 3;
  o.threads = 1;
  (void)cli::run_command("mse", o);
  std::string report;
  CHECK(cli::replay(fs::path(o.out) / "manifest.json", in.dir / "again", 3, report));
  CHECK(report.find("identical predictions.csv") != std::string::npos);
  CHECK(read_file(in.dir / "first" / "predictions.csv") == read_file(in.dir / "again" / "predictions.csv"));

  write_text(in.units, read_file(in.units) + "\n");
  CHECK_FALSE(cli::replay(fs::path(o.out) / "manifest.json", in.dir / "third", 1, report));
  CHECK(report.find("changed") != std::string::npos);
}

TEST_CASE("replay subcommand exit status") {
  const Inputs in;
  CHECK(run({"calibrate", "--units", in.units, "--aux", in.aux, "--out", in.out("cal")}) == cli::kSuccess);
  CHECK(run({"replay", "--manifest", in.out("cal") + "/manifest.json", "--out", in.out("cal2"), "--threads", "2"}) ==
        cli::kSuccess);
  CHECK(run({"replay", "--manifest", in.out("nothing.json"), "--out", in.out("x")}) == cli::kIo);
}

TEST_CASE("simulate and diagnostics subcommands") {
  const Inputs in;
  CHECK(run({"simulate", "--experiment", "a", "--replicates", "2", "--out", in.out("sa")}) == cli::kSuccess);
  CHECK(read_file(in.dir / "sa" / "table.csv").find("MYR") != std::string::npos);
  CHECK(fs::exists(in.dir / "sa" / "area_series.csv"));
  CHECK(run({"simulate", "--experiment", "b", "--replicates", "1", "--bootstrap", "2", "--truth-replicates", "2",
             "--out", in.out("sb")}) == cli::kSuccess);
  CHECK(fs::exists(in.dir / "sb" / "experiment_b.csv"));
  CHECK(run({"diagnostics", "--units", in.units, "--aux", in.aux, "--out", in.out("dg")}) == cli::kSuccess);
  CHECK(fs::exists(in.dir / "dg" / "qq_area_effects.csv"));
  CHECK(fs::exists(in.dir / "dg" / "qq_unit_residuals.csv"));
}
