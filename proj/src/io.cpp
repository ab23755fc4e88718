#include "msae/io.hpp"

#include "msae/aggregate.hpp"
#include "msae/format.hpp"
#include "msae/mner_core.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <regex>
#include <sstream>
#include <unistd.h>

namespace msae {

namespace {

using Row = std::vector<std::string>;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

Row split(const std::string& line) {
  Row out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

struct Table {
  fs::path path;
  Row header;
  std::vector<std::pair<int, Row>> rows;  // line number, cells
};

[[noreturn]] void schema_error(const fs::path& path, int line, const std::string& what) {
  throw ValidationError(path.string() + ":" + std::to_string(line) + ": " + what);
}

Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Table t;
  t.path = path;
  std::string line;
  int number = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    Row cells = split(line);
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size()) {
      schema_error(path, number, "expected " + std::to_string(t.header.size()) + " columns, found " +
                                     std::to_string(cells.size()));
    }
    t.rows.emplace_back(number, std::move(cells));
  }
  if (in.bad()) throw IoError("error reading " + path.string());
  if (!have_header) schema_error(path, 1, "empty file, header expected");
  return t;
}

bool is_missing(const std::string& cell) { return cell.empty() || cell == "NA" || cell == "na" || cell == "NaN" || cell == "nan"; }

double parse_double(const Table& t, int line, const std::string& cell, const std::string& column, bool allow_missing) {
  if (is_missing(cell)) {
    if (allow_missing) return std::numeric_limits<double>::quiet_NaN();
    schema_error(t.path, line, "missing value in column " + column);
  }
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  if (*begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) schema_error(t.path, line, "non-numeric value '" + cell + "' in column " + column);
  return value;
}

std::int64_t parse_int(const Table& t, int line, const std::string& cell, const std::string& column) {
  std::int64_t value = 0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (cell.empty() || ec != std::errc() || ptr != end) {
    schema_error(t.path, line, "non-integer value '" + cell + "' in column " + column);
  }
  return value;
}

// Parses prefix{r}_{j} covariate columns starting at `first`; returns block sizes.
std::vector<int> covariate_blocks(const Table& t, std::size_t first, const std::string& prefix, int responses) {
  const std::regex pattern(prefix + "([0-9]+)_([0-9]+)");
  std::vector<int> sizes;
  for (std::size_t c = first; c < t.header.size(); ++c) {
    std::smatch m;
    if (!std::regex_match(t.header[c], m, pattern)) {
      schema_error(t.path, 1, "unexpected column '" + t.header[c] + "', expected " + prefix + "{r}_{j}");
    }
    const int r = std::stoi(m[1]);
    const int j = std::stoi(m[2]);
    if (r > responses) {
      schema_error(t.path, 1, "column " + t.header[c] + " refers to response " + std::to_string(r) + " but y_" +
                                  std::to_string(r) + " is missing");
    }
    if (r == static_cast<int>(sizes.size()) + 1 && j == 1) {
      sizes.push_back(1);
    } else if (r == static_cast<int>(sizes.size()) && j == sizes.back() + 1) {
      ++sizes.back();
    } else {
      schema_error(t.path, 1, "covariate columns out of order at '" + t.header[c] + "'");
    }
  }
  if (static_cast<int>(sizes.size()) != responses) {
    schema_error(t.path, 1, "no covariate columns for response " + std::to_string(sizes.size() + 1));
  }
  return sizes;
}

std::string covariate_header(const BlockLayout& layout, const std::string& prefix) {
  std::string out;
  for (int r = 0; r < layout.responses(); ++r) {
    for (int j = 0; j < layout.size(r); ++j) out += "," + prefix + std::to_string(r + 1) + "_" + std::to_string(j + 1);
  }
  return out;
}

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : "NA"; }

}  // namespace

std::vector<UnitRecord> read_units(const fs::path& path) {
  const Table t = read_table(path);
  if (t.header.size() < 2 || t.header[0] != "area_id" || t.header[1] != "weight") {
    schema_error(path, 1, "header must start with area_id,weight");
  }
  int responses = 0;
  while (2 + responses < static_cast<int>(t.header.size()) &&
         t.header[static_cast<std::size_t>(2 + responses)] == "y_" + std::to_string(responses + 1)) {
    ++responses;
  }
  if (responses == 0) schema_error(path, 1, "no response columns y_1..y_R");
  const std::size_t first_x = static_cast<std::size_t>(2 + responses);
  if (first_x < t.header.size() && t.header[first_x].rfind("y_", 0) == 0) {
    schema_error(path, 1, "response columns must be y_1..y_R in order, found '" + t.header[first_x] + "'");
  }
  const std::vector<int> sizes = covariate_blocks(t, first_x, "x", responses);

  std::vector<UnitRecord> out;
  out.reserve(t.rows.size());
  for (const auto& [line, cells] : t.rows) {
    UnitRecord u;
    u.area_id = parse_int(t, line, cells[0], "area_id");
    u.weight = parse_double(t, line, cells[1], "weight", false);
    u.y.resize(responses);
    for (int r = 0; r < responses; ++r) {
      const auto c = static_cast<std::size_t>(2 + r);
      u.y[r] = parse_double(t, line, cells[c], t.header[c], true);
    }
    std::size_t c = first_x;
    for (int size : sizes) {
      Vector x(size);
      for (int j = 0; j < size; ++j, ++c) x[j] = parse_double(t, line, cells[c], t.header[c], false);
      u.covariates.push_back(std::move(x));
    }
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<AuxRecord> read_aux(const fs::path& path) {
  const Table t = read_table(path);
  if (t.header.size() < 3 || t.header[0] != "area_id" || t.header[1] != "N_d") {
    schema_error(path, 1, "header must start with area_id,N_d");
  }
  // R is the largest response index present; gaps are reported by covariate_blocks.
  int responses = 0;
  const std::regex pattern("xbar([0-9]+)_([0-9]+)");
  for (std::size_t c = 2; c < t.header.size(); ++c) {
    std::smatch m;
    if (std::regex_match(t.header[c], m, pattern)) responses = std::max(responses, std::stoi(m[1]));
  }
  const std::vector<int> sizes = covariate_blocks(t, 2, "xbar", responses);

  std::vector<AuxRecord> out;
  out.reserve(t.rows.size());
  for (const auto& [line, cells] : t.rows) {
    AuxRecord a;
    a.area_id = parse_int(t, line, cells[0], "area_id");
    a.population_size = parse_int(t, line, cells[1], "N_d");
    std::size_t c = 2;
    for (int size : sizes) {
      Vector x(size);
      for (int j = 0; j < size; ++j, ++c) x[j] = parse_double(t, line, cells[c], t.header[c], false);
      a.xbar.push_back(std::move(x));
    }
    out.push_back(std::move(a));
  }
  return out;
}

Dataset read_dataset(const fs::path& units, const fs::path& aux) {
  const auto u = read_units(units);
  const auto a = read_aux(aux);
  return validate_dataset(u, a);
}

void write_units(const Dataset& dataset, const fs::path& path) {
  const BlockLayout& layout = dataset.layout();
  std::ostringstream os;
  os << "area_id,weight";
  for (int r = 0; r < layout.responses(); ++r) os << ",y_" << r + 1;
  os << covariate_header(layout, "x") << '\n';
  for (const AreaSample& area : dataset.all_areas()) {
    for (int i = 0; i < area.units(); ++i) {
      os << area.label << ',' << format_double(area.weights[i]);
      for (int r = 0; r < layout.responses(); ++r) os << ',' << format_double(area.y(i, r));
      for (Eigen::Index j = 0; j < area.x.cols(); ++j) os << ',' << format_double(area.x(i, j));
      os << '\n';
    }
  }
  write_file_atomic(path, os.str());
}

void write_aux(const Dataset& dataset, const fs::path& path) {
  std::ostringstream os;
  os << "area_id,N_d" << covariate_header(dataset.layout(), "xbar") << '\n';
  for (const AreaSample& area : dataset.all_areas()) {
    os << area.label << ',' << area.population_size;
    for (Eigen::Index j = 0; j < area.xbar.size(); ++j) os << ',' << format_double(area.xbar[j]);
    os << '\n';
  }
  write_file_atomic(path, os.str());
}

void write_predictions(const std::vector<AreaPrediction>& predictions, const fs::path& path) {
  if (predictions.empty()) throw ValidationError("no predictions to write");
  const auto responses = predictions.front().mu.size();
  std::ostringstream os;
  os << "area_id,estimator";
  for (Eigen::Index r = 0; r < responses; ++r) os << ",mu_" << r + 1;
  for (Eigen::Index r = 0; r < responses; ++r) {
    for (Eigen::Index s = 0; s < responses; ++s) os << ",mse_" << r + 1 << s + 1;
  }
  os << ",mse_source\n";
  for (const AreaPrediction& p : predictions) {
    if (p.mu.size() != responses) throw ValidationError("predictions have inconsistent dimensions");
    os << p.area_id << ',' << to_string(p.estimator);
    for (Eigen::Index r = 0; r < responses; ++r) os << ',' << format_double(p.mu[r]);
    for (Eigen::Index r = 0; r < responses; ++r) {
      for (Eigen::Index s = 0; s < responses; ++s) {
        os << ',' << cell(p.mse ? std::optional<double>((*p.mse)(r, s)) : std::nullopt);
      }
    }
    os << ',' << to_string(p.mse ? p.mse_source : MseSource::none) << '\n';
  }
  write_file_atomic(path, os.str());
}

std::vector<AreaPrediction> read_predictions(const fs::path& path) {
  const Table t = read_table(path);
  const std::size_t cols = t.header.size();
  if (cols < 4 || t.header[0] != "area_id" || t.header[1] != "estimator" || t.header.back() != "mse_source") {
    schema_error(path, 1, "header must be area_id,estimator,mu_*,mse_*,mse_source");
  }
  Eigen::Index responses = 0;
  while (2 + responses < static_cast<Eigen::Index>(cols) &&
         t.header[static_cast<std::size_t>(2 + responses)] == "mu_" + std::to_string(responses + 1)) {
    ++responses;
  }
  if (responses == 0 || static_cast<Eigen::Index>(cols) != 3 + responses + responses * responses) {
    schema_error(path, 1, "prediction header does not match R mu columns and R*R mse columns");
  }
  std::vector<AreaPrediction> out;
  for (const auto& [line, cells] : t.rows) {
    AreaPrediction p;
    p.area_id = parse_int(t, line, cells[0], "area_id");
    try {
      p.estimator = parse_estimator(cells[1]);
      p.mse_source = parse_mse_source(cells.back());
    } catch (const ValidationError& e) {
      schema_error(path, line, e.what());
    }
    p.mu.resize(responses);
    for (Eigen::Index r = 0; r < responses; ++r) {
      const auto c = static_cast<std::size_t>(2 + r);
      p.mu[r] = parse_double(t, line, cells[c], t.header[c], false);
    }
    Matrix mse(responses, responses);
    bool any = false;
    bool all = true;
    for (Eigen::Index k = 0; k < responses * responses; ++k) {
      const auto c = static_cast<std::size_t>(2 + responses + k);
      const double v = parse_double(t, line, cells[c], t.header[c], true);
      mse(k / responses, k % responses) = v;
      any = any || !std::isnan(v);
      all = all && !std::isnan(v);
    }
    if (any && !all) schema_error(path, line, "partially missing MSE matrix");
    if (all) p.mse = mse;
    out.push_back(std::move(p));
  }
  return out;
}

void write_fitted(const FittedModel& fitted, const fs::path& path) {
  std::ostringstream os;
  os << "parameter,i,j,value\n";
  os << "fit_method,,," << fitted.fit_method << '\n';
  os << "coefficient_method,,," << (fitted.coefficient_method == CoefficientMethod::wls ? "wls" : "survey_weighted")
     << '\n';
  const auto matrix = [&](const char* name, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) os << name << ',' << i + 1 << ',' << j + 1 << ',' << format_double(m(i, j)) << '\n';
    }
  };
  matrix("sigma_u", fitted.theta.sigma_u);
  matrix("sigma_e", fitted.theta.sigma_e);
  for (Eigen::Index i = 0; i < fitted.beta.size(); ++i) os << "beta," << i + 1 << ",," << format_double(fitted.beta[i]) << '\n';
  if (fitted.phi) matrix("phi", *fitted.phi);
  const ConvergenceRecord& c = fitted.convergence;
  os << "convergence,iterations,," << c.iterations << '\n';
  os << "convergence,evaluations,," << c.evaluations << '\n';
  os << "convergence,gradient_norm,," << format_double(c.gradient_norm) << '\n';
  os << "convergence,loglik,," << format_double(c.loglik) << '\n';
  os << "convergence,initial_loglik,," << format_double(c.initial_loglik) << '\n';
  os << "convergence,converged,," << (c.converged ? 1 : 0) << '\n';
  os << "convergence,boundary,," << (c.boundary ? 1 : 0) << '\n';
  write_file_atomic(path, os.str());
}

FittedModel read_fitted(const fs::path& path) {
  const Table t = read_table(path);
  if (t.header != Row{"parameter", "i", "j", "value"}) schema_error(path, 1, "header must be parameter,i,j,value");
  FittedModel f;
  std::map<std::string, std::vector<std::tuple<int, int, double>>> entries;
  for (const auto& [line, cells] : t.rows) {
    const std::string& name = cells[0];
    if (name == "fit_method") {
      f.fit_method = cells[3];
    } else if (name == "coefficient_method") {
      if (cells[3] == "wls") {
        f.coefficient_method = CoefficientMethod::wls;
      } else if (cells[3] == "survey_weighted") {
        f.coefficient_method = CoefficientMethod::survey_weighted;
      } else {
        schema_error(path, line, "unknown coefficient method '" + cells[3] + "'");
      }
    } else if (name == "convergence") {
      ConvergenceRecord& c = f.convergence;
      const std::string& key = cells[1];
      const double v = parse_double(t, line, cells[3], key, false);
      if (key == "iterations") c.iterations = static_cast<int>(v);
      else if (key == "evaluations") c.evaluations = static_cast<int>(v);
      else if (key == "gradient_norm") c.gradient_norm = v;
      else if (key == "loglik") c.loglik = v;
      else if (key == "initial_loglik") c.initial_loglik = v;
      else if (key == "converged") c.converged = v != 0.0;
      else if (key == "boundary") c.boundary = v != 0.0;
      else schema_error(path, line, "unknown convergence field '" + key + "'");
    } else if (name == "sigma_u" || name == "sigma_e" || name == "phi" || name == "beta") {
      const int i = static_cast<int>(parse_int(t, line, cells[1], "i"));
      const int j = name == "beta" ? 1 : static_cast<int>(parse_int(t, line, cells[2], "j"));
      if (i < 1 || j < 1) schema_error(path, line, "indices must be positive");
      entries[name].emplace_back(i, j, parse_double(t, line, cells[3], name, false));
    } else {
      schema_error(path, line, "unknown parameter '" + name + "'");
    }
  }
  const auto assemble = [&](const std::string& name) -> std::optional<Matrix> {
    const auto it = entries.find(name);
    if (it == entries.end()) return std::nullopt;
    int rows = 0;
    int cols = 0;
    for (const auto& [i, j, v] : it->second) {
      rows = std::max(rows, i);
      cols = std::max(cols, j);
    }
    Matrix m = Matrix::Constant(rows, cols, std::numeric_limits<double>::quiet_NaN());
    for (const auto& [i, j, v] : it->second) m(i - 1, j - 1) = v;
    if (!m.allFinite()) throw ValidationError(path.string() + ": incomplete " + name + " entries");
    return m;
  };
  const auto su = assemble("sigma_u");
  const auto se = assemble("sigma_e");
  const auto beta = assemble("beta");
  if (!su || !se || !beta) throw ValidationError(path.string() + ": fitted model needs sigma_u, sigma_e and beta");
  f.theta = VarianceComponents{*su, *se};
  f.beta = beta->col(0);
  f.phi = assemble("phi");
  if (!f.theta.valid()) throw ValidationError(path.string() + ": variance components are not positive definite");
  return f;
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  const fs::path target = path.empty() ? path : fs::absolute(path);
  if (target.has_parent_path() && !fs::exists(target.parent_path())) {
    throw IoError("output directory does not exist: " + target.parent_path().string());
  }
  fs::path temp = target;
  temp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + temp.string());
    out << contents;
    out.flush();
    if (!out) throw IoError("write failed for " + temp.string());
  }
  std::error_code ec;
  fs::rename(temp, target, ec);
  if (ec) {
    fs::remove(temp);
    throw IoError("cannot move output into place at " + target.string() + ": " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string digest_bytes(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buffer[17];
  std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(h));
  return buffer;
}

std::string digest_file(const fs::path& path) { return digest_bytes(read_file(path)); }

Vector mahalanobis_squared(const Matrix& values, const Matrix& covariance) {
  SymmetricSolver solver;
  solver.compute(symmetrize(covariance), "Mahalanobis covariance");
  if (!solver.positive_definite()) throw SingularMatrixError("Mahalanobis covariance is not positive definite");
  const Matrix solved = solver.solve(Matrix(values.transpose()));
  return (values.transpose().array() * solved.array()).colwise().sum().transpose();
}

Matrix chi_square_qq(const Vector& squared_distances, int dof) {
  const Eigen::Index n = squared_distances.size();
  std::vector<double> sorted(squared_distances.data(), squared_distances.data() + n);
  std::sort(sorted.begin(), sorted.end());
  const boost::math::chi_squared dist(dof);
  Matrix out(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i, 0) = boost::math::quantile(dist, (static_cast<double>(i) + 0.5) / static_cast<double>(n));
    out(i, 1) = sorted[static_cast<std::size_t>(i)];
  }
  return out;
}

std::vector<fs::path> emit_diagnostics(const Dataset& dataset, const FittedModel& fitted, const fs::path& directory) {
  const auto effects = predict_area_effects(dataset, aggregate(dataset), fitted.theta, fitted.beta);
  const int responses = dataset.responses();
  Matrix u(static_cast<Eigen::Index>(effects.area_effects.size()), responses);
  for (std::size_t d = 0; d < effects.area_effects.size(); ++d) u.row(static_cast<Eigen::Index>(d)) = effects.area_effects[d].transpose();
  Matrix e(static_cast<Eigen::Index>(dataset.total_units()), responses);
  Eigen::Index row = 0;
  for (const Matrix& r : effects.residuals) {
    e.middleRows(row, r.rows()) = r;
    row += r.rows();
  }
  const auto write = [&](const fs::path& path, const Matrix& qq) {
    std::ostringstream os;
    os << "chi2_quantile,squared_distance\n";
    for (Eigen::Index i = 0; i < qq.rows(); ++i) os << format_double(qq(i, 0)) << ',' << format_double(qq(i, 1)) << '\n';
    write_file_atomic(path, os.str());
  };
  const fs::path area_path = directory / "qq_area_effects.csv";
  const fs::path unit_path = directory / "qq_unit_residuals.csv";
  write(area_path, chi_square_qq(mahalanobis_squared(u, fitted.theta.sigma_u), responses));
  write(unit_path, chi_square_qq(mahalanobis_squared(e, fitted.theta.sigma_e), responses));
  return {area_path, unit_path};
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["flags"] = flags;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["seed"] = seed;
  j["version"] = version;
  j["duration_seconds"] = duration_seconds;
  nlohmann::ordered_json conv = nlohmann::ordered_json::array();
  for (const ConvergenceRecord& c : convergence) {
    conv.push_back({{"iterations", c.iterations},
                    {"evaluations", c.evaluations},
                    {"gradient_norm", c.gradient_norm},
                    {"loglik", c.loglik},
                    {"initial_loglik", c.initial_loglik},
                    {"converged", c.converged},
                    {"boundary", c.boundary}});
  }
  j["convergence"] = conv;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  RunManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.command = j.at("command").get<std::string>();
    m.flags = j.at("flags").get<std::map<std::string, std::string>>();
    m.inputs = j.value("inputs", std::map<std::string, std::string>{});
    m.outputs = j.value("outputs", std::map<std::string, std::string>{});
    m.seed = j.value("seed", std::uint64_t{0});
    m.version = j.value("version", std::string{});
    m.duration_seconds = j.value("duration_seconds", 0.0);
    for (const auto& c : j.value("convergence", nlohmann::json::array())) {
      ConvergenceRecord r;
      r.iterations = c.value("iterations", 0);
      r.evaluations = c.value("evaluations", 0);
      r.gradient_norm = c.value("gradient_norm", 0.0);
      r.loglik = c.value("loglik", 0.0);
      r.initial_loglik = c.value("initial_loglik", 0.0);
      r.converged = c.value("converged", false);
      r.boundary = c.value("boundary", false);
      m.convergence.push_back(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

}  // namespace msae
