#pragma once

#include "msae/data_model.hpp"
#include "msae/simulation.hpp"
#include "msae/uncertainty.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <unistd.h>
#include <vector>

namespace fixture {

using msae::Matrix;
using msae::Vector;

inline Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

inline Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  const auto r = static_cast<Eigen::Index>(rows.size());
  const auto c = static_cast<Eigen::Index>(rows.begin()->size());
  Matrix out(r, c);
  Eigen::Index i = 0;
  for (const auto& row : rows) {
    Eigen::Index j = 0;
    for (double x : row) out(i, j++) = x;
    ++i;
  }
  return out;
}

inline msae::AreaSample area(msae::AreaLabel label, std::int64_t population, Vector weights, Matrix y, Matrix x,
                             Vector xbar) {
  msae::AreaSample a;
  a.label = label;
  a.population_size = population;
  a.weights = std::move(weights);
  a.y = std::move(y);
  a.x = std::move(x);
  a.xbar = std::move(xbar);
  return a;
}

inline msae::VarianceComponents truth_theta() {
  return msae::VarianceComponents{mat({{0.1, 0.16}, {0.16, 0.4}}), mat({{0.9, 0.75}, {0.75, 1.0}})};
}

inline Vector truth_beta() { return vec({1.0, 1.0, 4.0, 0.5}); }

/// Same design with responses replaced by X beta exactly.
inline msae::Dataset noiseless(const msae::Dataset& d, const Vector& beta) {
  std::vector<Matrix> y;
  for (const msae::AreaSample& a : d.all_areas()) {
    Matrix m(a.units(), d.responses());
    for (int i = 0; i < a.units(); ++i) m.row(i) = d.layout().apply(a.x.row(i), beta).transpose();
    y.push_back(m);
  }
  return d.with_responses(y);
}

/// One model draw on the standard simulation sample (responses from the sample model).
inline msae::Dataset standard_sample(std::uint64_t seed, const msae::VarianceComponents& theta, const Vector& beta) {
  const msae::SimulationFrame frame = msae::build_frame(msae::SimulationDesign::standard());
  msae::Engine rng = msae::make_engine(seed, 0x7e57, 0);
  const msae::ModelDraw draw = msae::draw_from_model(frame.sample_dataset, theta, beta, rng);
  return frame.sample_dataset.with_responses(draw.y);
}

/// Same samples with auxiliary means placed 0.01 above the weighted sample means.
inline msae::Dataset calibratable(const msae::Dataset& d) {
  std::vector<msae::AreaSample> areas(d.all_areas().begin(), d.all_areas().end());
  for (msae::AreaSample& a : areas) {
    const Vector mean = a.x.transpose() * a.weights / a.weights.sum();
    for (Eigen::Index j = 0; j < mean.size(); ++j) a.xbar[j] = a.x.col(j).isOnes() ? 1.0 : mean[j] + 0.01;
  }
  return msae::make_dataset(d.layout(), std::move(areas));
}

/// Fresh directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("msae-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace fixture
