#pragma once

#include "msae/data_model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace msae {

namespace fs = std::filesystem;

/// Unit file: area_id,weight,y_1..y_R,x1_1..x1_p1,...,xR_1..xR_pR.
[[nodiscard]] std::vector<UnitRecord> read_units(const fs::path& path);
/// Auxiliary file: area_id,N_d,xbar1_1..xbarR_pR.
[[nodiscard]] std::vector<AuxRecord> read_aux(const fs::path& path);
/// read_units + read_aux + validate_dataset.
[[nodiscard]] Dataset read_dataset(const fs::path& units, const fs::path& aux);

void write_units(const Dataset& dataset, const fs::path& path);
void write_aux(const Dataset& dataset, const fs::path& path);

/// area_id,estimator,mu_1..mu_R,mse_11,...,mse_RR,mse_source; unavailable MSE cells are NA.
void write_predictions(const std::vector<AreaPrediction>& predictions, const fs::path& path);
[[nodiscard]] std::vector<AreaPrediction> read_predictions(const fs::path& path);

/// Fitted model as rows parameter,i,j,value.
void write_fitted(const FittedModel& fitted, const fs::path& path);
[[nodiscard]] FittedModel read_fitted(const fs::path& path);

/// Writes `contents` to a temporary sibling and renames it over `path`.
void write_file_atomic(const fs::path& path, const std::string& contents);
[[nodiscard]] std::string read_file(const fs::path& path);

/// FNV-1a 64-bit digest, 16 hex digits.
[[nodiscard]] std::string digest_bytes(const std::string& bytes);
[[nodiscard]] std::string digest_file(const fs::path& path);

/// Squared Mahalanobis distances v^T M^{-1} v of the rows of `values`.
[[nodiscard]] Vector mahalanobis_squared(const Matrix& values, const Matrix& covariance);

/// (chi-square(dof) quantile at (i - 0.5)/n, sorted distance) pairs.
[[nodiscard]] Matrix chi_square_qq(const Vector& squared_distances, int dof);

/// Writes qq_area_effects.csv and qq_unit_residuals.csv into `directory`; returns the paths.
std::vector<fs::path> emit_diagnostics(const Dataset& dataset, const FittedModel& fitted, const fs::path& directory);

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> flags;
  std::map<std::string, std::string> inputs;   ///< path -> digest
  std::map<std::string, std::string> outputs;  ///< file name -> digest
  std::uint64_t seed = 0;
  std::string version;
  double duration_seconds = 0.0;
  std::vector<ConvergenceRecord> convergence;

  [[nodiscard]] std::string to_json() const;
  [[nodiscard]] static RunManifest from_json(const std::string& text);
};

}  // namespace msae
