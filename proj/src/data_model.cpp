#include "msae/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace msae {

namespace {

std::string area_message(AreaLabel label, std::string_view field, std::string_view what) {
  std::ostringstream os;
  os << "area " << label << ": " << field << ": " << what;
  return os.str();
}

}  // namespace

BlockLayout::BlockLayout(std::vector<int> sizes) : sizes_(std::move(sizes)) {
  offsets_.reserve(sizes_.size());
  for (int s : sizes_) {
    if (s < 1) throw ValidationError("covariate block sizes must be at least 1");
    offsets_.push_back(total_);
    total_ += s;
  }
}

Matrix BlockLayout::expand(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  Matrix out = Matrix::Zero(responses(), total_);
  for (int r = 0; r < responses(); ++r) {
    out.block(r, offset(r), 1, size(r)) = row.segment(offset(r), size(r));
  }
  return out;
}

Vector BlockLayout::apply(const Eigen::Ref<const Eigen::RowVectorXd>& row, const Vector& beta) const {
  Vector out(responses());
  for (int r = 0; r < responses(); ++r) {
    out[r] = row.segment(offset(r), size(r)).dot(beta.segment(offset(r), size(r)));
  }
  return out;
}

int BlockLayout::response_of(int column) const {
  for (int r = responses() - 1; r >= 0; --r) {
    if (column >= offset(r)) return r;
  }
  return 0;
}

std::optional<std::size_t> Dataset::find_area(AreaLabel label) const {
  auto it = std::lower_bound(areas_.begin(), areas_.end(), label,
                             [](const AreaSample& a, AreaLabel l) { return a.label < l; });
  if (it == areas_.end() || it->label != label) return std::nullopt;
  return static_cast<std::size_t>(it - areas_.begin());
}

Dataset Dataset::with_weights(const std::vector<Vector>& weights) const {
  if (weights.size() != areas_.size()) throw ValidationError("with_weights: one weight vector per area required");
  Dataset out = *this;
  for (std::size_t d = 0; d < areas_.size(); ++d) {
    if (weights[d].size() != areas_[d].weights.size()) {
      throw ValidationError(area_message(areas_[d].label, "weight", "length differs from n_d"));
    }
    for (Eigen::Index i = 0; i < weights[d].size(); ++i) {
      if (!(weights[d][i] > 0.0) || !std::isfinite(weights[d][i])) {
        throw ValidationError(area_message(areas_[d].label, "weight", "nonpositive weight"));
      }
    }
    out.areas_[d].weights = weights[d];
  }
  return out;
}

Dataset Dataset::with_responses(const std::vector<Matrix>& responses) const {
  if (responses.size() != areas_.size()) throw ValidationError("with_responses: one matrix per area required");
  Dataset out = *this;
  for (std::size_t d = 0; d < areas_.size(); ++d) {
    if (responses[d].rows() != areas_[d].y.rows() || responses[d].cols() != areas_[d].y.cols()) {
      throw ValidationError(area_message(areas_[d].label, "y", "shape differs from the sample"));
    }
    if (!responses[d].allFinite()) {
      throw ValidationError(area_message(areas_[d].label, "y", "missing or non-finite response"));
    }
    out.areas_[d].y = responses[d];
  }
  return out;
}

Dataset Dataset::response_subset(int r) const {
  if (r < 0 || r >= responses()) throw ValidationError("response index out of range");
  Dataset out;
  out.layout_ = BlockLayout({layout_.size(r)});
  out.total_units_ = total_units_;
  out.areas_.reserve(areas_.size());
  for (const AreaSample& a : areas_) {
    AreaSample s;
    s.label = a.label;
    s.population_size = a.population_size;
    s.xbar = a.xbar.segment(layout_.offset(r), layout_.size(r));
    s.weights = a.weights;
    s.y = a.y.col(r);
    s.x = a.x.middleCols(layout_.offset(r), layout_.size(r));
    out.areas_.push_back(std::move(s));
  }
  return out;
}

std::vector<UnitRecord> Dataset::unit_records() const {
  std::vector<UnitRecord> out;
  out.reserve(total_units_);
  for (const AreaSample& a : areas_) {
    for (int i = 0; i < a.units(); ++i) {
      UnitRecord u;
      u.area_id = a.label;
      u.weight = a.weights[i];
      u.y = a.y.row(i).transpose();
      for (int r = 0; r < responses(); ++r) {
        u.covariates.push_back(a.x.row(i).segment(layout_.offset(r), layout_.size(r)).transpose());
      }
      out.push_back(std::move(u));
    }
  }
  return out;
}

std::vector<AuxRecord> Dataset::aux_records() const {
  std::vector<AuxRecord> out;
  out.reserve(areas_.size());
  for (const AreaSample& a : areas_) {
    AuxRecord rec;
    rec.area_id = a.label;
    rec.population_size = a.population_size;
    for (int r = 0; r < responses(); ++r) rec.xbar.push_back(a.xbar.segment(layout_.offset(r), layout_.size(r)));
    out.push_back(std::move(rec));
  }
  return out;
}

Dataset validate_dataset(std::span<const UnitRecord> units, std::span<const AuxRecord> aux) {
  if (units.empty()) throw ValidationError("no unit records");
  if (aux.empty()) throw ValidationError("no auxiliary records");

  const UnitRecord& first = units.front();
  const int responses = static_cast<int>(first.y.size());
  if (responses < 1) throw ValidationError("unit records must carry at least one response");
  if (static_cast<int>(first.covariates.size()) != responses) {
    throw ValidationError(area_message(first.area_id, "covariates", "one covariate block per response required"));
  }
  std::vector<int> sizes;
  for (const Vector& block : first.covariates) sizes.push_back(static_cast<int>(block.size()));
  BlockLayout layout(sizes);

  std::map<AreaLabel, std::vector<const UnitRecord*>> grouped;
  for (const UnitRecord& u : units) {
    if (u.y.size() != responses) {
      throw ValidationError(area_message(u.area_id, "y", "inconsistent number of responses"));
    }
    if (!u.y.allFinite()) throw ValidationError(area_message(u.area_id, "y", "missing or non-finite response"));
    if (!(u.weight > 0.0) || !std::isfinite(u.weight)) {
      throw ValidationError(area_message(u.area_id, "weight", "nonpositive weight"));
    }
    if (static_cast<int>(u.covariates.size()) != responses) {
      throw ValidationError(area_message(u.area_id, "covariates", "inconsistent block structure"));
    }
    for (int r = 0; r < responses; ++r) {
      if (u.covariates[static_cast<std::size_t>(r)].size() != layout.size(r)) {
        throw ValidationError(area_message(u.area_id, "covariates", "inconsistent block structure"));
      }
      if (!u.covariates[static_cast<std::size_t>(r)].allFinite()) {
        throw ValidationError(area_message(u.area_id, "covariates", "non-finite covariate"));
      }
    }
    grouped[u.area_id].push_back(&u);
  }

  std::map<AreaLabel, const AuxRecord*> aux_by_area;
  for (const AuxRecord& a : aux) {
    if (!aux_by_area.emplace(a.area_id, &a).second) {
      throw ValidationError(area_message(a.area_id, "aux", "duplicate auxiliary record"));
    }
  }

  std::vector<AreaSample> areas;
  for (const auto& [label, members] : grouped) {
    auto it = aux_by_area.find(label);
    if (it == aux_by_area.end()) {
      std::ostringstream os;
      os << "area " << label << " lacks auxiliary record";
      throw ValidationError(os.str());
    }
    const AuxRecord& a = *it->second;
    const int n = static_cast<int>(members.size());
    if (a.population_size < n) throw ValidationError(area_message(label, "N_d", "population size below sample size"));
    if (static_cast<int>(a.xbar.size()) != responses) {
      throw ValidationError(area_message(label, "xbar", "inconsistent block structure"));
    }
    AreaSample s;
    s.label = label;
    s.population_size = a.population_size;
    s.xbar.resize(layout.covariates());
    for (int r = 0; r < responses; ++r) {
      const Vector& block = a.xbar[static_cast<std::size_t>(r)];
      if (block.size() != layout.size(r)) throw ValidationError(area_message(label, "xbar", "inconsistent block structure"));
      if (!block.allFinite()) throw ValidationError(area_message(label, "xbar", "non-finite covariate mean"));
      s.xbar.segment(layout.offset(r), layout.size(r)) = block;
    }
    s.weights.resize(n);
    s.y.resize(n, responses);
    s.x.resize(n, layout.covariates());
    for (int i = 0; i < n; ++i) {
      const UnitRecord& u = *members[static_cast<std::size_t>(i)];
      s.weights[i] = u.weight;
      s.y.row(i) = u.y.transpose();
      for (int r = 0; r < responses; ++r) {
        s.x.row(i).segment(layout.offset(r), layout.size(r)) = u.covariates[static_cast<std::size_t>(r)].transpose();
      }
    }
    areas.push_back(std::move(s));
  }
  for (const auto& [label, rec] : aux_by_area) {
    if (!grouped.contains(label)) {
      std::ostringstream os;
      os << "area " << label << " has an auxiliary record but no sampled units";
      throw ValidationError(os.str());
    }
  }
  return make_dataset(std::move(layout), std::move(areas));
}

Dataset make_dataset(BlockLayout layout, std::vector<AreaSample> areas) {
  if (areas.empty()) throw ValidationError("dataset has no areas");
  std::sort(areas.begin(), areas.end(), [](const AreaSample& a, const AreaSample& b) { return a.label < b.label; });
  std::size_t total = 0;
  for (std::size_t d = 0; d < areas.size(); ++d) {
    const AreaSample& a = areas[d];
    if (d > 0 && areas[d - 1].label == a.label) throw ValidationError(area_message(a.label, "area_id", "duplicate area"));
    const int n = a.units();
    if (n < 1) throw ValidationError(area_message(a.label, "n_d", "area has no sampled units"));
    if (a.y.rows() != n || a.y.cols() != layout.responses()) throw ValidationError(area_message(a.label, "y", "shape mismatch"));
    if (a.x.rows() != n || a.x.cols() != layout.covariates()) {
      throw ValidationError(area_message(a.label, "covariates", "inconsistent block structure"));
    }
    if (a.xbar.size() != layout.covariates()) throw ValidationError(area_message(a.label, "xbar", "inconsistent block structure"));
    if (a.population_size < n) throw ValidationError(area_message(a.label, "N_d", "population size below sample size"));
    if (!a.y.allFinite()) throw ValidationError(area_message(a.label, "y", "missing or non-finite response"));
    if (!a.x.allFinite() || !a.xbar.allFinite()) throw ValidationError(area_message(a.label, "covariates", "non-finite value"));
    for (int i = 0; i < n; ++i) {
      if (!(a.weights[i] > 0.0) || !std::isfinite(a.weights[i])) {
        throw ValidationError(area_message(a.label, "weight", "nonpositive weight"));
      }
    }
    total += static_cast<std::size_t>(n);
  }
  if (total <= areas.size()) throw ValidationError("total sample size n must exceed the number of areas D");
  Dataset out;
  out.layout_ = std::move(layout);
  out.areas_ = std::move(areas);
  out.total_units_ = total;
  return out;
}

Dataset validate_dataset(const Dataset& dataset) {
  std::vector<AreaSample> areas(dataset.all_areas().begin(), dataset.all_areas().end());
  return make_dataset(dataset.layout(), std::move(areas));
}

bool operator==(const Dataset& a, const Dataset& b) {
  if (!(a.layout() == b.layout()) || a.areas() != b.areas()) return false;
  for (std::size_t d = 0; d < a.areas(); ++d) {
    const AreaSample& x = a.area(d);
    const AreaSample& y = b.area(d);
    if (x.label != y.label || x.population_size != y.population_size) return false;
    if (x.weights != y.weights || x.y != y.y || x.x != y.x || x.xbar != y.xbar) return false;
  }
  return true;
}

Vector VarianceComponents::theta() const {
  const int r = responses();
  Vector out(theta_size(r));
  int k = 0;
  for (const Matrix* m : {&sigma_u, &sigma_e}) {
    for (int i = 0; i < r; ++i) out[k++] = (*m)(i, i);
    for (int i = 0; i < r; ++i) {
      for (int j = i + 1; j < r; ++j) out[k++] = (*m)(i, j);
    }
  }
  return out;
}

VarianceComponents VarianceComponents::from_theta(int responses, const Vector& theta) {
  if (theta.size() != theta_size(responses)) throw ValidationError("theta has wrong length");
  VarianceComponents vc{Matrix(responses, responses), Matrix(responses, responses)};
  int k = 0;
  for (Matrix* m : {&vc.sigma_u, &vc.sigma_e}) {
    for (int i = 0; i < responses; ++i) (*m)(i, i) = theta[k++];
    for (int i = 0; i < responses; ++i) {
      for (int j = i + 1; j < responses; ++j) {
        (*m)(i, j) = theta[k];
        (*m)(j, i) = theta[k];
        ++k;
      }
    }
  }
  return vc;
}

bool VarianceComponents::valid() const {
  if (sigma_u.rows() != sigma_e.rows() || sigma_u.rows() < 1) return false;
  if ((sigma_u.diagonal().array() <= 0.0).any() || (sigma_e.diagonal().array() <= 0.0).any()) return false;
  return is_positive_definite(sigma_u) && is_positive_definite(sigma_e);
}

std::string_view to_string(Estimator e) {
  switch (e) {
    case Estimator::dir: return "DIR";
    case Estimator::myr: return "MYR";
    case Estimator::mu: return "MU";
    case Estimator::uyr: return "UYR";
    case Estimator::mfh: return "MFH";
  }
  return "?";
}

std::string_view to_string(MseSource s) {
  switch (s) {
    case MseSource::analytic: return "analytic";
    case MseSource::bootstrap: return "bootstrap";
    case MseSource::design: return "design";
    case MseSource::none: return "none";
  }
  return "?";
}

Estimator parse_estimator(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "dir") return Estimator::dir;
  if (lower == "myr") return Estimator::myr;
  if (lower == "mu") return Estimator::mu;
  if (lower == "uyr") return Estimator::uyr;
  if (lower == "mfh") return Estimator::mfh;
  throw ValidationError("unknown estimator '" + std::string(name) + "'");
}

MseSource parse_mse_source(std::string_view name) {
  if (name == "analytic") return MseSource::analytic;
  if (name == "bootstrap") return MseSource::bootstrap;
  if (name == "design") return MseSource::design;
  if (name == "none") return MseSource::none;
  throw ValidationError("unknown mse source '" + std::string(name) + "'");
}

LinearCombination::LinearCombination(Vector a) : a_(std::move(a)) {
  if (a_.size() == 0 || !a_.allFinite() || (a_.array() == 0.0).all()) {
    throw ValidationError("combination vector must be finite and not all zero");
  }
}

ScalarPrediction apply(const LinearCombination& combination, const AreaPrediction& prediction) {
  const Vector& a = combination.coefficients();
  if (a.size() != prediction.mu.size()) throw ValidationError("combination vector length differs from R");
  ScalarPrediction out;
  out.area_id = prediction.area_id;
  out.estimator = prediction.estimator;
  out.value = a.dot(prediction.mu);
  if (prediction.mse) {
    out.mse = a.dot(*prediction.mse * a);
    out.mse_source = prediction.mse_source;
  }
  return out;
}

}  // namespace msae
