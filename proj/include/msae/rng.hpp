#pragma once

#include "msae/linalg.hpp"

#include <cstdint>
#include <random>

namespace msae {

/// SplitMix64 finalizer.
[[nodiscard]] constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based child seed: a pure function of (master, stream, index), so a
/// replicate's random stream never depends on scheduling or worker count.
[[nodiscard]] constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return mix64(mix64(mix64(master) ^ stream) ^ index);
}

using Engine = std::mt19937_64;

[[nodiscard]] inline Engine make_engine(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return Engine(derive_seed(master, stream, index));
}

/// Draws from N(0, F F^T) given a covariance factor F.
class GaussianSampler {
 public:
  explicit GaussianSampler(const Matrix& covariance) : factor_(covariance_factor(covariance)) {}

  [[nodiscard]] Vector draw(Engine& rng) const {
    Vector z(factor_.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal_(rng);
    return factor_ * z;
  }

  /// rows x dim matrix of independent draws.
  [[nodiscard]] Matrix draw_rows(Engine& rng, Eigen::Index rows) const {
    Matrix z(rows, factor_.cols());
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = normal_(rng);
    }
    return z * factor_.transpose();
  }

 private:
  Matrix factor_;
  mutable std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace msae
