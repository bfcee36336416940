#pragma once

#include <da/core.hpp>

#include <string>
#include <utility>

namespace da {

// Orthonormal basis from the SVD of a snapshot matrix. The retained width
// is the smallest p whose cumulative singular-value fraction
// I(p) = (sum_{i<=p} s_i) / (sum_i s_i) reaches the energy threshold gamma.
// All singular values (retained and discarded) are kept for diagnostics.
class PodBasis {
 public:
  PodBasis(Matrix v, Vector singular_values, double gamma,
           std::string provenance)
      : v_(std::move(v)), singular_values_(std::move(singular_values)),
        gamma_(gamma), provenance_(std::move(provenance)) {
    require(v_.cols() >= 1, "PodBasis: empty basis");
    require(v_.rows() >= v_.cols(), "PodBasis: more columns than rows");
  }

  Index full_dim() const { return v_.rows(); }
  Index reduced_dim() const { return v_.cols(); }
  const Matrix& matrix() const { return v_; }
  const Vector& singular_values() const { return singular_values_; }
  double gamma() const { return gamma_; }
  const std::string& provenance() const { return provenance_; }

  Vector restrict_state(const Vector& x) const {
    require_dim(x.size(), v_.rows(), "PodBasis::restrict_state");
    return v_.transpose() * x;
  }

  Vector lift(const Vector& xr) const {
    require_dim(xr.size(), v_.cols(), "PodBasis::lift");
    return v_ * xr;
  }

  Matrix projector() const { return v_ * v_.transpose(); }

  // Cumulative information fraction I(p), p in [1, #singular values].
  double information_fraction(Index p) const {
    double total = singular_values_.sum();
    require(total > 0.0, "PodBasis: zero total energy");
    return singular_values_.head(p).sum() / total;
  }

 private:
  Matrix v_;
  Vector singular_values_;
  double gamma_;
  std::string provenance_;
};

inline PodBasis build_basis(const Matrix& snapshots, double gamma,
                            std::string provenance = "snapshots") {
  require(snapshots.cols() >= 1, "build_basis: need at least one snapshot");
  require(gamma > 0.0 && gamma <= 1.0, "build_basis: gamma must be in (0, 1]");
  if (snapshots.norm() == 0.0)
    throw Error("build_basis: all-zero snapshot matrix");

  Eigen::BDCSVD<Matrix> svd(snapshots,
                            Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  double total = sv.sum();
  Index nred = sv.size();
  double running = 0.0;
  for (Index p = 0; p < sv.size(); ++p) {
    running += sv[p];
    if (running / total >= gamma) {
      nred = p + 1;
      break;
    }
  }
  // Do not retain directions with (numerically) zero energy.
  while (nred > 1 && sv[nred - 1] <= 1e-14 * sv[0]) --nred;

  Matrix v = svd.matrixU().leftCols(nred);
  return PodBasis(std::move(v), sv, gamma, std::move(provenance));
}

}  // namespace da
