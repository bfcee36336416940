#pragma once

#include <da/core.hpp>
#include <da/rng.hpp>

#include <cmath>
#include <utility>

namespace da {

// Dense symmetric covariance with a cached Cholesky factorization. One
// factorization serves inverse application, sampling and log-determinants.
// Symmetry is required exactly as stored; callers assembling products should
// symmetrize first (see symmetrized()).
class CovarianceOperator {
 public:
  explicit CovarianceOperator(Matrix c) : mat_(std::move(c)) {
    if (mat_.rows() != mat_.cols())
      throw DimensionError("CovarianceOperator: matrix must be square");
    if (mat_.rows() == 0)
      throw DimensionError("CovarianceOperator: dimension must be positive");
    for (Index j = 0; j < mat_.cols(); ++j)
      for (Index i = 0; i < j; ++i)
        if (mat_(i, j) != mat_(j, i))
          throw Error("CovarianceOperator: matrix is not symmetric");
    llt_.compute(mat_);
    positive_definite_ = llt_.info() == Eigen::Success;
    if (positive_definite_) {
      // LLT may succeed on borderline semidefinite input; insist on
      // strictly positive pivots.
      const auto& l = llt_.matrixLLT();
      for (Index i = 0; i < l.rows(); ++i)
        if (!(l(i, i) > 0.0)) positive_definite_ = false;
    }
  }

  static CovarianceOperator identity(Index n, double scale = 1.0) {
    return CovarianceOperator(Matrix::Identity(n, n) * scale);
  }

  static CovarianceOperator diagonal(const Vector& variances) {
    Matrix c = variances.asDiagonal();
    return CovarianceOperator(std::move(c));
  }

  Index dimension() const { return mat_.rows(); }
  const Matrix& matrix() const { return mat_; }
  bool positive_definite() const { return positive_definite_; }

  Vector apply(const Vector& v) const {
    require_dim(v.size(), mat_.rows(), "CovarianceOperator::apply");
    return mat_ * v;
  }

  Vector inverse_apply(const Vector& v) const {
    require_dim(v.size(), mat_.rows(), "CovarianceOperator::inverse_apply");
    require_pd("inverse_apply");
    return llt_.solve(v);
  }

  Matrix inverse_matrix() const {
    require_pd("inverse_matrix");
    return llt_.solve(Matrix::Identity(mat_.rows(), mat_.cols()));
  }

  // L z with L the lower-triangular square root (C = L Lᵀ).
  Vector sqrt_apply(const Vector& z) const {
    require_dim(z.size(), mat_.rows(), "CovarianceOperator::sqrt_apply");
    require_pd("sqrt_apply");
    return llt_.matrixL() * z;
  }

  Matrix cholesky_lower() const {
    require_pd("cholesky_lower");
    return llt_.matrixL();
  }

  double log_det() const {
    require_pd("log_det");
    const auto& l = llt_.matrixLLT();
    double s = 0.0;
    for (Index i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
  }

 private:
  void require_pd(const char* op) const {
    if (!positive_definite_)
      throw NotPositiveDefiniteError(
          std::string("CovarianceOperator::") + op +
          ": matrix is not positive definite");
  }

  Matrix mat_;
  Eigen::LLT<Matrix> llt_;
  bool positive_definite_ = false;
};

inline Matrix symmetrized(const Matrix& m) {
  return 0.5 * (m + m.transpose());
}

struct GaussianDensity {
  GaussianDensity(StateVector mean_in, CovarianceOperator cov_in)
      : mean(std::move(mean_in)), cov(std::move(cov_in)) {
    require_dim(mean.dim(), cov.dimension(), "GaussianDensity");
  }

  Index dimension() const { return mean.dim(); }

  StateVector mean;
  CovarianceOperator cov;
};

// (a-b)ᵀ C (a-b). The weighting matrix is applied exactly as passed; cost
// terms therefore hand in inverse covariances explicitly.
inline double weighted_norm_sq(const Vector& a, const Vector& b,
                               const CovarianceOperator& c) {
  require_dim(a.size(), c.dimension(), "weighted_norm_sq: a");
  require_dim(b.size(), c.dimension(), "weighted_norm_sq: b");
  Vector d = a - b;
  return d.dot(c.matrix() * d);
}

inline double weighted_norm_sq(const Vector& a, const Vector& b,
                               const Matrix& c) {
  require_dim(a.size(), c.rows(), "weighted_norm_sq: a");
  require_dim(b.size(), c.cols(), "weighted_norm_sq: b");
  Vector d = a - b;
  return d.dot(c * d);
}

inline StateVector gaussian_sample(const GaussianDensity& d, RngStream& rng) {
  Vector z = rng.normal_vector(d.dimension());
  Vector x = d.mean.vec() + d.cov.sqrt_apply(z);
  return StateVector(std::move(x), d.mean.space());
}

inline double log_density(const GaussianDensity& d, const Vector& x) {
  require_dim(x.size(), d.dimension(), "log_density");
  const double n = static_cast<double>(d.dimension());
  Vector r = x - d.mean.vec();
  double quad = r.dot(d.cov.inverse_apply(r));
  return -0.5 * n * std::log(2.0 * M_PI) - 0.5 * d.cov.log_det() - 0.5 * quad;
}

}  // namespace da
