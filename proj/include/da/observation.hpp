#pragma once

#include <da/core.hpp>
#include <da/gaussian.hpp>

#include <memory>
#include <utility>
#include <vector>

namespace da {

// Observation operator contract: forward map plus transpose-Jacobian action
// linearized at a reference state.
class ObsOperator {
 public:
  virtual ~ObsOperator() = default;
  virtual Index state_dim() const = 0;
  virtual Index obs_dim() const = 0;
  virtual Vector apply(const Vector& x) const = 0;
  virtual Vector adjoint_apply(const Vector& x_ref, const Vector& w) const = 0;
  virtual Matrix jacobian(const Vector& x_ref) const = 0;
  virtual bool is_linear() const { return false; }
};

class IdentityObs final : public ObsOperator {
 public:
  explicit IdentityObs(Index n) : n_(n) {}
  Index state_dim() const override { return n_; }
  Index obs_dim() const override { return n_; }
  bool is_linear() const override { return true; }
  Vector apply(const Vector& x) const override {
    require_dim(x.size(), n_, "IdentityObs::apply");
    return x;
  }
  Vector adjoint_apply(const Vector&, const Vector& w) const override {
    require_dim(w.size(), n_, "IdentityObs::adjoint_apply");
    return w;
  }
  Matrix jacobian(const Vector&) const override {
    return Matrix::Identity(n_, n_);
  }

 private:
  Index n_;
};

class MatrixObs final : public ObsOperator {
 public:
  explicit MatrixObs(Matrix h) : h_(std::move(h)) {}
  Index state_dim() const override { return h_.cols(); }
  Index obs_dim() const override { return h_.rows(); }
  bool is_linear() const override { return true; }
  Vector apply(const Vector& x) const override {
    require_dim(x.size(), h_.cols(), "MatrixObs::apply");
    return h_ * x;
  }
  Vector adjoint_apply(const Vector&, const Vector& w) const override {
    require_dim(w.size(), h_.rows(), "MatrixObs::adjoint_apply");
    return h_.transpose() * w;
  }
  Matrix jacobian(const Vector&) const override { return h_; }

 private:
  Matrix h_;
};

// Observe every stride-th state component.
inline std::shared_ptr<ObsOperator> make_subsample_obs(Index state_dim,
                                                       Index stride) {
  require(stride >= 1, "make_subsample_obs: stride must be >= 1");
  Index m = (state_dim + stride - 1) / stride;
  Matrix h = Matrix::Zero(m, state_dim);
  for (Index r = 0; r < m; ++r) h(r, r * stride) = 1.0;
  return std::make_shared<MatrixObs>(std::move(h));
}

// One measurement: y at interval index k, its operator, and its error
// covariance. Errors are uncorrelated across times by construction (each
// entry carries its own R).
struct Observation {
  int time_index;
  Vector y;
  std::shared_ptr<const ObsOperator> op;
  CovarianceOperator noise;

  Observation(int k, Vector y_in, std::shared_ptr<const ObsOperator> op_in,
              CovarianceOperator r)
      : time_index(k), y(std::move(y_in)), op(std::move(op_in)),
        noise(std::move(r)) {
    require(time_index >= 0, "Observation: time index must be >= 0");
    require(op != nullptr, "Observation: missing operator");
    require_finite(y, "Observation");
    require_dim(y.size(), op->obs_dim(), "Observation: y");
    require_dim(noise.dimension(), op->obs_dim(), "Observation: R");
  }
};

class ObservationSet {
 public:
  ObservationSet() = default;

  void add(Observation o) { obs_.push_back(std::move(o)); }
  const std::vector<Observation>& all() const { return obs_; }
  std::size_t size() const { return obs_.size(); }
  bool empty() const { return obs_.empty(); }

  int max_time_index() const {
    int k = 0;
    for (const auto& o : obs_) k = std::max(k, o.time_index);
    return k;
  }

 private:
  std::vector<Observation> obs_;
};

}  // namespace da
