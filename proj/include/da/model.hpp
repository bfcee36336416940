#pragma once

#include <da/core.hpp>

#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace da {

// States at interval endpoints; states[0] is the initial condition.
struct Trajectory {
  std::vector<StateVector> states;

  Index size() const { return static_cast<Index>(states.size()); }
  const Vector& at(Index k) const { return states.at(k).vec(); }
  Space space() const {
    return states.empty() ? Space::full : states.front().space();
  }
};

// Forward-model contract: a deterministic one-step map plus tangent-linear
// and adjoint actions over n-step intervals. The defaults realize both by
// second-order central differences of the interval map, with the assembled
// interval Jacobian cached per linearization state; exactly representable
// models (LinearModel) override with closed forms.
class ModelInterface {
 public:
  virtual ~ModelInterface() = default;

  virtual Index state_dimension() const = 0;
  virtual Vector step(const Vector& x) const = 0;
  virtual bool is_linear() const { return false; }

  // n_steps applications of the one-step map with finiteness checks; a
  // non-finite state aborts with the offending step in the message.
  Vector propagate(const Vector& x0, int n_steps) const {
    require_dim(x0.size(), state_dimension(), "propagate");
    require_finite(x0, "propagate: initial state");
    Vector x = x0;
    for (int s = 0; s < n_steps; ++s) {
      x = step(x);
      if (!x.allFinite())
        throw DivergenceError("propagate: non-finite state after step " +
                              std::to_string(s + 1));
    }
    return x;
  }

  // Directional derivative of the n-step map at x_ref.
  virtual Vector tangent_linear(const Vector& x_ref, const Vector& dx,
                                int n_steps) const {
    require_dim(dx.size(), state_dimension(), "tangent_linear");
    double scale = dx.lpNorm<Eigen::Infinity>();
    if (scale == 0.0) return Vector::Zero(state_dimension());
    Vector dir = dx / scale;
    double eps = fd_epsilon(x_ref);
    Vector plus = propagate(x_ref + eps * dir, n_steps);
    Vector minus = propagate(x_ref - eps * dir, n_steps);
    return (scale / (2.0 * eps)) * (plus - minus);
  }

  // Mᵀ(x_ref) λ for the n-step interval map.
  virtual Vector adjoint(const Vector& x_ref, const Vector& lambda,
                         int n_steps) const {
    require_dim(lambda.size(), state_dimension(), "adjoint");
    return interval_jacobian(x_ref, n_steps).transpose() * lambda;
  }

  // Dense Jacobian of the n-step map, assembled column-by-column by central
  // differences and cached per (x_ref, n_steps).
  virtual Matrix interval_jacobian(const Vector& x_ref, int n_steps) const {
    require_dim(x_ref.size(), state_dimension(), "interval_jacobian");
    std::uint64_t key = hash_vector(x_ref) ^ (0x9e3779b97f4a7c15ull *
                                              static_cast<std::uint64_t>(n_steps));
    {
      std::lock_guard<std::mutex> lock(cache_mutex_);
      for (auto& entry : jac_cache_) {
        if (entry.key == key && entry.n_steps == n_steps &&
            entry.x.size() == x_ref.size() && entry.x == x_ref)
          return entry.jac;
      }
    }
    const Index n = state_dimension();
    Matrix jac(n, n);
    Vector xp = x_ref, xm = x_ref;
    for (Index j = 0; j < n; ++j) {
      double eps = kFdRel * (1.0 + std::abs(x_ref[j]));
      xp[j] = x_ref[j] + eps;
      xm[j] = x_ref[j] - eps;
      jac.col(j) = (propagate(xp, n_steps) - propagate(xm, n_steps)) /
                   (2.0 * eps);
      xp[j] = x_ref[j];
      xm[j] = x_ref[j];
    }
    {
      std::lock_guard<std::mutex> lock(cache_mutex_);
      if (jac_cache_.size() >= kCacheCap) jac_cache_.erase(jac_cache_.begin());
      jac_cache_.push_back({key, n_steps, x_ref, jac});
    }
    return jac;
  }

 protected:
  static constexpr double kFdRel = 5e-6;

  double fd_epsilon(const Vector& x_ref) const {
    return kFdRel * (1.0 + x_ref.lpNorm<Eigen::Infinity>());
  }

 private:
  struct CacheEntry {
    std::uint64_t key;
    int n_steps;
    Vector x;
    Matrix jac;
  };
  static constexpr std::size_t kCacheCap = 8;
  mutable std::mutex cache_mutex_;
  mutable std::vector<CacheEntry> jac_cache_;
};

// x_{k+1} = M x_k with exact tangent-linear and adjoint.
class LinearModel final : public ModelInterface {
 public:
  explicit LinearModel(Matrix m_step) : m_(std::move(m_step)) {
    if (m_.rows() != m_.cols())
      throw DimensionError("LinearModel: step matrix must be square");
  }

  Index state_dimension() const override { return m_.rows(); }
  bool is_linear() const override { return true; }
  const Matrix& step_matrix() const { return m_; }

  Vector step(const Vector& x) const override {
    require_dim(x.size(), m_.cols(), "LinearModel::step");
    return m_ * x;
  }

  Vector tangent_linear(const Vector&, const Vector& dx,
                        int n_steps) const override {
    Vector v = dx;
    for (int s = 0; s < n_steps; ++s) v = m_ * v;
    return v;
  }

  Vector adjoint(const Vector&, const Vector& lambda,
                 int n_steps) const override {
    Vector v = lambda;
    for (int s = 0; s < n_steps; ++s) v = m_.transpose() * v;
    return v;
  }

  Matrix interval_jacobian(const Vector&, int n_steps) const override {
    Matrix p = Matrix::Identity(m_.rows(), m_.cols());
    for (int s = 0; s < n_steps; ++s) p = m_ * p;
    return p;
  }

 private:
  Matrix m_;
};

inline Trajectory propagate_trajectory(const ModelInterface& model,
                                       const StateVector& x0, int n_intervals,
                                       int steps_per_interval) {
  require(n_intervals >= 0, "propagate_trajectory: negative interval count");
  require(steps_per_interval >= 1,
          "propagate_trajectory: steps_per_interval must be >= 1");
  Trajectory traj;
  traj.states.reserve(n_intervals + 1);
  traj.states.push_back(x0);
  Vector x = x0.vec();
  for (int k = 0; k < n_intervals; ++k) {
    x = model.propagate(x, steps_per_interval);
    traj.states.emplace_back(x, x0.space());
  }
  return traj;
}

}  // namespace da
