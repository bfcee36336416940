#pragma once

#include <da/core.hpp>
#include <da/fourdvar.hpp>
#include <da/model.hpp>
#include <da/pod.hpp>

#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace da {

// Galerkin reduction of a full model over one observation interval:
// lift with V, run the full interval map, restrict with Vᵀ. The interval
// Jacobian Vᵀ M V is assembled in the reduced space (central differences,
// one probe pair per reduced direction) unless the full model is linear,
// in which case it is exact.
class ReducedModel {
 public:
  ReducedModel(std::shared_ptr<const ModelInterface> full, PodBasis basis)
      : full_(std::move(full)), basis_(std::move(basis)) {
    require(full_ != nullptr, "ReducedModel: missing full model");
    require_dim(basis_.full_dim(), full_->state_dimension(),
                "ReducedModel: basis");
  }

  const PodBasis& basis() const { return basis_; }
  const ModelInterface& full_model() const { return *full_; }
  Index reduced_dim() const { return basis_.reduced_dim(); }

  // One interval: Vᵀ M(V xr).
  Vector interval(const Vector& xr, int steps_per_interval) const {
    return basis_.restrict_state(
        full_->propagate(basis_.lift(xr), steps_per_interval));
  }

  // Jacobian of interval() at xr.
  Matrix interval_jacobian(const Vector& xr, int steps_per_interval) const {
    require_dim(xr.size(), reduced_dim(), "ReducedModel::interval_jacobian");
    if (full_->is_linear()) {
      Matrix m = full_->interval_jacobian(basis_.lift(xr), steps_per_interval);
      return basis_.matrix().transpose() * m * basis_.matrix();
    }
    std::uint64_t key = hash_vector(xr) ^
                        (0x9e3779b97f4a7c15ull *
                         static_cast<std::uint64_t>(steps_per_interval));
    {
      std::lock_guard<std::mutex> lock(cache_mutex_);
      for (auto& e : cache_)
        if (e.key == key && e.n == steps_per_interval && e.x == xr)
          return e.jac;
    }
    const Index nr = reduced_dim();
    Matrix jac(nr, nr);
    const double eps = 5e-6 * (1.0 + xr.lpNorm<Eigen::Infinity>());
    Vector probe = xr;
    for (Index j = 0; j < nr; ++j) {
      probe[j] = xr[j] + eps;
      Vector plus = interval(probe, steps_per_interval);
      probe[j] = xr[j] - eps;
      Vector minus = interval(probe, steps_per_interval);
      probe[j] = xr[j];
      jac.col(j) = (plus - minus) / (2.0 * eps);
    }
    {
      std::lock_guard<std::mutex> lock(cache_mutex_);
      if (cache_.size() >= 8) cache_.erase(cache_.begin());
      cache_.push_back({key, steps_per_interval, xr, jac});
    }
    return jac;
  }

 private:
  struct CacheEntry {
    std::uint64_t key;
    int n;
    Vector x;
    Matrix jac;
  };
  std::shared_ptr<const ModelInterface> full_;
  PodBasis basis_;
  mutable std::mutex cache_mutex_;
  mutable std::vector<CacheEntry> cache_;
};

inline Trajectory reduced_propagate(const ReducedModel& rm,
                                    const StateVector& xr0, int n_intervals,
                                    int steps_per_interval) {
  require(xr0.space() == Space::reduced,
          "reduced_propagate: state must be reduced");
  Trajectory traj;
  traj.states.reserve(n_intervals + 1);
  traj.states.push_back(xr0);
  Vector x = xr0.vec();
  for (int k = 0; k < n_intervals; ++k) {
    x = rm.interval(x, steps_per_interval);
    traj.states.emplace_back(x, Space::reduced);
  }
  return traj;
}

namespace detail {

// Projected prior factors shared by the reduced-space cost and gradient.
struct ReducedPrior {
  ReducedPrior(const AssimilationWindow& win, const PodBasis& basis)
      : b_reduced(symmetrized(basis.matrix().transpose() *
                              win.prior.cov.matrix() * basis.matrix())),
        background_reduced(basis.restrict_state(win.background())) {}

  CovarianceOperator b_reduced;
  Vector background_reduced;
};

inline Vector reduced_obs_pull(const AssimilationWindow& win,
                               const PodBasis& basis, int k,
                               const Vector& x_lifted) {
  Vector acc = Vector::Zero(win.state_dim());
  for (const auto& o : win.observations.all()) {
    if (o.time_index != k) continue;
    Vector innov = o.y - o.op->apply(x_lifted);
    acc += o.op->adjoint_apply(x_lifted, o.noise.inverse_apply(innov));
  }
  return basis.restrict_state(acc);
}

}  // namespace detail

// Reduced-space objective: prior projected through V, observations evaluated
// on lifted reduced trajectories.
inline double reduced_cost(const AssimilationWindow& win, const PodBasis& basis,
                           const Vector& xr0) {
  require_dim(xr0.size(), basis.reduced_dim(), "reduced_cost");
  detail::ReducedPrior rp(win, basis);
  Vector d = xr0 - rp.background_reduced;
  double j = 0.5 * d.dot(rp.b_reduced.inverse_apply(d));
  Vector xr = xr0;
  ReducedModel rm(win.model, basis);
  j += detail::obs_misfit(win, 0, basis.lift(xr));
  for (int k = 1; k <= win.n_intervals(); ++k) {
    xr = rm.interval(xr, win.steps_per_interval);
    j += detail::obs_misfit(win, k, basis.lift(xr));
  }
  return j;
}

// Gradient of reduced_cost via the consistent reduced adjoint sweep: the
// recursion uses (Vᵀ M V)ᵀ with the full-model Jacobian linearized at the
// lifted state the interval starts from.
inline Vector reduced_gradient(const AssimilationWindow& win,
                               const PodBasis& basis, const Vector& xr0) {
  require_dim(xr0.size(), basis.reduced_dim(), "reduced_gradient");
  detail::ReducedPrior rp(win, basis);
  ReducedModel rm(win.model, basis);
  const int big_k = win.n_intervals();
  Trajectory traj = reduced_propagate(rm, StateVector::reduced(xr0), big_k,
                                      win.steps_per_interval);
  Vector lambda =
      detail::reduced_obs_pull(win, basis, big_k, basis.lift(traj.at(big_k)));
  for (int k = big_k - 1; k >= 0; --k) {
    Matrix mr = rm.interval_jacobian(traj.at(k), win.steps_per_interval);
    lambda = mr.transpose() * lambda;
    lambda += detail::reduced_obs_pull(win, basis, k, basis.lift(traj.at(k)));
  }
  Vector d = xr0 - rp.background_reduced;
  return rp.b_reduced.inverse_apply(d) - lambda;
}

// Full-space objective with the likelihood routed through the reduced model:
// the prior term stays in the full space at x0 itself, while predicted
// states follow x̂_k = V M̃(Vᵀ x̂_{k-1}).
inline double approx_full_cost(const AssimilationWindow& win,
                               const PodBasis& basis, const Vector& x0) {
  require_dim(x0.size(), win.state_dim(), "approx_full_cost");
  Vector d = x0 - win.background();
  double j = 0.5 * d.dot(win.prior.cov.inverse_apply(d));
  ReducedModel rm(win.model, basis);
  j += detail::obs_misfit(win, 0, x0);
  Vector xr = basis.restrict_state(x0);
  for (int k = 1; k <= win.n_intervals(); ++k) {
    xr = rm.interval(xr, win.steps_per_interval);
    j += detail::obs_misfit(win, k, basis.lift(xr));
  }
  return j;
}

inline Vector approx_full_gradient(const AssimilationWindow& win,
                                   const PodBasis& basis, const Vector& x0) {
  require_dim(x0.size(), win.state_dim(), "approx_full_gradient");
  ReducedModel rm(win.model, basis);
  const int big_k = win.n_intervals();

  // Predicted states: hat_x_0 = x0 (full), then reduced chain lifted.
  std::vector<Vector> reduced_states(big_k + 1);
  reduced_states[0] = basis.restrict_state(x0);
  for (int k = 1; k <= big_k; ++k)
    reduced_states[k] =
        rm.interval(reduced_states[k - 1], win.steps_per_interval);
  auto predicted = [&](int k) -> Vector {
    return k == 0 ? x0 : basis.lift(reduced_states[k]);
  };

  Vector lambda = detail::obs_pull(win, big_k, predicted(big_k));
  for (int k = big_k - 1; k >= 0; --k) {
    Matrix mr = rm.interval_jacobian(reduced_states[k], win.steps_per_interval);
    lambda = basis.lift(mr.transpose() * basis.restrict_state(lambda));
    lambda += detail::obs_pull(win, k, predicted(k));
  }
  Vector d = x0 - win.background();
  return win.prior.cov.inverse_apply(d) - lambda;
}

struct RefreshOptions {
  bool normalize_adjoint_columns = true;
  bool center_snapshots = false;
  // Record forward snapshots every this many model steps inside an interval;
  // 0 keeps interval endpoints only.
  int snapshot_stride = 0;
};

// Rebuild the basis from the high-fidelity forward and adjoint trajectories
// started at x0, plus the full cost gradient there. Zero columns (e.g. a
// vanishing adjoint under zero innovation) are dropped; adjoint-like columns
// are normalized so their magnitudes do not drown the state modes.
inline PodBasis refresh_basis(const Vector& x0, const AssimilationWindow& win,
                              double gamma, const RefreshOptions& opts = {}) {
  require_dim(x0.size(), win.state_dim(), "refresh_basis");
  const int big_k = win.n_intervals();
  const Index n = win.state_dim();

  std::vector<Vector> cols;
  Trajectory traj = propagate_trajectory(*win.model, StateVector::full(x0),
                                         big_k, win.steps_per_interval);
  if (opts.snapshot_stride >= 1) {
    Vector x = x0;
    cols.push_back(x);
    for (int k = 0; k < big_k; ++k)
      for (int s = 0; s < win.steps_per_interval; ++s) {
        x = win.model->step(x);
        if ((s + 1) % opts.snapshot_stride == 0 ||
            s + 1 == win.steps_per_interval)
          cols.push_back(x);
      }
  } else {
    for (Index k = 0; k <= big_k; ++k) cols.push_back(traj.at(k));
  }
  const std::size_t n_forward = cols.size();

  // Adjoint sweep, recording every lambda_k.
  std::vector<Vector> lambdas(big_k + 1);
  lambdas[big_k] = detail::obs_pull(win, big_k, traj.at(big_k));
  for (int k = big_k - 1; k >= 0; --k) {
    lambdas[k] =
        win.model->adjoint(traj.at(k), lambdas[k + 1], win.steps_per_interval);
    lambdas[k] += detail::obs_pull(win, k, traj.at(k));
  }
  Vector grad = win.prior.cov.inverse_apply(x0 - win.background()) - lambdas[0];

  auto push_scaled = [&](const Vector& v) {
    double norm = v.norm();
    if (norm <= 1e-14) return;  // drop numerically zero columns
    cols.push_back(opts.normalize_adjoint_columns ? Vector(v / norm) : v);
  };
  for (const auto& l : lambdas) push_scaled(l);
  push_scaled(grad);

  Matrix snapshots(n, static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c)
    snapshots.col(static_cast<Index>(c)) = cols[c];
  if (opts.center_snapshots) {
    Vector mean = snapshots.rowwise().mean();
    snapshots.colwise() -= mean;
  }
  std::string provenance =
      "forward:" + std::to_string(n_forward) +
      " adjoint+gradient:" + std::to_string(cols.size() - n_forward) +
      " x0_hash:" + std::to_string(hash_vector(x0));
  return build_basis(snapshots, gamma, std::move(provenance));
}

}  // namespace da
