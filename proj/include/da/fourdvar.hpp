#pragma once

#include <da/core.hpp>
#include <da/gaussian.hpp>
#include <da/model.hpp>
#include <da/observation.hpp>
#include <da/optim.hpp>

#include <memory>
#include <utility>

namespace da {

// A smoothing problem over one assimilation window: Gaussian prior on the
// initial state, time-distributed observations, and the dynamics connecting
// them. n_intervals() is the number of model intervals spanned (observation
// time index k means "after k intervals").
struct AssimilationWindow {
  AssimilationWindow(GaussianDensity prior_in, ObservationSet obs,
                     std::shared_ptr<const ModelInterface> model_in,
                     int steps_per_interval_in, int n_intervals_in = -1)
      : prior(std::move(prior_in)), observations(std::move(obs)),
        model(std::move(model_in)), steps_per_interval(steps_per_interval_in),
        n_intervals_(n_intervals_in) {
    require(model != nullptr, "AssimilationWindow: missing model");
    require(prior.mean.space() == Space::full,
            "AssimilationWindow: prior must live in the full space");
    require_dim(prior.dimension(), model->state_dimension(),
                "AssimilationWindow: prior");
    require(steps_per_interval >= 1,
            "AssimilationWindow: steps_per_interval must be >= 1");
    for (const auto& o : observations.all())
      require_dim(o.op->state_dim(), model->state_dimension(),
                  "AssimilationWindow: observation operator");
    if (n_intervals_ < 0) n_intervals_ = observations.max_time_index();
    require(n_intervals_ >= observations.max_time_index(),
            "AssimilationWindow: window shorter than last observation");
  }

  int n_intervals() const { return n_intervals_; }
  Index state_dim() const { return model->state_dimension(); }
  const Vector& background() const { return prior.mean.vec(); }

  GaussianDensity prior;
  ObservationSet observations;
  std::shared_ptr<const ModelInterface> model;
  int steps_per_interval;

 private:
  int n_intervals_;
};

namespace detail {

// Sum over observations at interval k of Hᵀ R⁻¹ (y - H(x)), linearized at x.
inline Vector obs_pull(const AssimilationWindow& win, int k, const Vector& x) {
  Vector acc = Vector::Zero(win.state_dim());
  for (const auto& o : win.observations.all()) {
    if (o.time_index != k) continue;
    Vector innov = o.y - o.op->apply(x);
    acc += o.op->adjoint_apply(x, o.noise.inverse_apply(innov));
  }
  return acc;
}

inline double obs_misfit(const AssimilationWindow& win, int k,
                         const Vector& x) {
  double acc = 0.0;
  for (const auto& o : win.observations.all()) {
    if (o.time_index != k) continue;
    Vector innov = o.y - o.op->apply(x);
    acc += 0.5 * innov.dot(o.noise.inverse_apply(innov));
  }
  return acc;
}

}  // namespace detail

// J(x0) = 1/2 ||x0 - xb||²_{B0⁻¹} + 1/2 Σ_k ||y_k - H_k(x_k)||²_{R_k⁻¹}
inline double cost(const AssimilationWindow& win, const Vector& x0) {
  require_dim(x0.size(), win.state_dim(), "cost");
  require_finite(x0, "cost");
  Vector d = x0 - win.background();
  double j = 0.5 * d.dot(win.prior.cov.inverse_apply(d));
  Vector x = x0;
  j += detail::obs_misfit(win, 0, x);
  for (int k = 1; k <= win.n_intervals(); ++k) {
    x = win.model->propagate(x, win.steps_per_interval);
    j += detail::obs_misfit(win, k, x);
  }
  return j;
}

// Adjoint-sweep gradient: lambda_K = (obs pull at K), then
// lambda_k = Mᵀ lambda_{k+1} + (obs pull at k), and
// grad = -B0⁻¹ (xb - x0) - lambda_0.
inline Vector gradient(const AssimilationWindow& win, const Vector& x0) {
  require_dim(x0.size(), win.state_dim(), "gradient");
  require_finite(x0, "gradient");
  const int big_k = win.n_intervals();
  Trajectory traj = propagate_trajectory(*win.model, StateVector::full(x0),
                                         big_k, win.steps_per_interval);
  Vector lambda = detail::obs_pull(win, big_k, traj.at(big_k));
  for (int k = big_k - 1; k >= 0; --k) {
    lambda = win.model->adjoint(traj.at(k), lambda, win.steps_per_interval);
    lambda += detail::obs_pull(win, k, traj.at(k));
  }
  Vector d = x0 - win.background();
  return win.prior.cov.inverse_apply(d) - lambda;
}

using MinimizeOptions = LbfgsOptions;
using MinimizeResult = LbfgsResult;

inline MinimizeResult minimize(const AssimilationWindow& win,
                               const Vector& x_init,
                               const MinimizeOptions& opts = {}) {
  require_dim(x_init.size(), win.state_dim(), "minimize");
  return lbfgs_minimize([&win](const Vector& x) { return cost(win, x); },
                        [&win](const Vector& x) { return gradient(win, x); },
                        x_init, opts);
}

}  // namespace da
