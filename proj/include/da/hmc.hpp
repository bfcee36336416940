#pragma once

#include <da/core.hpp>
#include <da/fourdvar.hpp>
#include <da/rng.hpp>
#include <da/rom.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace da {

enum class BackendTag { full, reduced, approx_full };

inline const char* to_string(BackendTag t) {
  switch (t) {
    case BackendTag::full: return "full";
    case BackendTag::reduced: return "reduced";
    default: return "approx_full";
  }
}

// Negative-log target plus its gradient, in whichever space the chain
// samples. to_full() lifts a chain state to the model space (identity unless
// the backend samples the reduced space).
class PotentialBackend {
 public:
  virtual ~PotentialBackend() = default;
  virtual Index dimension() const = 0;
  virtual double potential(const Vector& x) const = 0;
  virtual Vector potential_gradient(const Vector& x) const = 0;
  virtual BackendTag tag() const = 0;
  virtual Vector to_full(const Vector& x) const { return x; }
  virtual std::string basis_id() const { return {}; }
};

// Directional finite-difference check used to vet a backend's gradient at
// construction time. A probe sitting exactly at a stationary point gives a
// 0-vs-0 comparison, so both sides below the noise floor count as consistent.
inline void check_gradient_consistency(const PotentialBackend& backend,
                                       const Vector& x_probe, double rel_tol) {
  RngStream rng(0x5eedc0deull, 17);
  Vector dir = rng.normal_vector(backend.dimension());
  dir /= dir.norm();
  double eps = 2e-5 * (1.0 + x_probe.lpNorm<Eigen::Infinity>());
  double fd = (backend.potential(x_probe + eps * dir) -
               backend.potential(x_probe - eps * dir)) /
              (2.0 * eps);
  double an = backend.potential_gradient(x_probe).dot(dir);
  double floor = 1e-7 * (1.0 + std::abs(backend.potential(x_probe))) /
                 (1.0 + x_probe.lpNorm<Eigen::Infinity>());
  if (std::abs(fd) <= floor && std::abs(an) <= floor) return;
  double scale = std::max({std::abs(fd), std::abs(an)});
  if (std::abs(fd - an) / scale > rel_tol)
    throw Error("PotentialBackend: gradient failed its finite-difference "
                "check (fd=" + std::to_string(fd) + ", grad=" +
                std::to_string(an) + ")");
}

class FullPotential final : public PotentialBackend {
 public:
  explicit FullPotential(std::shared_ptr<const AssimilationWindow> win)
      : win_(std::move(win)) {}
  Index dimension() const override { return win_->state_dim(); }
  double potential(const Vector& x) const override { return cost(*win_, x); }
  Vector potential_gradient(const Vector& x) const override {
    return gradient(*win_, x);
  }
  BackendTag tag() const override { return BackendTag::full; }

 private:
  std::shared_ptr<const AssimilationWindow> win_;
};

class ReducedPotential final : public PotentialBackend {
 public:
  ReducedPotential(std::shared_ptr<const AssimilationWindow> win,
                   PodBasis basis, std::string basis_id)
      : win_(std::move(win)), basis_(std::move(basis)),
        basis_id_(std::move(basis_id)) {}
  Index dimension() const override { return basis_.reduced_dim(); }
  double potential(const Vector& x) const override {
    return reduced_cost(*win_, basis_, x);
  }
  Vector potential_gradient(const Vector& x) const override {
    return reduced_gradient(*win_, basis_, x);
  }
  BackendTag tag() const override { return BackendTag::reduced; }
  Vector to_full(const Vector& x) const override { return basis_.lift(x); }
  std::string basis_id() const override { return basis_id_; }
  const PodBasis& basis() const { return basis_; }

 private:
  std::shared_ptr<const AssimilationWindow> win_;
  PodBasis basis_;
  std::string basis_id_;
};

class ApproxFullPotential final : public PotentialBackend {
 public:
  ApproxFullPotential(std::shared_ptr<const AssimilationWindow> win,
                      PodBasis basis, std::string basis_id)
      : win_(std::move(win)), basis_(std::move(basis)),
        basis_id_(std::move(basis_id)) {}
  Index dimension() const override { return win_->state_dim(); }
  double potential(const Vector& x) const override {
    return approx_full_cost(*win_, basis_, x);
  }
  Vector potential_gradient(const Vector& x) const override {
    return approx_full_gradient(*win_, basis_, x);
  }
  BackendTag tag() const override { return BackendTag::approx_full; }
  std::string basis_id() const override { return basis_id_; }
  const PodBasis& basis() const { return basis_; }

 private:
  std::shared_ptr<const AssimilationWindow> win_;
  PodBasis basis_;
  std::string basis_id_;
};

inline std::shared_ptr<PotentialBackend> make_full_backend(
    std::shared_ptr<const AssimilationWindow> win, const Vector& probe,
    double check_tol = 1e-3) {
  auto b = std::make_shared<FullPotential>(std::move(win));
  check_gradient_consistency(*b, probe, check_tol);
  return b;
}

inline std::shared_ptr<PotentialBackend> make_reduced_backend(
    std::shared_ptr<const AssimilationWindow> win, PodBasis basis,
    std::string basis_id, const Vector& probe_reduced,
    double check_tol = 1e-3) {
  auto b = std::make_shared<ReducedPotential>(std::move(win), std::move(basis),
                                              std::move(basis_id));
  check_gradient_consistency(*b, probe_reduced, check_tol);
  return b;
}

inline std::shared_ptr<PotentialBackend> make_approx_backend(
    std::shared_ptr<const AssimilationWindow> win, PodBasis basis,
    std::string basis_id, const Vector& probe, double check_tol = 1e-3) {
  auto b = std::make_shared<ApproxFullPotential>(
      std::move(win), std::move(basis), std::move(basis_id));
  check_gradient_consistency(*b, probe, check_tol);
  return b;
}

// Diagonal positive mass matrix.
class MassMatrix {
 public:
  explicit MassMatrix(Vector diagonal) : diag_(std::move(diagonal)) {
    require(diag_.size() > 0, "MassMatrix: empty diagonal");
    for (Index i = 0; i < diag_.size(); ++i)
      if (!(diag_[i] > 0.0))
        throw NotPositiveDefiniteError(
            "MassMatrix: diagonal entries must be positive");
    sqrt_diag_ = diag_.cwiseSqrt();
    inv_diag_ = diag_.cwiseInverse();
  }

  static MassMatrix identity(Index n) {
    return MassMatrix(Vector::Ones(n));
  }

  Index dimension() const { return diag_.size(); }
  const Vector& diagonal() const { return diag_; }
  Vector apply(const Vector& p) const { return diag_.cwiseProduct(p); }
  Vector inverse_apply(const Vector& p) const {
    return inv_diag_.cwiseProduct(p);
  }
  // p ~ N(0, M)
  Vector sample(RngStream& rng) const {
    return sqrt_diag_.cwiseProduct(rng.normal_vector(diag_.size()));
  }

 private:
  Vector diag_;
  Vector sqrt_diag_;
  Vector inv_diag_;
};

struct HmcConfig {
  double h = 0.01;        // pseudo-time step of the symplectic integrator
  int m = 10;             // steps per trajectory; trajectory length T = m h
  int burn_in = 25;       // discarded proposals before sampling starts
  int mixing_steps = 5;   // keep every mixing_steps-th accepted state
  int ensemble_size = 100;
  std::uint64_t seed = 0;
  int stall_limit = 5000;  // consecutive rejections before aborting

  double trajectory_length() const { return h * m; }

  void validate() const {
    require(h > 0.0, "HmcConfig: h must be positive");
    require(m >= 1, "HmcConfig: m must be >= 1");
    require(burn_in >= 0, "HmcConfig: burn_in must be >= 0");
    require(mixing_steps >= 1, "HmcConfig: mixing_steps must be >= 1");
    require(ensemble_size >= 1, "HmcConfig: ensemble_size must be >= 1");
  }
};

// H(p, x) = 1/2 pᵀ M⁻¹ p + U(x)
inline double hamiltonian(const PotentialBackend& backend,
                          const MassMatrix& mass, const Vector& p,
                          const Vector& x) {
  require_dim(p.size(), backend.dimension(), "hamiltonian: p");
  require_dim(x.size(), backend.dimension(), "hamiltonian: x");
  return 0.5 * p.dot(mass.inverse_apply(p)) + backend.potential(x);
}

// m position-Verlet steps: half drift with M⁻¹p, full kick with -h ∇U at the
// midpoint, half drift.
inline std::pair<Vector, Vector> verlet_trajectory(
    const PotentialBackend& backend, const MassMatrix& mass, const Vector& p0,
    const Vector& x0, double h, int m) {
  require_dim(p0.size(), backend.dimension(), "verlet_trajectory: p");
  require_dim(x0.size(), backend.dimension(), "verlet_trajectory: x");
  Vector x = x0;
  Vector p = p0;
  for (int s = 0; s < m; ++s) {
    x += (0.5 * h) * mass.inverse_apply(p);
    p -= h * backend.potential_gradient(x);
    x += (0.5 * h) * mass.inverse_apply(p);
  }
  if (!x.allFinite() || !p.allFinite())
    throw DivergenceError("verlet_trajectory: non-finite phase state");
  return {std::move(p), std::move(x)};
}

struct ProposalOutcome {
  Vector x;
  double potential;
  double delta_h = 0.0;
  bool accepted = false;
  bool failed = false;
  std::string failure_reason;
};

// One Metropolis-adjusted Hamiltonian proposal. Momenta are drawn fresh from
// N(0, M) and discarded afterwards; a failed trajectory counts as a
// rejection. potential_curr carries U(x_curr) so the current energy is never
// recomputed.
inline ProposalOutcome propose_and_accept(const PotentialBackend& backend,
                                          const MassMatrix& mass,
                                          const Vector& x_curr,
                                          double potential_curr,
                                          const HmcConfig& cfg,
                                          RngStream& rng) {
  ProposalOutcome out;
  out.x = x_curr;
  out.potential = potential_curr;
  Vector p = mass.sample(rng);
  double h_curr = 0.5 * p.dot(mass.inverse_apply(p)) + potential_curr;
  double u = rng.uniform01();
  try {
    auto [p_star, x_star] =
        verlet_trajectory(backend, mass, p, x_curr, cfg.h, cfg.m);
    double pot_star = backend.potential(x_star);
    double h_star = 0.5 * p_star.dot(mass.inverse_apply(p_star)) + pot_star;
    out.delta_h = h_star - h_curr;
    double accept_prob =
        std::isnan(out.delta_h) ? 0.0 : std::min(1.0, std::exp(-out.delta_h));
    if (accept_prob > u) {
      out.accepted = true;
      out.x = std::move(x_star);
      out.potential = pot_star;
    }
  } catch (const Error& e) {
    out.failed = true;
    out.failure_reason = e.what();
    out.delta_h = std::numeric_limits<double>::infinity();
  }
  return out;
}

struct ProposalRecord {
  double delta_h;
  bool accepted;
  bool during_burn_in;
};

struct ChainResult {
  std::vector<StateVector> samples;       // in the backend's sampling space
  std::vector<Vector> full_samples;       // lifted to the full space
  std::vector<std::string> sample_basis_ids;
  std::vector<ProposalRecord> accept_log;
  double acceptance_rate = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;
  BackendTag backend_tag = BackendTag::full;
  // backend active when the chain finished (carries the adapted basis)
  std::shared_ptr<const PotentialBackend> final_backend;
};

// Swap-in of a refreshed basis between complete proposals. rebuild receives
// the chain's current state lifted to the full space and returns the new
// backend, the matching mass matrix, the chain state re-expressed for the
// new backend, and an identifier recorded with subsequent samples.
struct BasisRefreshPolicy {
  struct Refit {
    std::shared_ptr<PotentialBackend> backend;
    MassMatrix mass;
    Vector state;
    std::string id;
  };
  bool after_burn_in = true;
  int every_kept = 0;  // additionally refresh every K kept samples (0 = off)
  std::function<Refit(const Vector& x_full)> rebuild;
};

namespace detail {

inline std::string delta_h_summary(const std::vector<ProposalRecord>& log) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  double sum = 0.0;
  int n = 0;
  for (const auto& r : log) {
    if (!std::isfinite(r.delta_h)) continue;
    lo = std::min(lo, r.delta_h);
    hi = std::max(hi, r.delta_h);
    sum += r.delta_h;
    ++n;
  }
  if (n == 0) return "no finite energy deltas (all trajectories failed)";
  return "dH min/mean/max = " + std::to_string(lo) + "/" +
         std::to_string(sum / n) + "/" + std::to_string(hi) +
         " over " + std::to_string(n) + " proposals";
}

}  // namespace detail

// The sampling smoother: burn-in proposals are discarded, then accepted
// states are thinned (every mixing_steps-th acceptance is kept) until
// ensemble_size samples exist. Rejections repeat the current state for
// acceptance accounting but never advance the sample count. Reduced-space
// samples are lifted through the active basis as they are collected.
inline ChainResult run_smoother(std::shared_ptr<PotentialBackend> backend,
                                MassMatrix mass, Vector x_init,
                                const HmcConfig& cfg, RngStream& rng,
                                const BasisRefreshPolicy* refresh = nullptr) {
  cfg.validate();
  require_dim(x_init.size(), backend->dimension(), "run_smoother: x_init");
  require_dim(mass.dimension(), backend->dimension(), "run_smoother: mass");

  const Space sample_space =
      backend->tag() == BackendTag::reduced ? Space::reduced : Space::full;
  ChainResult result;
  result.seed = rng.seed();
  result.stream_id = rng.stream_id();
  result.backend_tag = backend->tag();

  Vector x = std::move(x_init);
  double pot = backend->potential(x);
  std::string basis_id = backend->basis_id();

  auto apply_refresh = [&]() {
    if (refresh == nullptr || !refresh->rebuild) return;
    if (backend->tag() == BackendTag::full) return;
    auto refit = refresh->rebuild(backend->to_full(x));
    backend = std::move(refit.backend);
    mass = std::move(refit.mass);
    x = std::move(refit.state);
    basis_id = refit.id;
    pot = backend->potential(x);  // energies never mix across bases
  };

  int accepted_total = 0;
  int accepted_burn = 0;
  for (int i = 0; i < cfg.burn_in; ++i) {
    ProposalOutcome o = propose_and_accept(*backend, mass, x, pot, cfg, rng);
    result.accept_log.push_back({o.delta_h, o.accepted, true});
    if (o.accepted) {
      x = std::move(o.x);
      pot = o.potential;
      ++accepted_total;
      ++accepted_burn;
    }
  }
  if (cfg.burn_in > 0 && accepted_burn == 0)
    throw SamplerAbortError(
        "run_smoother: zero acceptances across burn-in; " +
        detail::delta_h_summary(result.accept_log) +
        " (retune the step size)");

  if (refresh != nullptr && refresh->after_burn_in) apply_refresh();

  int accepted_since_kept = 0;
  int consecutive_rejections = 0;
  while (static_cast<int>(result.samples.size()) < cfg.ensemble_size) {
    ProposalOutcome o = propose_and_accept(*backend, mass, x, pot, cfg, rng);
    result.accept_log.push_back({o.delta_h, o.accepted, false});
    if (!o.accepted) {
      if (++consecutive_rejections >= cfg.stall_limit)
        throw SamplerAbortError(
            "run_smoother: " + std::to_string(consecutive_rejections) +
            " consecutive rejections; " +
            detail::delta_h_summary(result.accept_log));
      continue;
    }
    consecutive_rejections = 0;
    x = std::move(o.x);
    pot = o.potential;
    ++accepted_total;
    if (++accepted_since_kept < cfg.mixing_steps) continue;
    accepted_since_kept = 0;
    result.samples.emplace_back(x, sample_space);
    result.full_samples.push_back(backend->to_full(x));
    result.sample_basis_ids.push_back(basis_id);
    if (refresh != nullptr && refresh->every_kept > 0 &&
        static_cast<int>(result.samples.size()) < cfg.ensemble_size &&
        result.samples.size() % static_cast<std::size_t>(refresh->every_kept) ==
            0) {
      apply_refresh();
      accepted_since_kept = 0;  // full thinning stretch under the new basis
    }
  }

  result.acceptance_rate =
      result.accept_log.empty()
          ? 0.0
          : static_cast<double>(accepted_total) / result.accept_log.size();
  result.final_backend = backend;
  return result;
}

struct StepTuneResult {
  double h = 0.0;
  int m = 1;
  double rejection_rate = 1.0;
  std::vector<std::pair<double, double>> scanned;  // (h, rejection rate)
};

// Offline scan over step sizes at fixed trajectory length T, looking for a
// rejection rate inside [target_lo, target_hi]. The tuned parameters are
// frozen before any measured run.
inline StepTuneResult tune_step_size(const PotentialBackend& backend,
                                     const MassMatrix& mass,
                                     const Vector& x_init,
                                     const HmcConfig& base, RngStream& rng,
                                     double target_lo = 0.25,
                                     double target_hi = 0.30,
                                     int probes = 40) {
  const double T = base.trajectory_length();
  StepTuneResult best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int k = 3; k >= -6; --k) {  // large steps first: rejection decreasing
    double h = base.h * std::pow(2.0, k);
    int m = std::max(1, static_cast<int>(std::lround(T / h)));
    HmcConfig cfg = base;
    cfg.h = h;
    cfg.m = m;
    Vector x = x_init;
    double pot = backend.potential(x);
    int rejected = 0;
    for (int i = 0; i < probes; ++i) {
      ProposalOutcome o = propose_and_accept(backend, mass, x, pot, cfg, rng);
      if (o.accepted) {
        x = std::move(o.x);
        pot = o.potential;
      } else {
        ++rejected;
      }
    }
    double rate = static_cast<double>(rejected) / probes;
    best.scanned.emplace_back(h, rate);
    double mid = 0.5 * (target_lo + target_hi);
    if (rate >= target_lo && rate <= target_hi) {
      best.h = h;
      best.m = m;
      best.rejection_rate = rate;
      return best;
    }
    if (std::abs(rate - mid) < best_dist) {
      best_dist = std::abs(rate - mid);
      best.h = h;
      best.m = m;
      best.rejection_rate = rate;
    }
  }
  return best;
}

}  // namespace da
