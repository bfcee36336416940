#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <da/diagnostics.hpp>
#include <da/hmc.hpp>

#include "test_support.hpp"

#include <cmath>
#include <memory>

using namespace da;

namespace {

// Quadratic potential 1/2 (x-c)ᵀ A (x-c), the analytic workhorse for
// integrator checks.
class QuadraticPotential final : public PotentialBackend {
 public:
  QuadraticPotential(Matrix a, Vector c)
      : a_(std::move(a)), c_(std::move(c)) {}
  Index dimension() const override { return c_.size(); }
  double potential(const Vector& x) const override {
    Vector d = x - c_;
    return 0.5 * d.dot(a_ * d);
  }
  Vector potential_gradient(const Vector& x) const override {
    return a_ * (x - c_);
  }
  BackendTag tag() const override { return BackendTag::full; }

 private:
  Matrix a_;
  Vector c_;
};

class FlatPotential final : public PotentialBackend {
 public:
  explicit FlatPotential(Index n) : n_(n) {}
  Index dimension() const override { return n_; }
  double potential(const Vector&) const override { return 0.0; }
  Vector potential_gradient(const Vector&) const override {
    return Vector::Zero(n_);
  }
  BackendTag tag() const override { return BackendTag::full; }

 private:
  Index n_;
};

class BrokenGradientPotential final : public PotentialBackend {
 public:
  Index dimension() const override { return 2; }
  double potential(const Vector& x) const override { return x.squaredNorm(); }
  Vector potential_gradient(const Vector& x) const override {
    return -2.0 * x;  // wrong sign on purpose
  }
  BackendTag tag() const override { return BackendTag::full; }
};

AssimilationWindow make_linear_window(RngStream& rng, Index n, int n_obs) {
  Matrix q = oracle::random_orthogonal(rng, n);
  auto model = std::make_shared<LinearModel>(0.9 * q);
  Vector xb = rng.normal_vector(n);
  auto h = std::make_shared<IdentityObs>(n);
  ObservationSet obs;
  Vector x = xb + 0.3 * rng.normal_vector(n);
  for (int k = 1; k <= n_obs; ++k) {
    x = model->propagate(x, 1);
    obs.add(Observation(k, x + 0.4 * rng.normal_vector(n), h,
                        CovarianceOperator::identity(n, 0.25)));
  }
  GaussianDensity prior(StateVector::full(xb), CovarianceOperator::identity(n));
  return AssimilationWindow(prior, std::move(obs), model, 1);
}

}  // namespace

TEST_CASE("hamiltonian closed forms") {
  FlatPotential flat(2);
  MassMatrix mass = MassMatrix::identity(2);
  Vector p(2);
  p << 3.0, 4.0;
  CHECK(hamiltonian(flat, mass, Vector::Zero(2), Vector::Ones(2)) ==
        doctest::Approx(0.0));
  CHECK(hamiltonian(flat, mass, p, Vector::Zero(2)) == doctest::Approx(12.5));

  RngStream rng(3);
  Matrix a = oracle::random_spd(rng, 4);
  Vector c = rng.normal_vector(4);
  QuadraticPotential quad(a, c);
  Vector mdiag = rng.normal_vector(4).cwiseAbs() + Vector::Constant(4, 0.2);
  MassMatrix m2(mdiag);
  Vector pp = rng.normal_vector(4);
  Vector xx = rng.normal_vector(4);
  double direct = 0.0;
  for (Index i = 0; i < 4; ++i) direct += 0.5 * pp[i] * pp[i] / mdiag[i];
  direct += 0.5 * oracle::quadform_loop(xx, c, a);
  CHECK(hamiltonian(quad, m2, pp, xx) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("free drift under a flat potential") {
  FlatPotential flat(3);
  MassMatrix mass = MassMatrix::identity(3);
  RngStream rng(4);
  Vector p0 = rng.normal_vector(3);
  Vector x0 = rng.normal_vector(3);
  auto [p, x] = verlet_trajectory(flat, mass, p0, x0, 0.1, 10);
  CHECK((p - p0).norm() < 1e-14);
  CHECK((x - (x0 + 1.0 * p0)).norm() < 1e-12);  // T = m h = 1
}

TEST_CASE("one scalar step matches the symbolic expansion") {
  // J(x) = x²/2, M = 1:
  //   x(h) = x0 (1 - h²/2) + p0 (h - h³/4)
  //   p(h) = p0 (1 - h²/2) - h x0
  QuadraticPotential quad(Matrix::Identity(1, 1), Vector::Zero(1));
  MassMatrix mass = MassMatrix::identity(1);
  const double h = 0.3;
  const double x0 = 0.7, p0 = -1.3;
  auto [p, x] = verlet_trajectory(quad, mass, Vector::Constant(1, p0),
                                  Vector::Constant(1, x0), h, 1);
  CHECK(x[0] == doctest::Approx(x0 * (1 - h * h / 2) + p0 * (h - h * h * h / 4))
                    .epsilon(1e-14));
  CHECK(p[0] == doctest::Approx(p0 * (1 - h * h / 2) - h * x0).epsilon(1e-14));
}

TEST_CASE("verlet is time reversible") {
  RngStream rng(5);
  Matrix a = oracle::random_spd(rng, 5);
  QuadraticPotential quad(a, Vector::Zero(5));
  Vector mdiag = rng.normal_vector(5).cwiseAbs() + Vector::Constant(5, 0.3);
  MassMatrix mass(mdiag);
  Vector p0 = rng.normal_vector(5);
  Vector x0 = rng.normal_vector(5);
  auto [p1, x1] = verlet_trajectory(quad, mass, p0, x0, 0.05, 20);
  auto [p2, x2] = verlet_trajectory(quad, mass, -p1, x1, 0.05, 20);
  CHECK((x2 - x0).lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK((p2 + p0).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("verlet one-step map preserves phase-space volume") {
  RngStream rng(6);
  for (Index n : {2, 6, 10}) {
    Matrix a = oracle::random_spd(rng, n);
    QuadraticPotential quad(a, Vector::Zero(n));
    Vector mdiag = rng.normal_vector(n).cwiseAbs() + Vector::Constant(n, 0.4);
    MassMatrix mass(mdiag);
    const double h = 0.1;
    // the map is linear for a quadratic potential: assemble it column-wise
    Matrix map(2 * n, 2 * n);
    for (Index j = 0; j < 2 * n; ++j) {
      Vector unit = Vector::Zero(2 * n);
      unit[j] = 1.0;
      auto [p, x] = verlet_trajectory(quad, mass, unit.head(n), unit.tail(n),
                                      h, 1);
      map.col(j).head(n) = p;
      map.col(j).tail(n) = x;
    }
    CHECK(std::abs(std::abs(map.determinant()) - 1.0) < 1e-10);
  }
}

TEST_CASE("energy error scales as h^2") {
  RngStream rng(7);
  Matrix a = oracle::random_spd(rng, 4);
  QuadraticPotential quad(a, Vector::Zero(4));
  MassMatrix mass = MassMatrix::identity(4);
  Vector p0 = rng.normal_vector(4);
  Vector x0 = rng.normal_vector(4);
  const double T = 1.0;

  auto max_energy_err = [&](double h) {
    int m = static_cast<int>(std::lround(T / h));
    double h0 = hamiltonian(quad, mass, p0, x0);
    Vector p = p0, x = x0;
    double worst = 0.0;
    for (int s = 0; s < m; ++s) {
      auto [pn, xn] = verlet_trajectory(quad, mass, p, x, h, 1);
      p = pn;
      x = xn;
      worst = std::max(worst, std::abs(hamiltonian(quad, mass, p, x) - h0));
    }
    return worst;
  };
  double coarse = max_energy_err(0.05);
  double fine = max_energy_err(0.025);
  double ratio = coarse / fine;
  CHECK(ratio > 3.5);
  CHECK(ratio < 4.5);
}

TEST_CASE("acceptance probability behavior") {
  FlatPotential flat(2);
  MassMatrix mass = MassMatrix::identity(2);
  HmcConfig cfg;
  cfg.h = 0.2;
  cfg.m = 5;
  RngStream rng(8);
  // flat potential: ΔH = 0 exactly, every proposal accepted
  Vector x = Vector::Zero(2);
  double pot = flat.potential(x);
  for (int i = 0; i < 50; ++i) {
    ProposalOutcome o = propose_and_accept(flat, mass, x, pot, cfg, rng);
    CHECK(o.accepted);
    CHECK(o.delta_h == doctest::Approx(0.0));
    x = o.x;
    pot = o.potential;
  }
}

TEST_CASE("acceptance probabilities stay in [0, 1] and honor exp(-dH)") {
  CHECK(std::min(1.0, std::exp(-0.0)) == doctest::Approx(1.0));
  CHECK(std::min(1.0, std::exp(-std::log(2.0))) == doctest::Approx(0.5));
  RngStream rng(9);
  for (int i = 0; i < 100; ++i) {
    double dh = 10.0 * (rng.uniform01() - 0.5);
    double a = std::min(1.0, std::exp(-dh));
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("run_smoother single-sample contract") {
  auto flat = std::make_shared<FlatPotential>(2);
  MassMatrix mass = MassMatrix::identity(2);
  HmcConfig cfg;
  cfg.burn_in = 0;
  cfg.mixing_steps = 1;
  cfg.ensemble_size = 1;
  RngStream rng(10);
  ChainResult res = run_smoother(flat, mass, Vector::Zero(2), cfg, rng);
  CHECK(res.samples.size() == 1);
  CHECK(res.accept_log.size() == 1);
  CHECK(res.acceptance_rate == doctest::Approx(1.0));
}

TEST_CASE("run_smoother is deterministic for a fixed seed") {
  RngStream rng_win(11);
  AssimilationWindow win = make_linear_window(rng_win, 4, 3);
  auto winp = std::make_shared<AssimilationWindow>(win);
  auto backend = make_full_backend(winp, win.background());
  MassMatrix mass(win.prior.cov.inverse_matrix().diagonal());
  HmcConfig cfg;
  cfg.h = 0.1;
  cfg.m = 8;
  cfg.burn_in = 10;
  cfg.mixing_steps = 2;
  cfg.ensemble_size = 20;

  RngStream r1(999, 0);
  ChainResult a = run_smoother(backend, mass, win.background(), cfg, r1);
  RngStream r2(999, 0);
  ChainResult b = run_smoother(backend, mass, win.background(), cfg, r2);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i)
    CHECK(a.samples[i].vec() == b.samples[i].vec());  // bitwise
  CHECK(a.acceptance_rate == b.acceptance_rate);

  RngStream r3(999, 1);
  ChainResult c = run_smoother(backend, mass, win.background(), cfg, r3);
  CHECK(c.samples.front().vec() != a.samples.front().vec());
}

TEST_CASE("full backend reproduces the linear-Gaussian posterior mean") {
  RngStream rng_win(12);
  AssimilationWindow win = make_linear_window(rng_win, 4, 3);
  auto winp = std::make_shared<AssimilationWindow>(win);
  PosteriorMoments pm = linear_posterior_moments(win);

  auto backend = make_full_backend(winp, win.background());
  MassMatrix mass(win.prior.cov.inverse_matrix().diagonal());
  HmcConfig cfg;
  cfg.h = 0.05;  // T = 0.5, near a quarter period of the target
  cfg.m = 10;
  cfg.burn_in = 50;
  cfg.mixing_steps = 2;
  cfg.ensemble_size = 2000;
  RngStream rng(2025, 0);
  ChainResult res = run_smoother(backend, mass, pm.mean, cfg, rng);
  PosteriorMoments em = ensemble_moments(res.full_samples);
  for (Index i = 0; i < 4; ++i) {
    double se = std::sqrt(pm.cov(i, i) / cfg.ensemble_size);
    CHECK(std::abs(em.mean[i] - pm.mean[i]) < 4.0 * se);
  }
}

TEST_CASE("2-D Gaussian target passes a CDF distance smoke test") {
  Matrix a(2, 2);
  a << 1.2, 0.4, 0.4, 0.9;  // precision matrix
  auto quad = std::make_shared<QuadraticPotential>(a, Vector::Zero(2));
  Matrix cov = a.inverse();
  MassMatrix mass(a.diagonal());
  HmcConfig cfg;
  cfg.h = 0.25;
  cfg.m = 6;
  cfg.burn_in = 100;
  cfg.mixing_steps = 1;
  cfg.ensemble_size = 100000;
  RngStream rng(31415, 0);
  ChainResult res = run_smoother(quad, mass, Vector::Zero(2), cfg, rng);

  for (Index axis = 0; axis < 2; ++axis) {
    std::vector<double> vals;
    vals.reserve(res.samples.size());
    for (const auto& s : res.samples) vals.push_back(s.vec()[axis]);
    std::sort(vals.begin(), vals.end());
    double sigma = std::sqrt(cov(axis, axis));
    double worst = 0.0;
    const auto n = static_cast<double>(vals.size());
    for (std::size_t i = 0; i < vals.size(); i += 97) {
      double emp = (static_cast<double>(i) + 0.5) / n;
      double asymp = 0.5 * std::erfc(-vals[i] / (sigma * std::sqrt(2.0)));
      worst = std::max(worst, std::abs(emp - asymp));
    }
    CHECK(worst < 0.02);
  }
}

TEST_CASE("zero acceptances across burn-in aborts with diagnostics") {
  // enormous curvature + large step: every trajectory overshoots
  Matrix a = 1e8 * Matrix::Identity(2, 2);
  auto quad = std::make_shared<QuadraticPotential>(a, Vector::Zero(2));
  MassMatrix mass = MassMatrix::identity(2);
  HmcConfig cfg;
  cfg.h = 0.5;
  cfg.m = 10;
  cfg.burn_in = 20;
  cfg.ensemble_size = 5;
  RngStream rng(13);
  try {
    run_smoother(quad, mass, Vector::Constant(2, 1.0), cfg, rng);
    FAIL("expected SamplerAbortError");
  } catch (const SamplerAbortError& e) {
    CHECK(std::string(e.what()).find("dH") != std::string::npos);
  }
}

TEST_CASE("gradient self-check rejects an inconsistent backend") {
  BrokenGradientPotential broken;
  CHECK_THROWS_AS(
      check_gradient_consistency(broken, Vector::Ones(2), 1e-3), Error);
}

TEST_CASE("mass matrix validation and sampling") {
  CHECK_THROWS_AS(MassMatrix(Vector::Zero(3)), NotPositiveDefiniteError);
  Vector d(2);
  d << 4.0, 9.0;
  MassMatrix mass(d);
  RngStream rng(14);
  double s2 = 0.0;
  const int n_draws = 20000;
  for (int i = 0; i < n_draws; ++i) {
    Vector p = mass.sample(rng);
    s2 += p[0] * p[0];
  }
  CHECK(s2 / n_draws == doctest::Approx(4.0).epsilon(0.05));
  CHECK((mass.inverse_apply(mass.apply(Vector::Ones(2))) - Vector::Ones(2))
            .norm() < 1e-15);
}

TEST_CASE("reduced chain refresh swaps bases between proposals") {
  RngStream rng_win(15);
  AssimilationWindow win = make_linear_window(rng_win, 6, 3);
  auto winp = std::make_shared<AssimilationWindow>(win);
  PodBasis basis0 = refresh_basis(win.background(), win, 0.999);
  auto backend = make_reduced_backend(winp, basis0, "basis-0",
                                      basis0.restrict_state(win.background()));

  Matrix b_red = basis0.matrix().transpose() * win.prior.cov.matrix() *
                 basis0.matrix();
  MassMatrix mass(symmetrized(b_red).inverse().diagonal());

  int refresh_count = 0;
  BasisRefreshPolicy policy;
  policy.after_burn_in = true;
  policy.rebuild = [&](const Vector& x_full) {
    ++refresh_count;
    PodBasis nb = refresh_basis(x_full, *winp, 0.999);
    Matrix nb_red =
        nb.matrix().transpose() * winp->prior.cov.matrix() * nb.matrix();
    auto nb_backend = make_reduced_backend(winp, nb, "basis-1",
                                           nb.restrict_state(x_full));
    return BasisRefreshPolicy::Refit{
        nb_backend, MassMatrix(symmetrized(nb_red).inverse().diagonal()),
        nb.restrict_state(x_full), "basis-1"};
  };

  HmcConfig cfg;
  cfg.h = 0.1;
  cfg.m = 5;
  cfg.burn_in = 5;
  cfg.mixing_steps = 1;
  cfg.ensemble_size = 10;
  RngStream rng(777, 0);
  ChainResult res = run_smoother(backend, mass,
                                 basis0.restrict_state(win.background()), cfg,
                                 rng, &policy);
  CHECK(refresh_count == 1);
  CHECK(res.samples.size() == 10);
  for (const auto& id : res.sample_basis_ids) CHECK(id == "basis-1");
  // lifted samples live in the full space
  CHECK(res.full_samples.front().size() == 6);
}

TEST_CASE("tune_step_size lands in or near the target rejection band") {
  RngStream rng_win(16);
  Matrix a = oracle::random_spd(rng_win, 6);
  auto quad = std::make_shared<QuadraticPotential>(a, Vector::Zero(6));
  MassMatrix mass = MassMatrix::identity(6);
  HmcConfig base;
  base.h = 0.8;
  base.m = 4;
  RngStream rng(17);
  StepTuneResult tuned =
      tune_step_size(*quad, mass, Vector::Zero(6), base, rng, 0.05, 0.60, 60);
  CHECK(tuned.h > 0.0);
  CHECK(tuned.rejection_rate >= 0.0);
  CHECK(tuned.rejection_rate <= 0.60);
  CHECK_FALSE(tuned.scanned.empty());
}
