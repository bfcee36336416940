#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <da/diagnostics.hpp>
#include <da/fourdvar.hpp>
#include <da/swe.hpp>

#include "test_support.hpp"

#include <algorithm>
#include <memory>

using namespace da;

namespace {

// Linear-Gaussian window with observations synthesized from a seeded truth.
AssimilationWindow make_linear_window(RngStream& rng, Index n, int n_obs,
                                      int steps_per_interval = 1,
                                      double sigma_b = 1.0,
                                      double sigma_o = 0.5) {
  Matrix q = oracle::random_orthogonal(rng, n);
  auto model = std::make_shared<LinearModel>(0.95 * q);
  Vector xb = rng.normal_vector(n);
  auto h = std::make_shared<IdentityObs>(n);
  ObservationSet obs;
  Vector x = xb + 0.3 * rng.normal_vector(n);
  for (int k = 1; k <= n_obs; ++k) {
    x = model->propagate(x, steps_per_interval);
    Vector y = x + sigma_o * rng.normal_vector(n);
    obs.add(Observation(k, y, h,
                        CovarianceOperator::identity(n, sigma_o * sigma_o)));
  }
  GaussianDensity prior(StateVector::full(xb),
                        CovarianceOperator::identity(n, sigma_b * sigma_b));
  return AssimilationWindow(prior, std::move(obs), model, steps_per_interval);
}

AssimilationWindow make_swe_window(int nx, int ny, int n_obs,
                                   int steps_per_interval, RngStream& rng) {
  ShallowWaterModel::Params p;
  p.nx = nx;
  p.ny = ny;
  p.dt = 0.05;
  auto model = std::make_shared<ShallowWaterModel>(p);
  Vector truth = model->balanced_state(2.0, 0.1, 1.2);
  const Index n = model->state_dimension();
  Vector sig(n);
  for (Index i = 0; i < n; ++i) sig[i] = i < 2 * nx * ny ? 0.01 : 0.02;
  Vector xb = truth + sig.cwiseProduct(rng.normal_vector(n));
  auto h = std::make_shared<IdentityObs>(n);
  ObservationSet obs;
  Vector x = truth;
  for (int k = 1; k <= n_obs; ++k) {
    x = model->propagate(x, steps_per_interval);
    Vector y = x + 0.01 * rng.normal_vector(n);
    obs.add(Observation(k, y, h, CovarianceOperator::identity(n, 1e-4)));
  }
  GaussianDensity prior(StateVector::full(xb),
                        CovarianceOperator::diagonal(sig.cwiseProduct(sig)));
  return AssimilationWindow(prior, std::move(obs), model, steps_per_interval);
}

}  // namespace

TEST_CASE("cost vanishes at a perfectly observed background") {
  RngStream rng(1);
  const Index n = 4;
  auto model = std::make_shared<LinearModel>(
      0.8 * oracle::random_orthogonal(rng, n));
  Vector xb = rng.normal_vector(n);
  auto h = std::make_shared<IdentityObs>(n);
  ObservationSet obs;
  Vector x = xb;
  for (int k = 1; k <= 3; ++k) {
    x = model->propagate(x, 1);
    obs.add(Observation(k, x, h, CovarianceOperator::identity(n)));
  }
  AssimilationWindow win(
      GaussianDensity(StateVector::full(xb), CovarianceOperator::identity(n)),
      std::move(obs), model, 1);
  CHECK(cost(win, xb) == doctest::Approx(0.0));
}

TEST_CASE("scalar window with one observation at t0 gives J = 1") {
  auto model = std::make_shared<LinearModel>(Matrix::Identity(1, 1));
  auto h = std::make_shared<IdentityObs>(1);
  ObservationSet obs;
  obs.add(Observation(0, Vector::Zero(1), h, CovarianceOperator::identity(1)));
  AssimilationWindow win(
      GaussianDensity(StateVector::full(Vector::Zero(1)),
                      CovarianceOperator::identity(1)),
      std::move(obs), model, 1, 1);
  CHECK(cost(win, Vector::Ones(1)) == doctest::Approx(1.0));
}

TEST_CASE("cost equals the explicit quadratic form") {
  RngStream rng(2);
  AssimilationWindow win = make_linear_window(rng, 4, 3);
  const auto* lin = dynamic_cast<const LinearModel*>(win.model.get());
  REQUIRE(lin != nullptr);
  const Matrix& m = lin->step_matrix();
  Vector x0 = rng.normal_vector(4);

  Matrix binv = win.prior.cov.inverse_matrix();
  double expected = 0.5 * oracle::quadform_loop(x0, win.background(), binv);
  for (const auto& o : win.observations.all()) {
    Matrix mk = Matrix::Identity(4, 4);
    for (int i = 0; i < o.time_index; ++i) mk = m * mk;
    Vector pred = mk * x0;
    Matrix rinv = o.noise.inverse_matrix();
    expected += 0.5 * oracle::quadform_loop(o.y, pred, rinv);
  }
  CHECK(cost(win, x0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("cost does not depend on observation ordering") {
  RngStream rng(3);
  AssimilationWindow win = make_linear_window(rng, 3, 4);
  ObservationSet reversed;
  auto all = win.observations.all();
  for (auto it = all.rbegin(); it != all.rend(); ++it) reversed.add(*it);
  AssimilationWindow win2(win.prior, std::move(reversed), win.model,
                          win.steps_per_interval);
  Vector x0 = rng.normal_vector(3);
  CHECK(cost(win, x0) == doctest::Approx(cost(win2, x0)).epsilon(1e-14));
}

TEST_CASE("cost along a line is exactly quadratic for linear dynamics") {
  RngStream rng(4);
  AssimilationWindow win = make_linear_window(rng, 5, 3);
  Vector x0 = rng.normal_vector(5);
  Vector dir = rng.normal_vector(5);
  std::vector<double> ts, js;
  for (int i = -3; i <= 3; ++i) {
    double t = 0.4 * i;
    ts.push_back(t);
    js.push_back(cost(win, x0 + t * dir));
  }
  double scale = *std::max_element(js.begin(), js.end());
  CHECK(oracle::quadratic_fit_residual(ts, js) / scale < 1e-10);
}

TEST_CASE("gradient without observations is the prior pull") {
  RngStream rng(5);
  const Index n = 4;
  auto model = std::make_shared<LinearModel>(Matrix::Identity(n, n));
  Matrix b = oracle::random_spd(rng, n);
  Vector xb = rng.normal_vector(n);
  AssimilationWindow win(
      GaussianDensity(StateVector::full(xb), CovarianceOperator(b)),
      ObservationSet{}, model, 1, 2);
  Vector x0 = rng.normal_vector(n);
  Vector expected = CovarianceOperator(b).inverse_apply(x0 - xb);
  CHECK((gradient(win, x0) - expected).norm() < 1e-12 * expected.norm());
}

TEST_CASE("gradient vanishes at the analytic posterior mean") {
  RngStream rng(6);
  AssimilationWindow win = make_linear_window(rng, 4, 3);
  PosteriorMoments pm = linear_posterior_moments(win);
  Vector g = gradient(win, pm.mean);
  double scale = win.prior.cov.inverse_apply(win.background()).norm();
  CHECK(g.norm() < 1e-8 * scale);
}

TEST_CASE("gradient matches central differences of the cost") {
  RngStream rng(7);

  SUBCASE("linear model") {
    AssimilationWindow win = make_linear_window(rng, 5, 3, 2);
    Vector x0 = rng.normal_vector(5);
    Vector g = gradient(win, x0);
    auto f = [&](const Vector& x) { return cost(win, x); };
    for (Index j = 0; j < 5; ++j) {
      double fd = oracle::fd_component(f, x0, j, 1e-6);
      CHECK(std::abs(g[j] - fd) / std::max(1.0, std::abs(fd)) < 1e-6);
    }
  }

  SUBCASE("SWE 8x8") {
    AssimilationWindow win = make_swe_window(8, 8, 3, 2, rng);
    Vector x0 = win.background();
    Vector g = gradient(win, x0);
    auto f = [&](const Vector& x) { return cost(win, x); };
    double gscale = g.cwiseAbs().maxCoeff();
    for (int trial = 0; trial < 20; ++trial) {
      Index j = static_cast<Index>(rng.uniform_index(win.state_dim()));
      double fd = oracle::fd_component(f, x0, j, 1e-5);
      CHECK(std::abs(g[j] - fd) / std::max(gscale, std::abs(fd)) < 1e-4);
    }
  }
}

TEST_CASE("minimize reaches the analytic mean of a linear-Gaussian window") {
  RngStream rng(8);
  AssimilationWindow win = make_linear_window(rng, 6, 4);
  PosteriorMoments pm = linear_posterior_moments(win);
  MinimizeOptions opts;
  opts.gtol_rel = 1e-10;
  MinimizeResult res = minimize(win, win.background(), opts);
  CHECK(res.converged);
  CHECK((res.x - pm.mean).norm() / pm.mean.norm() < 1e-6);
}

TEST_CASE("minimize returns immediately from an optimal start") {
  RngStream rng(9);
  AssimilationWindow win = make_linear_window(rng, 4, 2);
  PosteriorMoments pm = linear_posterior_moments(win);
  MinimizeResult res = minimize(win, pm.mean);
  CHECK(res.iterations <= 1);
  CHECK((res.x - pm.mean).norm() <= 1e-10);
}

TEST_CASE("lbfgs solves a hand-built 2-D quadratic") {
  Vector target(2);
  target << 1.0, 2.0;
  Matrix a(2, 2);
  a << 3.0, 0.5, 0.5, 1.5;
  auto f = [&](const Vector& x) {
    Vector d = x - target;
    return 0.5 * d.dot(a * d);
  };
  auto g = [&](const Vector& x) { return Vector(a * (x - target)); };
  LbfgsOptions opts;
  opts.gtol_abs = 1e-12;
  opts.gtol_rel = 1e-12;
  LbfgsResult res = lbfgs_minimize(f, g, Vector::Zero(2), opts);
  CHECK((res.x - target).norm() < 1e-8);
}

TEST_CASE("lbfgs reports a failed line search and keeps the best iterate") {
  // gradient deliberately points uphill: no step can satisfy Armijo
  auto f = [](const Vector& x) { return x.squaredNorm(); };
  auto g = [](const Vector& x) { return Vector(-2.0 * x); };
  LbfgsResult res = lbfgs_minimize(f, g, Vector::Ones(2), {});
  CHECK(res.line_search_failed);
  CHECK(res.x == Vector::Ones(2));
}
