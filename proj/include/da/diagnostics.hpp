#pragma once

#include <da/core.hpp>
#include <da/fourdvar.hpp>
#include <da/gaussian.hpp>
#include <da/pod.hpp>
#include <da/rom.hpp>

#include <cmath>
#include <utility>
#include <vector>

namespace da {

enum class MomentsVariant { full, reduced_rom, approx_rom };

struct PosteriorMoments {
  Vector mean;
  Matrix cov;
  MomentsVariant variant = MomentsVariant::full;
};

namespace detail {

inline void require_linear_window(const AssimilationWindow& win,
                                  const char* what) {
  if (!win.model->is_linear())
    throw Error(std::string(what) + ": closed-form moments require a linear "
                                    "model");
  for (const auto& o : win.observations.all())
    if (!o.op->is_linear())
      throw Error(std::string(what) + ": closed-form moments require linear "
                                      "observation operators");
}

// Eigendecomposition-backed pseudo-inverse and pseudo-determinant with a
// relative eigenvalue cutoff.
struct SpectralPseudo {
  Matrix pinv;
  double log_pdet = 0.0;
  Index rank = 0;
};

inline SpectralPseudo spectral_pseudo(const Matrix& sym,
                                      double rel_cutoff = 1e-12) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(sym));
  require(es.info() == Eigen::Success, "spectral_pseudo: eigensolver failed");
  const Vector& ev = es.eigenvalues();
  double cutoff = rel_cutoff * ev.cwiseAbs().maxCoeff();
  SpectralPseudo out;
  out.pinv = Matrix::Zero(sym.rows(), sym.cols());
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev[i] > cutoff) {
      out.pinv += es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose() /
                  ev[i];
      out.log_pdet += std::log(ev[i]);
      ++out.rank;
    }
  }
  return out;
}

}  // namespace detail

// Closed-form Gaussian posterior of a linear window:
//   A0⁻¹ = B0⁻¹ + Σ_k M_{0,k}ᵀ Hᵀ R⁻¹ H M_{0,k}
//   x0a  = A0 (B0⁻¹ xb + Σ_k M_{0,k}ᵀ Hᵀ R⁻¹ y_k)
inline PosteriorMoments linear_posterior_moments(const AssimilationWindow& win) {
  detail::require_linear_window(win, "linear_posterior_moments");
  const Index n = win.state_dim();
  Matrix m_interval = win.model->interval_jacobian(Vector::Zero(n),
                                                   win.steps_per_interval);
  Matrix a_inv = win.prior.cov.inverse_matrix();
  Vector rhs = win.prior.cov.inverse_apply(win.background());
  Matrix mk = Matrix::Identity(n, n);
  for (int k = 0; k <= win.n_intervals(); ++k) {
    if (k > 0) mk = m_interval * mk;
    for (const auto& o : win.observations.all()) {
      if (o.time_index != k) continue;
      Matrix h = o.op->jacobian(Vector::Zero(n)) * mk;
      Matrix rij = o.noise.inverse_matrix();
      a_inv += h.transpose() * rij * h;
      rhs += h.transpose() * (rij * o.y);
    }
  }
  a_inv = symmetrized(a_inv);
  Eigen::LLT<Matrix> llt(a_inv);
  require(llt.info() == Eigen::Success,
          "linear_posterior_moments: information matrix not SPD");
  PosteriorMoments out;
  out.cov = symmetrized(llt.solve(Matrix::Identity(n, n)));
  out.mean = llt.solve(rhs);
  out.variant = MomentsVariant::full;
  return out;
}

// Moments of the full-space target whose likelihood is routed through the
// projected dynamics (P M P)^k, P = V Vᵀ.
inline PosteriorMoments approx_posterior_moments(const AssimilationWindow& win,
                                                 const PodBasis& basis) {
  detail::require_linear_window(win, "approx_posterior_moments");
  const Index n = win.state_dim();
  Matrix m_interval = win.model->interval_jacobian(Vector::Zero(n),
                                                   win.steps_per_interval);
  Matrix p = basis.projector();
  Matrix pmp = p * m_interval * p;
  Matrix a_inv = win.prior.cov.inverse_matrix();
  Vector rhs = win.prior.cov.inverse_apply(win.background());
  Matrix pk = Matrix::Identity(n, n);
  for (int k = 0; k <= win.n_intervals(); ++k) {
    if (k > 0) pk = pmp * pk;
    for (const auto& o : win.observations.all()) {
      if (o.time_index != k) continue;
      Matrix h = o.op->jacobian(Vector::Zero(n)) * pk;
      Matrix rij = o.noise.inverse_matrix();
      a_inv += h.transpose() * rij * h;
      rhs += h.transpose() * (rij * o.y);
    }
  }
  a_inv = symmetrized(a_inv);
  Eigen::LLT<Matrix> llt(a_inv);
  require(llt.info() == Eigen::Success,
          "approx_posterior_moments: information matrix not SPD");
  PosteriorMoments out;
  out.cov = symmetrized(llt.solve(Matrix::Identity(n, n)));
  out.mean = llt.solve(rhs);
  out.variant = MomentsVariant::approx_rom;
  return out;
}

// Moments of the reduced-space target: projected prior plus observations of
// lifted reduced trajectories (all linear).
inline PosteriorMoments reduced_posterior_moments(const AssimilationWindow& win,
                                                  const PodBasis& basis) {
  detail::require_linear_window(win, "reduced_posterior_moments");
  const Index n = win.state_dim();
  const Index nr = basis.reduced_dim();
  Matrix m_interval = win.model->interval_jacobian(Vector::Zero(n),
                                                   win.steps_per_interval);
  Matrix mr = basis.matrix().transpose() * m_interval * basis.matrix();
  Matrix b_red = symmetrized(basis.matrix().transpose() *
                             win.prior.cov.matrix() * basis.matrix());
  Eigen::LLT<Matrix> b_llt(b_red);
  require(b_llt.info() == Eigen::Success,
          "reduced_posterior_moments: projected prior not SPD");
  Matrix a_inv = b_llt.solve(Matrix::Identity(nr, nr));
  Vector rhs = b_llt.solve(basis.restrict_state(win.background()));
  Matrix mrk = Matrix::Identity(nr, nr);
  for (int k = 0; k <= win.n_intervals(); ++k) {
    if (k > 0) mrk = mr * mrk;
    for (const auto& o : win.observations.all()) {
      if (o.time_index != k) continue;
      Matrix h = o.op->jacobian(Vector::Zero(n)) * basis.matrix() * mrk;
      Matrix rij = o.noise.inverse_matrix();
      a_inv += h.transpose() * rij * h;
      rhs += h.transpose() * (rij * o.y);
    }
  }
  a_inv = symmetrized(a_inv);
  Eigen::LLT<Matrix> llt(a_inv);
  require(llt.info() == Eigen::Success,
          "reduced_posterior_moments: information matrix not SPD");
  PosteriorMoments out;
  out.cov = symmetrized(llt.solve(Matrix::Identity(nr, nr)));
  out.mean = llt.solve(rhs);
  out.variant = MomentsVariant::reduced_rom;
  return out;
}

// Both sides of the projected-quadratic-form identity
//   ||P x0 - P x0a||²_{(P A0 P)†} = ||Vᵀ x0 - Vᵀ x0a||²_{(Vᵀ A0 V)⁻¹}.
inline std::pair<double, double> projected_pdf_quadform_check(
    const Matrix& a0, const PodBasis& basis, const Vector& x0,
    const Vector& x0a) {
  const Matrix& v = basis.matrix();
  Matrix p = basis.projector();
  Matrix a_proj = symmetrized(p * a0 * p);
  auto pseudo = detail::spectral_pseudo(a_proj);
  Vector dp = p * (x0 - x0a);
  double lhs = dp.dot(pseudo.pinv * dp);

  Matrix a_red = symmetrized(v.transpose() * a0 * v);
  Eigen::LLT<Matrix> llt(a_red);
  require(llt.info() == Eigen::Success,
          "projected_pdf_quadform_check: Vᵀ A0 V not SPD");
  Vector dr = v.transpose() * (x0 - x0a);
  double rhs = dr.dot(llt.solve(dr));
  return {lhs, rhs};
}

// Divergence between the rank-deficient projected posterior and the full
// posterior:
//   1/2 [ (Nvar-Nred) ln 2π + ln(det A0 / det*(P A0 P))
//         + ||P x0a - x0a||²_{A0⁻¹} + tr((A0⁻¹ - (P A0 P)†) P A0 P) ].
inline double kl_projected_vs_full(const Matrix& a0, const Vector& x0a,
                                   const PodBasis& basis) {
  const Index n = a0.rows();
  const Index nr = basis.reduced_dim();
  Matrix p = basis.projector();
  Matrix a_proj = symmetrized(p * a0 * p);
  auto pseudo = detail::spectral_pseudo(a_proj);

  CovarianceOperator a_full{symmetrized(a0)};
  double term_dim = (static_cast<double>(n) - static_cast<double>(nr)) *
                    std::log(2.0 * M_PI);
  double term_det = a_full.log_det() - pseudo.log_pdet;
  Vector dm = p * x0a - x0a;
  double term_mean = dm.dot(a_full.inverse_apply(dm));
  Matrix a_inv = a_full.inverse_matrix();
  double term_trace = ((a_inv - pseudo.pinv) * a_proj).trace();
  return 0.5 * (term_dim + term_det + term_mean + term_trace);
}

// Observation terms of the full and reduced-model objectives; their
// difference drives both the likelihood ratio and the divergence estimator
// below.
inline double obs_term_full(const AssimilationWindow& win, const Vector& x0) {
  Vector x = x0;
  double j = detail::obs_misfit(win, 0, x);
  for (int k = 1; k <= win.n_intervals(); ++k) {
    x = win.model->propagate(x, win.steps_per_interval);
    j += detail::obs_misfit(win, k, x);
  }
  return j;
}

inline double obs_term_approx(const AssimilationWindow& win,
                              const PodBasis& basis, const Vector& x0) {
  ReducedModel rm(win.model, basis);
  double j = detail::obs_misfit(win, 0, x0);
  Vector xr = basis.restrict_state(x0);
  for (int k = 1; k <= win.n_intervals(); ++k) {
    xr = rm.interval(xr, win.steps_per_interval);
    j += detail::obs_misfit(win, k, basis.lift(xr));
  }
  return j;
}

// π̃(x0)/π(x0) up to the shared normalization: exp(J_obs - Ĵ_obs).
inline double likelihood_ratio_relation(const AssimilationWindow& win,
                                        const PodBasis& basis,
                                        const Vector& x0) {
  return std::exp(obs_term_full(win, x0) - obs_term_approx(win, basis, x0));
}

// Monte-Carlo estimate of D_KL(π̃ || π) from draws of the approximate
// target: the mean of J_obs - Ĵ_obs over the samples.
inline double kl_divergence_estimate(const AssimilationWindow& win,
                                     const PodBasis& basis,
                                     const std::vector<Vector>& samples) {
  require(!samples.empty(), "kl_divergence_estimate: no samples");
  double acc = 0.0;
  for (const auto& x : samples)
    acc += obs_term_full(win, x) - obs_term_approx(win, basis, x);
  return acc / static_cast<double>(samples.size());
}

// Acklam's rational approximation of the standard normal quantile.
inline double normal_quantile(double prob) {
  require(prob > 0.0 && prob < 1.0, "normal_quantile: p must be in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double p_low = 0.02425;
  double q, r;
  if (prob < p_low) {
    q = std::sqrt(-2.0 * std::log(prob));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (prob <= 1.0 - p_low) {
    q = prob - 0.5;
    r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
           q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }
  q = std::sqrt(-2.0 * std::log(1.0 - prob));
  return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
         ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
}

struct CovTestReport {
  double t_mn = 0.0;
  double theta_hat = 0.0;
  double t_star = 0.0;
  int n1 = 0;
  int n2 = 0;
  double alpha = 0.01;
  bool reject = false;
};

// Two-sample covariance-equality statistic for high-dimensional settings;
// t* is asymptotically standard normal under equality. The two-sided test
// rejects when |t*| exceeds the alpha/2 normal quantile. The leading terms
// carry the bias-correction factors (1 - (n_i - 2)/eta_i), which make t_mn
// an estimate of tr((Sigma_1 - Sigma_2)^2).
inline CovTestReport schott_statistic(const Matrix& s1, const Matrix& s2,
                                      int n1, int n2, double alpha = 0.01) {
  require_dim(s2.rows(), s1.rows(), "schott_statistic");
  require(s1.rows() == s1.cols() && s2.rows() == s2.cols(),
          "schott_statistic: covariance matrices must be square");
  require(n1 >= 3 && n2 >= 3, "schott_statistic: need n1, n2 >= 3");

  const double eta1 = static_cast<double>(n1 + 2) * (n1 - 1);
  const double eta2 = static_cast<double>(n2 + 2) * (n2 - 1);
  const double n = n1 + n2;
  const double tr_s1sq = (s1 * s1).trace();
  const double tr_s2sq = (s2 * s2).trace();
  const double tr_s1s2 = (s1 * s2).trace();
  const double tr_s1 = s1.trace();
  const double tr_s2 = s2.trace();

  double t_mn = (1.0 - (n1 - 2) / eta1) * tr_s1sq +
                (1.0 - (n2 - 2) / eta2) * tr_s2sq - 2.0 * tr_s1s2 -
                (n1 / eta1) * tr_s1 * tr_s1 - (n2 / eta2) * tr_s2 * tr_s2;

  Matrix pooled = (n1 / n) * s1 + (n2 / n) * s2;
  double a = n * n / ((n + 2.0) * (n - 1.0)) *
             ((pooled * pooled).trace() - pooled.trace() * pooled.trace() / n);
  double theta = std::sqrt(4.0 * a * a * std::pow((n1 + n2) / (static_cast<double>(n1) * n2), 2));
  if (!(theta > 0.0))
    throw Error("schott_statistic: degenerate input, theta_hat = 0");

  CovTestReport rep;
  rep.t_mn = t_mn;
  rep.theta_hat = theta;
  rep.t_star = t_mn / theta;
  rep.n1 = n1;
  rep.n2 = n2;
  rep.alpha = alpha;
  rep.reject = std::abs(rep.t_star) > normal_quantile(1.0 - alpha / 2.0);
  return rep;
}

// Sample mean and unbiased covariance (divisor N-1).
inline PosteriorMoments ensemble_moments(const std::vector<Vector>& samples) {
  require(samples.size() >= 2, "ensemble_moments: need at least 2 samples");
  const Index n = samples.front().size();
  Vector mean = Vector::Zero(n);
  for (const auto& s : samples) {
    require_dim(s.size(), n, "ensemble_moments");
    mean += s;
  }
  mean /= static_cast<double>(samples.size());
  Matrix cov = Matrix::Zero(n, n);
  for (const auto& s : samples) {
    Vector d = s - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(samples.size() - 1);
  PosteriorMoments out;
  out.mean = std::move(mean);
  out.cov = symmetrized(cov);
  return out;
}

// ||x_k^analysis - x_k^truth||_2 / sqrt(Nvar) along propagated trajectories,
// evaluated at interval endpoints k = 0..n_intervals.
inline std::vector<double> rmse_series(const Vector& analysis_x0,
                                       const Vector& truth_x0,
                                       const ModelInterface& model,
                                       int n_intervals,
                                       int steps_per_interval) {
  require_dim(truth_x0.size(), analysis_x0.size(), "rmse_series");
  const double root_n = std::sqrt(static_cast<double>(analysis_x0.size()));
  std::vector<double> out;
  out.reserve(n_intervals + 1);
  Vector xa = analysis_x0;
  Vector xt = truth_x0;
  out.push_back((xa - xt).norm() / root_n);
  for (int k = 1; k <= n_intervals; ++k) {
    xa = model.propagate(xa, steps_per_interval);
    xt = model.propagate(xt, steps_per_interval);
    out.push_back((xa - xt).norm() / root_n);
  }
  return out;
}

}  // namespace da
