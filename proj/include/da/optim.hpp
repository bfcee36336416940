#pragma once

#include <da/core.hpp>

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <vector>

namespace da {

struct LbfgsOptions {
  double gtol_rel = 1e-6;   // stop when ||g|| <= gtol_rel * ||g0||
  double gtol_abs = 1e-10;  // ... or below this floor outright
  int max_iters = 200;
  int memory = 10;
  double armijo_c1 = 1e-4;
  double backtrack_factor = 0.5;
  int max_backtracks = 40;
};

struct LbfgsTraceEntry {
  int iter;
  double cost;
  double grad_norm;
};

struct LbfgsResult {
  Vector x;
  double cost = 0.0;
  Vector grad;
  std::vector<LbfgsTraceEntry> trace;
  bool converged = false;
  bool line_search_failed = false;
  int iterations = 0;
};

// Limited-memory BFGS with Armijo backtracking. On a failed line search the
// best iterate so far is returned with the warning flag set.
inline LbfgsResult lbfgs_minimize(
    const std::function<double(const Vector&)>& f,
    const std::function<Vector(const Vector&)>& g, Vector x0,
    const LbfgsOptions& opts = {}) {
  LbfgsResult res;
  Vector x = std::move(x0);
  double fx = f(x);
  Vector gx = g(x);
  const double g0_norm = gx.norm();
  const double gtol = std::max(opts.gtol_abs, opts.gtol_rel * g0_norm);
  res.trace.push_back({0, fx, g0_norm});

  struct Pair {
    Vector s, y;
    double rho;
  };
  std::deque<Pair> mem;

  int iter = 0;
  while (iter < opts.max_iters && gx.norm() > gtol) {
    // Two-loop recursion.
    Vector q = gx;
    std::vector<double> alpha(mem.size());
    for (int i = static_cast<int>(mem.size()) - 1; i >= 0; --i) {
      alpha[i] = mem[i].rho * mem[i].s.dot(q);
      q -= alpha[i] * mem[i].y;
    }
    if (!mem.empty()) {
      const Pair& last = mem.back();
      double gamma = last.s.dot(last.y) / last.y.dot(last.y);
      q *= gamma;
    }
    for (std::size_t i = 0; i < mem.size(); ++i) {
      double beta = mem[i].rho * mem[i].y.dot(q);
      q += (alpha[i] - beta) * mem[i].s;
    }
    Vector dir = -q;
    double slope = gx.dot(dir);
    if (!(slope < 0.0)) {
      dir = -gx;  // fall back to steepest descent
      slope = gx.dot(dir);
      if (!(slope < 0.0)) break;  // gradient is zero
    }

    double t = 1.0;
    double f_new = 0.0;
    Vector x_new;
    bool ok = false;
    for (int bt = 0; bt < opts.max_backtracks; ++bt) {
      x_new = x + t * dir;
      // A trial point outside the model's valid domain counts as +inf and
      // simply shortens the step.
      try {
        f_new = f(x_new);
      } catch (const Error&) {
        f_new = std::numeric_limits<double>::infinity();
      }
      if (std::isfinite(f_new) && f_new <= fx + opts.armijo_c1 * t * slope) {
        ok = true;
        break;
      }
      t *= opts.backtrack_factor;
    }
    if (!ok) {
      res.line_search_failed = true;
      break;
    }

    Vector g_new = g(x_new);
    Vector s = x_new - x;
    Vector yv = g_new - gx;
    double sy = s.dot(yv);
    if (sy > 1e-14 * s.norm() * yv.norm()) {
      mem.push_back({s, yv, 1.0 / sy});
      if (static_cast<int>(mem.size()) > opts.memory) mem.pop_front();
    }
    x = std::move(x_new);
    fx = f_new;
    gx = std::move(g_new);
    ++iter;
    res.trace.push_back({iter, fx, gx.norm()});
  }

  res.x = std::move(x);
  res.cost = fx;
  res.grad = std::move(gx);
  res.iterations = iter;
  res.converged = res.grad.norm() <= gtol;
  return res;
}

}  // namespace da
