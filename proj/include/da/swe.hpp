#pragma once

#include <da/core.hpp>
#include <da/model.hpp>

#include <cmath>
#include <string>

namespace da {

// Shallow-water equations on a beta-plane over a rectangular domain,
//
//   w_t = A(w) w_x + B(w) w_y + C(y) w,   w = (u, v, phi),
//
// with phi = 2 sqrt(g h) and Coriolis f = f_hat + beta (y - D/2). Written
// out per component:
//
//   u_t   = -(u u_x + (phi/2) phi_x) - v u_y + f v
//   v_t   = -u v_x - (v v_y + (phi/2) phi_y) - f u
//   phi_t = -((phi/2) u_x + u phi_x) - ((phi/2) v_y + v phi_y)
//
// Spatial derivatives are second-order centered in the interior, periodic
// in x. In y: v vanishes on both walls, u and phi satisfy zero-normal-
// gradient conditions realized by copying the adjacent interior row after
// every time step. Time integration is classical four-stage Runge-Kutta
// with a CFL-limited step; a negative dt integrates backwards.
//
// Fields are stacked [u; v; phi] with row-major (j*nx + i) layout per field,
// so the state dimension is 3*nx*ny.
class ShallowWaterModel final : public ModelInterface {
 public:
  struct Params {
    int nx = 15;
    int ny = 15;
    double length = 6.0;   // domain extent in x
    double depth = 6.0;    // domain extent in y
    double gravity = 10.0;
    double coriolis_f = 1.0;
    double coriolis_beta = 0.2;
    double dt = 0.1;
  };

  explicit ShallowWaterModel(Params p) : p_(p) {
    require(p_.nx >= 3 && p_.ny >= 3, "ShallowWaterModel: grid too small");
    require(p_.length > 0 && p_.depth > 0 && p_.gravity > 0,
            "ShallowWaterModel: domain and gravity must be positive");
    require(p_.dt != 0.0, "ShallowWaterModel: dt must be nonzero");
    dx_ = p_.length / p_.nx;            // periodic: nx cells
    dy_ = p_.depth / (p_.ny - 1);       // walls at j = 0 and j = ny-1
  }

  const Params& params() const { return p_; }
  Index state_dimension() const override {
    return static_cast<Index>(3) * p_.nx * p_.ny;
  }

  Index uidx(int i, int j) const { return static_cast<Index>(j) * p_.nx + i; }
  Index vidx(int i, int j) const {
    return static_cast<Index>(p_.nx) * p_.ny + uidx(i, j);
  }
  Index pidx(int i, int j) const {
    return static_cast<Index>(2) * p_.nx * p_.ny + uidx(i, j);
  }
  double ycoord(int j) const { return j * dy_; }

  // A(w) w_x + B(w) w_y + C(y) w at the current state; rejects phi <= 0.
  Vector rhs(const Vector& w) const {
    require_dim(w.size(), state_dimension(), "ShallowWaterModel::rhs");
    const int nx = p_.nx, ny = p_.ny;
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i)
        if (!(w[pidx(i, j)] > 0.0))
          throw DivergenceError(
              "ShallowWaterModel: phi must stay positive (cell " +
              std::to_string(i) + "," + std::to_string(j) + ")");

    Vector out(state_dimension());
    const double inv2dx = 1.0 / (2.0 * dx_);
    const double inv2dy = 1.0 / (2.0 * dy_);
    for (int j = 0; j < ny; ++j) {
      const bool wall = (j == 0 || j == ny - 1);
      const double f = p_.coriolis_f + p_.coriolis_beta * (ycoord(j) - p_.depth / 2.0);
      for (int i = 0; i < nx; ++i) {
        const int ip = (i + 1) % nx;
        const int im = (i + nx - 1) % nx;
        const double u = w[uidx(i, j)];
        const double v = w[vidx(i, j)];
        const double ph = w[pidx(i, j)];

        const double ux = (w[uidx(ip, j)] - w[uidx(im, j)]) * inv2dx;
        const double vx = (w[vidx(ip, j)] - w[vidx(im, j)]) * inv2dx;
        const double phx = (w[pidx(ip, j)] - w[pidx(im, j)]) * inv2dx;

        double uy, vy, phy;
        if (wall) {
          uy = 0.0;   // zero normal gradient for u and phi on the walls
          phy = 0.0;
          vy = (j == 0) ? (w[vidx(i, 1)] - w[vidx(i, 0)]) / dy_
                        : (w[vidx(i, ny - 1)] - w[vidx(i, ny - 2)]) / dy_;
        } else {
          uy = (w[uidx(i, j + 1)] - w[uidx(i, j - 1)]) * inv2dy;
          vy = (w[vidx(i, j + 1)] - w[vidx(i, j - 1)]) * inv2dy;
          phy = (w[pidx(i, j + 1)] - w[pidx(i, j - 1)]) * inv2dy;
        }

        out[uidx(i, j)] = -(u * ux + 0.5 * ph * phx) - v * uy + f * v;
        out[vidx(i, j)] = wall ? 0.0
                               : -(u * vx) - (v * vy + 0.5 * ph * phy) - f * u;
        out[pidx(i, j)] =
            -(0.5 * ph * ux + u * phx) - (0.5 * ph * vy + v * phy);
      }
    }
    return out;
  }

  Vector apply_boundary(Vector w) const {
    const int nx = p_.nx, ny = p_.ny;
    for (int i = 0; i < nx; ++i) {
      w[vidx(i, 0)] = 0.0;
      w[vidx(i, ny - 1)] = 0.0;
      w[uidx(i, 0)] = w[uidx(i, 1)];
      w[uidx(i, ny - 1)] = w[uidx(i, ny - 2)];
      w[pidx(i, 0)] = w[pidx(i, 1)];
      w[pidx(i, ny - 1)] = w[pidx(i, ny - 2)];
    }
    return w;
  }

  Vector step(const Vector& w) const override {
    const double dt = p_.dt;
    Vector k1 = rhs(w);
    Vector k2 = rhs(w + (0.5 * dt) * k1);
    Vector k3 = rhs(w + (0.5 * dt) * k2);
    Vector k4 = rhs(w + dt * k3);
    Vector out = w + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    return apply_boundary(std::move(out));
  }

  // Height field phi0 plus a Gaussian bump, with u, v in geostrophic balance
  // (u = -phi phi_y / (2 f), v = phi phi_x / (2 f)) evaluated with the same
  // centered stencils as the dynamics. Used to build twin-experiment truths.
  Vector balanced_state(double phi0, double bump_amplitude,
                        double bump_width) const {
    require(phi0 > 0.0, "balanced_state: phi0 must be positive");
    const int nx = p_.nx, ny = p_.ny;
    Vector w = Vector::Zero(state_dimension());
    const double xc = p_.length / 2.0, yc = p_.depth / 2.0;
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) {
        const double x = i * dx_;
        const double r2 = (x - xc) * (x - xc) + (ycoord(j) - yc) * (ycoord(j) - yc);
        w[pidx(i, j)] =
            phi0 + bump_amplitude * std::exp(-r2 / (2.0 * bump_width * bump_width));
      }
    }
    const double inv2dx = 1.0 / (2.0 * dx_);
    const double inv2dy = 1.0 / (2.0 * dy_);
    for (int j = 1; j < ny - 1; ++j) {
      const double f = p_.coriolis_f + p_.coriolis_beta * (ycoord(j) - yc);
      if (std::abs(f) < 1e-12) continue;
      for (int i = 0; i < nx; ++i) {
        const int ip = (i + 1) % nx;
        const int im = (i + nx - 1) % nx;
        const double ph = w[pidx(i, j)];
        const double phx = (w[pidx(ip, j)] - w[pidx(im, j)]) * inv2dx;
        const double phy = (w[pidx(i, j + 1)] - w[pidx(i, j - 1)]) * inv2dy;
        w[uidx(i, j)] = -ph * phy / (2.0 * f);
        w[vidx(i, j)] = ph * phx / (2.0 * f);
      }
    }
    return apply_boundary(std::move(w));
  }

 private:
  Params p_;
  double dx_;
  double dy_;
};

}  // namespace da
