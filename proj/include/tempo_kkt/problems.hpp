#pragma once

/// \file problems.hpp
/// \brief Van der Pol oscillator control, viscous Burgers control with P1
///        finite elements, and Neumann boundary control of the heat equation.

#include <cmath>
#include <cstddef>
#include <vector>

#include "timedisc.hpp"

namespace tempo_kkt {

struct VanDerPolConfig {
  double mu = 1.0;
  double alpha = 0.1;
  double t_final = 8.0;
  double data_mu = 0.01;
  Vector u_init{1.0, 1.0};
  double theta = 1.0;
};

namespace detail {

inline ProblemSpec vanderpol_dynamics(double mu, const Vector& u_init, double theta) {
  ProblemSpec p;
  p.name = "vanderpol";
  p.n_u = 2;
  p.n_z = 2;
  p.mass = SparseMatrix::identity(2);
  p.f_eval = [mu](CSpan u, CSpan z) {
    return Vector{u[1] + z[0], mu * (1.0 - u[0] * u[0]) * u[1] - u[0] + z[1]};
  };
  p.f_jac_u = [mu](CSpan u, CSpan) {
    return SparseMatrix::from_triplets(2, 2, {{0, 1, 1.0},
                                              {1, 0, -2.0 * mu * u[0] * u[1] - 1.0},
                                              {1, 1, mu * (1.0 - u[0] * u[0])}});
  };
  p.f_jac_z = [](CSpan, CSpan) { return SparseMatrix::identity(2); };
  p.f_hess = [mu](CSpan u, CSpan, CSpan lam, CSpan du, CSpan) {
    const double s = -2.0 * mu * lam[1];
    return CurvatureTerms{{s * (u[1] * du[0] + u[0] * du[1]), s * u[0] * du[0]}, {0.0, 0.0}};
  };
  p.u0 = u_init;
  p.theta = theta;
  p.state_weight = SparseMatrix::identity(2);
  p.control_weight = SparseMatrix::identity(2);
  return p;
}

}  // namespace detail

/// \brief Tracking data come from the uncontrolled oscillator with damping data_mu.
inline ProblemSpec build_vanderpol(const VanDerPolConfig& cfg, const TimeGrid& g) {
  if (!(cfg.alpha > 0.0) || !(cfg.t_final > 0.0) || cfg.u_init.size() != 2)
    throw ConfigError("vanderpol: need alpha > 0, t_final > 0 and a 2-vector initial state");
  ProblemSpec p = detail::vanderpol_dynamics(cfg.mu, cfg.u_init, cfg.theta);
  p.control_penalty = cfg.alpha;
  const ProblemSpec data = detail::vanderpol_dynamics(cfg.data_mu, cfg.u_init, cfg.theta);
  p.u_target = forward_solve(data, std::vector<Vector>(g.n_steps, Vector(2, 0.0)), g).states;
  return p;
}

struct BurgersConfig {
  double nu = 1e-2;
  double alpha = 0.1;
  std::size_t n_elems = 128;
  double t_final = 1.0;
  double theta = 0.5;
};

namespace detail {

// Tridiagonal matrix with constant diagonal d and off-diagonal o.
inline SparseMatrix tridiag(std::size_t n, double o, double d) {
  std::vector<Triplet> t;
  for (std::size_t i = 0; i < n; ++i) {
    t.push_back({i, i, d});
    if (i > 0) t.push_back({i, i - 1, o});
    if (i + 1 < n) t.push_back({i, i + 1, o});
  }
  return SparseMatrix::from_triplets(n, n, std::move(t));
}

// Galerkin convection N_i(u) = int u u_x phi_i over P1 elements with zero end values.
// On an element with end values (a, b): left node gets (b-a)(2a+b)/6, right node (b-a)(a+2b)/6.
inline Vector burgers_convection(CSpan u) {
  const std::size_t n = u.size(), ne = n + 1;
  Vector out(n, 0.0);
  for (std::size_t e = 0; e < ne; ++e) {
    const double a = e > 0 ? u[e - 1] : 0.0, b = e < n ? u[e] : 0.0;
    if (e > 0) out[e - 1] += (b - a) * (2.0 * a + b) / 6.0;
    if (e < n) out[e] += (b - a) * (a + 2.0 * b) / 6.0;
  }
  return out;
}

inline SparseMatrix burgers_convection_jacobian(CSpan u) {
  const std::size_t n = u.size(), ne = n + 1;
  std::vector<Triplet> t;
  for (std::size_t e = 0; e < ne; ++e) {
    const double a = e > 0 ? u[e - 1] : 0.0, b = e < n ? u[e] : 0.0;
    if (e > 0) {
      t.push_back({e - 1, e - 1, (b - 4.0 * a) / 6.0});
      if (e < n) t.push_back({e - 1, e, (a + 2.0 * b) / 6.0});
    }
    if (e < n) {
      if (e > 0) t.push_back({e, e - 1, (-2.0 * a - b) / 6.0});
      t.push_back({e, e, (4.0 * b - a) / 6.0});
    }
  }
  return SparseMatrix::from_triplets(n, n, std::move(t));
}

}  // namespace detail

/// \brief Interior-node P1 discretization on [0,1]; u0 and the target are the step 1 on (0, 1/2].
inline ProblemSpec build_burgers(const BurgersConfig& cfg, const TimeGrid& g) {
  if (!(cfg.nu > 0.0) || cfg.n_elems < 2 || !(cfg.alpha > 0.0))
    throw ConfigError("burgers: need nu > 0, alpha > 0 and n_elems >= 2");
  const std::size_t n = cfg.n_elems - 1;
  const double h = 1.0 / static_cast<double>(cfg.n_elems);
  ProblemSpec p;
  p.name = "burgers";
  p.n_u = n;
  p.n_z = n;
  p.mass = detail::tridiag(n, h / 6.0, 4.0 * h / 6.0);
  const SparseMatrix stiff = detail::tridiag(n, -1.0 / h, 2.0 / h);
  const SparseMatrix mass = p.mass;
  const double nu = cfg.nu;
  p.f_eval = [stiff, mass, nu](CSpan u, CSpan z) {
    Vector f = detail::burgers_convection(u);
    scale_inplace(-1.0, f);
    stiff.multiply_add(-nu, u, f);
    mass.multiply_add(1.0, z, f);
    return f;
  };
  p.f_jac_u = [stiff, nu](CSpan u, CSpan) {
    return add(-nu, stiff, -1.0, detail::burgers_convection_jacobian(u));
  };
  p.f_jac_z = [mass](CSpan, CSpan) { return mass; };
  // N is quadratic, so the second derivative of lam^T N applied to du is N'(du)^T lam.
  p.f_hess = [n](CSpan, CSpan, CSpan lam, CSpan du, CSpan) {
    Vector hu = detail::burgers_convection_jacobian(du).transpose_times(lam);
    scale_inplace(-1.0, hu);
    return CurvatureTerms{std::move(hu), Vector(n, 0.0)};
  };
  p.u0.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) p.u0[j] = static_cast<double>(j + 1) * h <= 0.5 ? 1.0 : 0.0;
  p.theta = cfg.theta;
  p.state_weight = p.mass;
  p.control_weight = p.mass;
  p.control_penalty = cfg.alpha;
  p.u_target.assign(g.n_steps, p.u0);
  return p;
}

/// Data used by the heat problem: zero source, zero right flux, zero initial
/// temperature and the target ud(x, t) = (t/T)(1 - x)^2, also used at t = T.
struct HeatNeumannConfig {
  double alpha1 = 1e3;
  double alpha2 = 0.0;
  std::size_t n_cells = 16;
  double t_final = 1.0;
  double theta = 1.0;
};

/// \brief P1 heat equation on [0,1] with all nodes free; the scalar control is the
/// heat flux entering at x = 0. Objective a1/2 |u - ud|^2 + a2/2 |u(T) - ud(T)|^2 + 1/2 |z|^2.
inline ProblemSpec build_heat_neumann(const HeatNeumannConfig& cfg, const TimeGrid& g) {
  if (cfg.alpha1 < 0.0 || cfg.alpha2 < 0.0 || (cfg.alpha1 == 0.0 && cfg.alpha2 == 0.0) || cfg.n_cells < 1)
    throw ConfigError("heat: need alpha1, alpha2 >= 0, not both zero, and n_cells >= 1");
  const std::size_t n = cfg.n_cells + 1;
  const double h = 1.0 / static_cast<double>(cfg.n_cells);
  ProblemSpec p;
  p.name = "heat";
  p.n_u = n;
  p.n_z = 1;
  SparseMatrix mass = detail::tridiag(n, h / 6.0, 4.0 * h / 6.0);
  SparseMatrix stiff = detail::tridiag(n, -1.0 / h, 2.0 / h);
  // End nodes carry half an element.
  mass = add(1.0, mass, 1.0, SparseMatrix::from_triplets(n, n, {{0, 0, -h / 3.0}, {n - 1, n - 1, -h / 3.0}}));
  stiff = add(1.0, stiff, 1.0, SparseMatrix::from_triplets(n, n, {{0, 0, -1.0 / h}, {n - 1, n - 1, -1.0 / h}}));
  p.mass = mass;
  const SparseMatrix bz = SparseMatrix::from_triplets(n, 1, {{0, 0, 1.0}});
  p.f_eval = [stiff](CSpan u, CSpan z) {
    Vector f(u.size(), 0.0);
    stiff.multiply_add(-1.0, u, f);
    f[0] += z[0];
    return f;
  };
  p.f_jac_u = [stiff](CSpan, CSpan) { return scaled(-1.0, stiff); };
  p.f_jac_z = [bz](CSpan, CSpan) { return bz; };
  p.u0.assign(n, 0.0);
  p.theta = cfg.theta;
  p.state_weight = mass;
  p.control_weight = SparseMatrix::identity(1);
  p.track_weight = cfg.alpha1;
  p.terminal_weight = cfg.alpha2;
  p.control_penalty = 1.0;
  p.u_target.resize(g.n_steps);
  for (std::size_t i = 0; i < g.n_steps; ++i) {
    Vector ud(n);
    const double s = g.node(i + 1) / g.t_final;
    for (std::size_t j = 0; j < n; ++j) {
      const double x = static_cast<double>(j) * h;
      ud[j] = s * (1.0 - x) * (1.0 - x);
    }
    p.u_target[i] = std::move(ud);
  }
  return p;
}

}  // namespace tempo_kkt
