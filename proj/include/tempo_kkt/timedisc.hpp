#pragma once

/// \file timedisc.hpp
/// \brief Uniform time grids, theta-method stage residuals and Jacobians,
///        nonlinear forward stepping and the tracking objective.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "linalg.hpp"

namespace tempo_kkt {

struct TimeGrid {
  double t_final = 1.0;
  std::size_t n_steps = 1;
  double dt = 1.0;

  static TimeGrid uniform(double t_final, std::size_t n_steps) {
    if (n_steps == 0) throw Error("time grid needs at least one step");
    if (!(t_final > 0.0)) throw Error("time grid needs a positive final time");
    return {t_final, n_steps, t_final / static_cast<double>(n_steps)};
  }
  double node(std::size_t i) const { return static_cast<double>(i) * dt; }
};

/// \brief Second derivative of lambda^T F at (u, z) applied to (du, dz).
struct CurvatureTerms {
  Vector hu;
  Vector hz;
};

/// \brief Semi-discrete dynamics M u' = F(u, z) with a tracking objective
///   J(u, z) = sum_i dt [a/2 |u_i - ud_i|_W^2 + alpha/2 |z_i - zd_i|_Wz^2] + aT/2 |u_N - udT|_W^2.
struct ProblemSpec {
  std::string name;
  std::size_t n_u = 0;
  std::size_t n_z = 0;
  SparseMatrix mass;
  std::function<Vector(CSpan, CSpan)> f_eval;
  std::function<SparseMatrix(CSpan, CSpan)> f_jac_u;
  std::function<SparseMatrix(CSpan, CSpan)> f_jac_z;
  /// Optional; (u, z, lambda, du, dz) -> second-derivative contraction.
  std::function<CurvatureTerms(CSpan, CSpan, CSpan, CSpan, CSpan)> f_hess;
  Vector u0;
  double theta = 1.0;

  SparseMatrix state_weight;    ///< W for the state terms
  SparseMatrix control_weight;  ///< W_z for the control terms
  double track_weight = 1.0;    ///< a
  double control_penalty = 0.1; ///< alpha
  double terminal_weight = 0.0; ///< aT
  std::vector<Vector> u_target;  ///< ud_1..ud_N on the grid the spec was built for
  std::vector<Vector> z_target;  ///< zd_1..zd_N, empty means zero
  Vector u_terminal_target;      ///< udT, empty means ud_N
};

/// \brief States u_1..u_N and controls z_1..z_N.
struct Trajectory {
  std::vector<Vector> states;
  std::vector<Vector> controls;
};

inline void check_stage_dims(const ProblemSpec& p, CSpan v, CSpan u, CSpan z) {
  require_dims(v.size() == p.n_u && u.size() == p.n_u && z.size() == p.n_z,
               "stage: vector dimension does not match the problem");
}

/// \brief c1 = -M u_next + M v + dt*theta*F(u_next, z) + dt*(1-theta)*F(v, z).
inline Vector theta_residual(const ProblemSpec& p, CSpan v, CSpan u_next, CSpan z_next, double dt) {
  check_stage_dims(p, v, u_next, z_next);
  Vector r(p.n_u, 0.0);
  p.mass.multiply_add(-1.0, u_next, r);
  p.mass.multiply_add(1.0, v, r);
  if (p.theta != 0.0) axpy_inplace(dt * p.theta, p.f_eval(u_next, z_next), r);
  if (p.theta != 1.0) axpy_inplace(dt * (1.0 - p.theta), p.f_eval(v, z_next), r);
  if (!all_finite(r)) throw NonFiniteValue("theta_residual: non-finite value");
  return r;
}

/// \brief Jacobians of theta_residual with respect to u_next (K), v (C) and z_next (B).
struct StageJacobians {
  SparseMatrix k;
  SparseMatrix c;
  SparseMatrix b;
};

inline StageJacobians stage_blocks(const ProblemSpec& p, CSpan v, CSpan u_next, CSpan z_next,
                                   double dt) {
  check_stage_dims(p, v, u_next, z_next);
  const double th = p.theta;
  StageJacobians s;
  s.k = th != 0.0 ? add(-1.0, p.mass, dt * th, p.f_jac_u(u_next, z_next)) : scaled(-1.0, p.mass);
  s.c = th != 1.0 ? add(1.0, p.mass, dt * (1.0 - th), p.f_jac_u(v, z_next)) : p.mass;
  if (th == 1.0) {
    s.b = scaled(dt, p.f_jac_z(u_next, z_next));
  } else if (th == 0.0) {
    s.b = scaled(dt, p.f_jac_z(v, z_next));
  } else {
    s.b = add(dt * th, p.f_jac_z(u_next, z_next), dt * (1.0 - th), p.f_jac_z(v, z_next));
  }
  return s;
}

/// \brief Second derivative of lam^T c1 applied to (dv, du_next, dz_next).
struct StageCurvature {
  Vector hv;
  Vector hu;
  Vector hz;
};

inline StageCurvature stage_curvature(const ProblemSpec& p, CSpan v, CSpan u_next, CSpan z_next,
                                      double dt, CSpan lam, CSpan dv, CSpan du, CSpan dz) {
  StageCurvature out{Vector(p.n_u, 0.0), Vector(p.n_u, 0.0), Vector(p.n_z, 0.0)};
  if (!p.f_hess) return out;
  const double th = p.theta;
  if (th != 0.0) {
    CurvatureTerms a = p.f_hess(u_next, z_next, lam, du, dz);
    axpy_inplace(dt * th, a.hu, out.hu);
    axpy_inplace(dt * th, a.hz, out.hz);
  }
  if (th != 1.0) {
    CurvatureTerms a = p.f_hess(v, z_next, lam, dv, dz);
    axpy_inplace(dt * (1.0 - th), a.hu, out.hv);
    axpy_inplace(dt * (1.0 - th), a.hz, out.hz);
  }
  return out;
}

inline constexpr std::size_t kDefaultNewtonIters = 25;

/// \brief Marches the theta-method from u0 with Newton on each implicit step.
inline Trajectory forward_solve(const ProblemSpec& p, const std::vector<Vector>& z, const TimeGrid& g,
                                double newton_tol = 1e-12, std::size_t max_newton = kDefaultNewtonIters) {
  require_dims(z.size() == g.n_steps, "forward_solve: control sequence length mismatch");
  Trajectory traj{{}, z};
  traj.states.reserve(g.n_steps);
  Vector prev = p.u0;
  for (std::size_t i = 0; i < g.n_steps; ++i) {
    Vector u = prev;
    Vector mu(p.n_u, 0.0);
    p.mass.multiply_add(1.0, prev, mu);
    const double tol = newton_tol * norm2(mu) + newton_tol;
    std::size_t it = 0;
    for (;; ++it) {
      Vector r = theta_residual(p, prev, u, z[i], g.dt);
      if (norm2(r) <= tol) break;
      if (it >= max_newton)
        throw NewtonDivergence("forward_solve: Newton did not converge at step " + std::to_string(i + 1));
      StageJacobians j = stage_blocks(p, prev, u, z[i], g.dt);
      BandedLu lu(j.k);
      lu.solve_inplace(r);
      axpy_inplace(-1.0, r, u);
      if (!all_finite(u)) throw NewtonDivergence("forward_solve: non-finite Newton iterate");
    }
    traj.states.push_back(u);
    prev = std::move(u);
  }
  return traj;
}

struct ObjectiveEval {
  double value = 0.0;
  std::vector<Vector> grad_u;
  std::vector<Vector> grad_v;
  std::vector<Vector> grad_z;
};

/// \brief phi(v, u, z) = J(v, z)/2 + J(u, z)/2 on a grid of step dt, rectangle rule over nodes 1..N.
inline ObjectiveEval objective_and_gradient(const ProblemSpec& p, const Trajectory& traj,
                                            const std::vector<Vector>& v, double dt) {
  const std::size_t n = traj.states.size();
  require_dims(traj.controls.size() == n && v.size() == n && p.u_target.size() == n,
               "objective: sequence length mismatch");
  ObjectiveEval out;
  out.grad_u.assign(n, Vector(p.n_u, 0.0));
  out.grad_v.assign(n, Vector(p.n_u, 0.0));
  out.grad_z.assign(n, Vector(p.n_z, 0.0));
  auto track = [&](const Vector& x, std::size_t i, Vector& grad) {
    const Vector d = axpy(-1.0, p.u_target[i], x);
    Vector wd = p.state_weight * d;
    double w = 0.5 * dt * p.track_weight;
    if (i + 1 == n && p.terminal_weight != 0.0) {
      const Vector dterm = p.u_terminal_target.empty() ? d : axpy(-1.0, p.u_terminal_target, x);
      const Vector wdt = p.state_weight * dterm;
      out.value += 0.25 * p.terminal_weight * dot(dterm, wdt);
      axpy_inplace(0.5 * p.terminal_weight, wdt, grad);
    }
    out.value += 0.5 * w * dot(d, wd);
    axpy_inplace(w, wd, grad);
  };
  for (std::size_t i = 0; i < n; ++i) {
    track(traj.states[i], i, out.grad_u[i]);
    track(v[i], i, out.grad_v[i]);
    const Vector dz = p.z_target.empty() ? traj.controls[i] : axpy(-1.0, p.z_target[i], traj.controls[i]);
    const Vector wz = p.control_weight * dz;
    out.value += 0.5 * dt * p.control_penalty * dot(dz, wz);
    axpy_inplace(dt * p.control_penalty, wz, out.grad_z[i]);
  }
  return out;
}

}  // namespace tempo_kkt
