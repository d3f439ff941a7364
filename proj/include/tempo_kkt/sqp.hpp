#pragma once

/// \file sqp.hpp
/// \brief Composite-step trust-region SQP: Cauchy point, quasi-normal step,
///        projected-CG tangential step, multiplier update and step acceptance,
///        with every augmented system solved by a preconditioned Krylov method.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "kkt.hpp"
#include "krylov.hpp"
#include "multigrid.hpp"
#include "smoothers.hpp"
#include "timedisc.hpp"

namespace tempo_kkt {

enum class HessianMode { exact_lagrangian, gauss_newton };

/// Preconditioner for the augmented systems: a multigrid cycle, one sweep of a
/// block smoother, or nothing.
enum class PrecondKind { multigrid, jacobi, fgs, bgs, sgs, none };
enum class KrylovKind { fgmres, gmres };

inline const char* to_string(PrecondKind k) {
  switch (k) {
    case PrecondKind::multigrid: return "mg";
    case PrecondKind::jacobi: return "jacobi";
    case PrecondKind::fgs: return "fgs";
    case PrecondKind::bgs: return "bgs";
    case PrecondKind::sgs: return "sgs";
    case PrecondKind::none: return "none";
  }
  return "?";
}

struct SolverConfig {
  PrecondKind prec = PrecondKind::multigrid;
  KrylovKind krylov = KrylovKind::fgmres;
  MgConfig mg;
  std::size_t coarsest_steps = 16;  ///< multigrid depth: coarsen while the grid keeps at least this many steps
  std::size_t levels = 0;           ///< explicit level count; 0 derives it from coarsest_steps
  std::size_t max_iters = 401;
  /// Cap on the Krylov basis storage; the restart length is derived from it.
  std::size_t krylov_memory_bytes = std::size_t{1} << 30;
};

struct SqpConfig {
  double tau = 1e-2;
  double zeta = 0.8;
  double gtol = 1e-6;
  double ctol = 1e-6;
  std::size_t max_iters = 50;
  double delta0 = 10.0;
  double eta_accept = 1e-4;
  double eta_expand = 0.75;
  HessianMode hessian = HessianMode::exact_lagrangian;
  double cg_rel_tol = 1e-2;
  std::size_t cg_max_iters = 200;
  double penalty0 = 1.0;
  double penalty_margin = 1e-2;
  std::ostream* log = nullptr;  ///< one line per iteration when set
  /// Called with the starting point and with every accepted point.
  std::function<void(const Iterate&)> on_point;
};

/// \brief Counters of one SQP iteration.
struct StepStats {
  std::size_t cg_iters = 0;
  std::size_t ls_calls = 0;
  std::size_t ls_iters_total = 0;
  std::size_t coarse_calls = 0;  ///< coarse-grid solves inside multigrid cycles
  std::size_t coarse_iters = 0;
  bool accepted = false;

  double ls_average() const {
    return ls_calls ? static_cast<double>(ls_iters_total) / static_cast<double>(ls_calls) : 0.0;
  }
};

struct SqpState {
  Iterate x;
  Vector multipliers;  ///< KKT layout; only the lambda and mu slots are used
  double trust_radius = 0.0;
  double penalty = 0.0;
  std::size_t iteration = 0;
  double optimality = 0.0;   ///< ||grad f + c_x^T y|| in the dual norm of Q
  double feasibility = 0.0;  ///< ||c||
};

struct SqpResult {
  SqpState state;
  std::vector<StepStats> steps;
  bool converged = false;

  std::size_t total_cg() const {
    std::size_t s = 0;
    for (const auto& t : steps) s += t.cg_iters;
    return s;
  }
  std::size_t total_ls_calls() const {
    std::size_t s = 0;
    for (const auto& t : steps) s += t.ls_calls;
    return s;
  }
  std::size_t total_ls_iters() const {
    std::size_t s = 0;
    for (const auto& t : steps) s += t.ls_iters_total;
    return s;
  }
  double coarse_average() const {
    std::size_t calls = 0, iters = 0;
    for (const auto& t : steps) {
      calls += t.coarse_calls;
      iters += t.coarse_iters;
    }
    return calls ? static_cast<double>(iters) / static_cast<double>(calls) : 0.0;
  }
  double ls_average() const {
    std::size_t calls = 0, iters = 0;
    for (const auto& t : steps) {
      calls += t.ls_calls;
      iters += t.ls_iters_total;
    }
    return calls ? static_cast<double>(iters) / static_cast<double>(calls) : 0.0;
  }
};

/// \brief Inexactness budget for an augmented solve:
/// tau * min(|b1| + |b2|, max(|y1|, delta)), never below tau * 1e-3 * (|b1| + |b2|).
enum class BudgetKind { qn, proj, mult };

inline double tolerance_budget(BudgetKind, double y1, double b1, double b2, double delta, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tolerance_budget: tau must lie in (0,1)");
  const double rhs = b1 + b2;
  return std::max(tau * std::min(rhs, std::max(y1, delta)), tau * 1e-3 * rhs);
}

/// \brief Step along -g (g = Q^{-1} c_x^T c, the steepest descent direction of
/// |c_x n + c|^2 / 2 in the Q inner product) to the 1-D minimizer, capped at the
/// radius. `cx_g` is c_x g and `g_norm_q` is ||g||_Q; the result is the factor alpha.
inline double cauchy_factor(double g_norm_q, double cx_g_norm, double radius) {
  if (!(radius > 0.0)) throw Error("cauchy point: radius must be positive");
  if (g_norm_q == 0.0) return 0.0;
  const double cap = radius / g_norm_q;
  if (cx_g_norm == 0.0) return cap;
  return std::min(g_norm_q * g_norm_q / (cx_g_norm * cx_g_norm), cap);
}

/// \brief Cauchy point for a dense Jacobian and the Euclidean inner product.
inline Vector cauchy_point(const DenseMatrix& jac, CSpan c, double radius) {
  require_dims(jac.rows() == c.size(), "cauchy_point: dimension mismatch");
  Vector g(jac.cols(), 0.0);
  for (std::size_t i = 0; i < jac.rows(); ++i)
    for (std::size_t j = 0; j < jac.cols(); ++j) g[j] += jac(i, j) * c[i];
  const double alpha = cauchy_factor(norm2(g), norm2(matvec(jac, g)), radius);
  scale_inplace(-alpha, g);
  return g;
}

namespace detail {

inline std::size_t derived_restart(std::size_t dim, std::size_t max_iters, std::size_t bytes, bool flexible) {
  const std::size_t per_vec = dim * sizeof(double) * (flexible ? 2 : 1);
  const std::size_t fit = per_vec ? bytes / per_vec : max_iters;
  return std::clamp<std::size_t>(fit, 10, std::max<std::size_t>(max_iters, 10));
}

}  // namespace detail

/// \brief Linearization of the augmented system at one primal point together
/// with its preconditioner.
class AugmentedSystem {
 public:
  AugmentedSystem(const ProblemSpec& p, const Iterate& it, const TimeGrid& g, const SolverConfig& cfg)
      : cfg_(cfg) {
    const std::size_t levels =
        cfg.prec == PrecondKind::multigrid ? (cfg.levels ? cfg.levels : levels_for(g.n_steps, cfg.coarsest_steps)) : 1;
    hier_ = build_hierarchy(p, it, g, levels, cfg.mg);
    op_ = as_operator(hier_->fine());
    switch (cfg.prec) {
      case PrecondKind::multigrid: prec_ = mg_preconditioner(hier_); break;
      case PrecondKind::jacobi:
        prec_ = block_preconditioner(hier_->fine(), hier_->level(0).factors, {SmootherKind::jacobi, 1, 1.0});
        break;
      case PrecondKind::fgs:
        prec_ = block_preconditioner(hier_->fine(), hier_->level(0).factors, {SmootherKind::fgs, 1, 1.0});
        break;
      case PrecondKind::bgs:
        prec_ = block_preconditioner(hier_->fine(), hier_->level(0).factors, {SmootherKind::bgs, 1, 1.0});
        break;
      case PrecondKind::sgs:
        prec_ = block_preconditioner(hier_->fine(), hier_->level(0).factors, {SmootherKind::sgs, 1, 1.0});
        break;
      case PrecondKind::none: break;
    }
  }

  const BlockTriKKT& op() const { return hier_->fine(); }
  const KktLayout& layout() const { return hier_->fine().layout; }
  const StageBlocks& stages() const { return hier_->level(0).stages; }
  const MgHierarchy& hierarchy() const { return *hier_; }

  /// \brief Solves A y = b so that ||e1|| + ||e2|| <= budget (or the iteration cap is hit).
  SolveResult solve(CSpan b, double budget, StepStats& stats) const {
    const double bn = norm2(b);
    // ||e1|| + ||e2|| <= sqrt(2) ||e||.
    const double rel = bn > 0.0 ? std::clamp(budget / (std::sqrt(2.0) * bn), 1e-14, 0.5) : 0.5;
    return solve_relative(b, rel, stats);
  }

  /// \brief Solves A y = b to a relative residual `rel` from a zero initial guess.
  SolveResult solve_relative(CSpan b, double rel, StepStats& stats) const {
    stats.ls_calls += 1;
    if (norm2(b) == 0.0) return {Vector(b.size(), 0.0), {}};
    const Vector x0(b.size(), 0.0);
    const bool flexible = cfg_.krylov == KrylovKind::fgmres;
    const std::size_t restart =
        detail::derived_restart(b.size(), cfg_.max_iters, cfg_.krylov_memory_bytes, flexible);
    const Preconditioner* pc = cfg_.prec == PrecondKind::none ? nullptr : &prec_;
    const MgStats before = hier_->stats;
    SolveResult r = flexible && pc ? fgmres(op_, *pc, b, x0, rel, cfg_.max_iters, restart)
                                   : gmres(op_, pc, b, x0, rel, cfg_.max_iters, restart);
    stats.ls_iters_total += r.report.iterations;
    stats.coarse_calls += hier_->stats.coarse_calls - before.coarse_calls;
    stats.coarse_iters += hier_->stats.coarse_iters - before.coarse_iters;
    return r;
  }

 private:
  SolverConfig cfg_;
  std::shared_ptr<MgHierarchy> hier_;
  LinearOperator op_;
  Preconditioner prec_;
};

/// \brief The SQP problem on a fixed grid: constraint, objective, Hessian and Q.
class SqpProblem {
 public:
  SqpProblem(const ProblemSpec& p, const TimeGrid& g) : p_(p), g_(g), layout_(p.n_u, p.n_z, g.n_steps) {
    w_ = BandedLu(p.state_weight);
    wz_ = BandedLu(p.control_weight);
    scales_.reserve(g.n_steps);
    for (std::size_t i = 0; i < g.n_steps; ++i) scales_.push_back(q_scales(p, i, g.n_steps, g.dt));
  }

  const ProblemSpec& spec() const { return p_; }
  const TimeGrid& grid() const { return g_; }
  const KktLayout& layout() const { return layout_; }

  Vector pack(const Iterate& it) const {
    Vector x(layout_.dimension(), 0.0);
    for (std::size_t i = 1; i <= g_.n_steps; ++i) {
      copy_into(it.u[i - 1], layout_.view(x, VarKind::u, i));
      copy_into(it.v[i - 1], layout_.view(x, VarKind::v, i));
      copy_into(it.z[i - 1], layout_.view(x, VarKind::z, i));
    }
    return x;
  }

  Iterate unpack(CSpan x) const {
    Iterate it;
    it.u = gather(layout_, x, VarKind::u);
    it.v = gather(layout_, x, VarKind::v);
    it.z = gather(layout_, x, VarKind::z);
    return it;
  }

  /// \brief Zeroes the multiplier slots (primal part of a KKT vector).
  Vector primal(CSpan x) const { return masked(x, true); }
  /// \brief Zeroes the primal slots.
  Vector dual(CSpan x) const { return masked(x, false); }

  /// \brief Constraint values in the multiplier slots: lambda_i <- theta residual, mu_i <- u_i - v_i.
  Vector constraint(const Iterate& it) const {
    Vector c(layout_.dimension(), 0.0);
    const std::size_t n = g_.n_steps;
    parallel_for(n, [&](std::size_t k) {
      const std::size_t i = k + 1;
      const Vector& vprev = k == 0 ? p_.u0 : it.v[k - 1];
      copy_into(theta_residual(p_, vprev, it.u[k], it.z[k], g_.dt), layout_.view(c, VarKind::lambda, i));
      copy_into(axpy(-1.0, it.v[k], it.u[k]), layout_.view(c, VarKind::mu, i));
    });
    return c;
  }

  /// \brief Objective value and gradient in the primal slots.
  std::pair<double, Vector> objective(const Iterate& it) const {
    const ObjectiveEval e = objective_and_gradient(p_, {it.u, it.z}, it.v, g_.dt);
    Vector grad(layout_.dimension(), 0.0);
    for (std::size_t i = 1; i <= g_.n_steps; ++i) {
      copy_into(e.grad_u[i - 1], layout_.view(grad, VarKind::u, i));
      copy_into(e.grad_v[i - 1], layout_.view(grad, VarKind::v, i));
      copy_into(e.grad_z[i - 1], layout_.view(grad, VarKind::z, i));
    }
    return {e.value, std::move(grad)};
  }

  /// \brief Q d on the primal slots.
  Vector apply_q(CSpan d) const {
    return per_stage(d, [](const BandedLu&, const SparseMatrix& w, double s, CSpan x, MSpan y) {
      w.multiply_add(s, x, y);
    });
  }

  Vector apply_q_inverse(CSpan d) const {
    return per_stage(d, [](const BandedLu& lu, const SparseMatrix&, double s, CSpan x, MSpan y) {
      Vector t = lu.solve(x);
      for (std::size_t j = 0; j < t.size(); ++j) y[j] = t[j] / s;
    });
  }

  double q_inner(CSpan a, CSpan b) const { return dot(a, apply_q(b)); }
  double q_norm(CSpan a) const { return std::sqrt(std::max(0.0, q_inner(a, a))); }
  double dual_norm(CSpan g) const { return std::sqrt(std::max(0.0, dot(g, apply_q_inverse(g)))); }

  /// \brief Hessian of the Lagrangian (or of the objective alone) applied to a primal direction.
  Vector hessian(const Iterate& it, CSpan y, CSpan d, HessianMode mode) const {
    Vector out(layout_.dimension(), 0.0);
    const std::size_t n = g_.n_steps;
    const double a = p_.track_weight, dt = g_.dt;
    for (std::size_t i = 1; i <= n; ++i) {
      double su = 0.5 * dt * a;
      if (i == n) su += 0.5 * p_.terminal_weight;
      p_.state_weight.multiply_add(su, layout_.view(d, VarKind::u, i), layout_.view(out, VarKind::u, i));
      p_.state_weight.multiply_add(su, layout_.view(d, VarKind::v, i), layout_.view(out, VarKind::v, i));
      p_.control_weight.multiply_add(dt * p_.control_penalty, layout_.view(d, VarKind::z, i),
                                     layout_.view(out, VarKind::z, i));
    }
    if (mode == HessianMode::gauss_newton || !p_.f_hess) return out;
    std::vector<StageCurvature> curv(n);
    const Vector zero_u(p_.n_u, 0.0);
    parallel_for(n, [&](std::size_t k) {
      const std::size_t i = k + 1;
      const Vector& vprev = k == 0 ? p_.u0 : it.v[k - 1];
      CSpan dv = k == 0 ? CSpan(zero_u) : layout_.view(d, VarKind::v, i - 1);
      curv[k] = stage_curvature(p_, vprev, it.u[k], it.z[k], dt, layout_.view(y, VarKind::lambda, i), dv,
                                layout_.view(d, VarKind::u, i), layout_.view(d, VarKind::z, i));
    });
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = k + 1;
      if (k > 0) add_into(curv[k].hv, layout_.view(out, VarKind::v, i - 1));
      add_into(curv[k].hu, layout_.view(out, VarKind::u, i));
      add_into(curv[k].hz, layout_.view(out, VarKind::z, i));
    }
    return out;
  }

 private:
  static void copy_into(CSpan src, MSpan dst) {
    require_dims(src.size() == dst.size(), "sqp: vector dimension mismatch");
    std::copy(src.begin(), src.end(), dst.begin());
  }
  static void add_into(CSpan src, MSpan dst) {
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }

  Vector masked(CSpan x, bool keep_primal) const {
    require_dims(x.size() == layout_.dimension(), "sqp: vector dimension mismatch");
    Vector y(x.size(), 0.0);
    for (std::size_t i = 1; i <= g_.n_steps; ++i)
      for (VarKind k : kAllKinds) {
        const bool is_primal = k == VarKind::u || k == VarKind::v || k == VarKind::z;
        if (is_primal != keep_primal) continue;
        copy_into(layout_.view(x, k, i), MSpan(y).subspan(layout_.offset(k, i), layout_.size(k)));
      }
    return y;
  }

  template <class F>
  Vector per_stage(CSpan d, F&& f) const {
    require_dims(d.size() == layout_.dimension(), "sqp: vector dimension mismatch");
    Vector out(d.size(), 0.0);
    auto view = [&](VarKind k, std::size_t i) {
      return MSpan(out).subspan(layout_.offset(k, i), layout_.size(k));
    };
    for (std::size_t i = 1; i <= g_.n_steps; ++i) {
      const QScales& s = scales_[i - 1];
      f(w_, p_.state_weight, s.u, layout_.view(d, VarKind::u, i), view(VarKind::u, i));
      f(w_, p_.state_weight, s.v, layout_.view(d, VarKind::v, i), view(VarKind::v, i));
      f(wz_, p_.control_weight, s.z, layout_.view(d, VarKind::z, i), view(VarKind::z, i));
    }
    return out;
  }

  ProblemSpec p_;
  TimeGrid g_;
  KktLayout layout_;
  BandedLu w_, wz_;
  std::vector<QScales> scales_;
};

/// \brief Everything evaluated at one primal point.
struct SqpPoint {
  Iterate it;
  Vector x;     ///< packed primal
  Vector c;     ///< constraint in multiplier slots
  double f = 0.0;
  Vector grad;  ///< objective gradient in primal slots
  std::unique_ptr<AugmentedSystem> sys;

  /// c_x^T y: primal part of A (0, y).
  Vector jac_transpose(const SqpProblem& prob, CSpan y) const { return prob.primal(multiply(sys->op(), prob.dual(y))); }
  /// c_x d: multiplier part of A (d, 0).
  Vector jac(const SqpProblem& prob, CSpan d) const { return prob.dual(multiply(sys->op(), prob.primal(d))); }
};

inline SqpPoint evaluate_point(const SqpProblem& prob, Iterate it, const SolverConfig& scfg) {
  SqpPoint pt;
  pt.x = prob.pack(it);
  pt.c = prob.constraint(it);
  auto [f, grad] = prob.objective(it);
  pt.f = f;
  pt.grad = std::move(grad);
  pt.sys = std::make_unique<AugmentedSystem>(prob.spec(), it, prob.grid(), scfg);
  pt.it = std::move(it);
  return pt;
}

/// \brief Quasi-normal step: Cauchy point, then a minimum-Q-norm Newton correction
/// when the Cauchy point is interior; the result is scaled back into zeta*delta.
inline Vector quasi_normal_step(const SqpProblem& prob, const SqpPoint& pt, double delta, const SqpConfig& cfg,
                                StepStats& stats) {
  const std::size_t dim = prob.layout().dimension();
  if (norm2(pt.c) == 0.0) return Vector(dim, 0.0);
  const double radius = cfg.zeta * delta;
  const Vector g = prob.apply_q_inverse(pt.jac_transpose(prob, pt.c));
  const double alpha = cauchy_factor(prob.q_norm(g), norm2(pt.jac(prob, g)), radius);
  Vector ncp = g;
  scale_inplace(-alpha, ncp);
  const double ncp_norm = prob.q_norm(ncp);
  if (ncp_norm >= radius * (1.0 - 1e-12)) return ncp;

  // [Q c_x^T; c_x 0] (dn, y) = (-Q ncp, -c_x ncp - c)
  Vector b = prob.apply_q(ncp);
  scale_inplace(-1.0, b);
  const Vector lin = pt.jac(prob, ncp);
  for (std::size_t k = 0; k < dim; ++k) b[k] -= lin[k] + pt.c[k];
  const Vector top = prob.primal(b), bottom = prob.dual(b);
  const double budget = tolerance_budget(BudgetKind::qn, ncp_norm, norm2(top), norm2(bottom), delta, cfg.tau);
  const SolveResult r = pt.sys->solve(b, budget, stats);
  Vector n = axpy(1.0, prob.primal(r.x), ncp);
  const double nn = prob.q_norm(n);
  if (nn > radius) scale_inplace(radius / nn, n);
  return n;
}

/// \brief Tangential step by projected CG on the Lagrangian model inside ||n + t||_Q <= delta.
inline CgResult tangential_step(const SqpProblem& prob, const SqpPoint& pt, CSpan y, CSpan grad_l, CSpan n,
                                double delta, const SqpConfig& cfg, StepStats& stats) {
  const std::size_t dim = prob.layout().dimension();
  const LinearOperator hess{dim, [&](CSpan d) { return prob.hessian(pt.it, y, prob.primal(d), cfg.hessian); }};
  auto project = [&](CSpan r) {
    const Vector rp = prob.primal(r);
    const double rn = norm2(rp);
    const double budget = tolerance_budget(BudgetKind::proj, rn, rn, 0.0, delta, cfg.tau);
    return prob.primal(pt.sys->solve(rp, budget, stats).x);
  };
  Vector g0 = hess.apply(n);
  axpy_inplace(1.0, grad_l, g0);
  CgOptions opt;
  opt.inner = [&](CSpan a, CSpan b) { return prob.q_inner(a, b); };
  opt.offset.assign(n.begin(), n.end());
  opt.reset = [&](CSpan g) { return prob.apply_q(g); };
  CgResult res = projected_cg(hess, project, prob.primal(g0), delta, cfg.cg_rel_tol, cfg.cg_max_iters, opt);
  stats.cg_iters += res.iterations;
  return res;
}

/// \brief Multiplier correction at a point: [Q c_x^T; c_x 0](p, dy) = (-grad f - c_x^T y, 0).
inline Vector multiplier_update(const SqpProblem& prob, const SqpPoint& pt, CSpan y, double delta,
                                const SqpConfig& cfg, StepStats& stats) {
  Vector b = axpy(1.0, pt.grad, pt.jac_transpose(prob, y));
  scale_inplace(-1.0, b);
  const double bn = norm2(b);
  const double budget = tolerance_budget(BudgetKind::mult, bn, bn, 0.0, delta, cfg.tau);
  const SolveResult r = pt.sys->solve(b, budget, stats);
  return axpy(1.0, prob.dual(r.x), Vector(y.begin(), y.end()));
}

inline double merit(const SqpPoint& pt, CSpan y, double penalty) {
  const double cn = norm2(pt.c);
  return pt.f + dot(y, pt.c) + penalty * cn * cn;
}

/// \brief Trust-region composite-step SQP from the uncontrolled trajectory.
inline SqpResult sqp_solve(const ProblemSpec& p, const TimeGrid& g, const SqpConfig& cfg,
                           const SolverConfig& scfg) {
  if (!(cfg.zeta > 0.0 && cfg.zeta < 1.0)) throw ConfigError("sqp: zeta must lie in (0,1)");
  if (!(cfg.tau > 0.0 && cfg.tau < 1.0)) throw ConfigError("sqp: tau must lie in (0,1)");
  if (!(cfg.delta0 > 0.0)) throw ConfigError("sqp: initial trust radius must be positive");
  const SqpProblem prob(p, g);
  const std::size_t dim = prob.layout().dimension();

  const Trajectory traj = forward_solve(p, std::vector<Vector>(g.n_steps, Vector(p.n_z, 0.0)), g);
  SqpPoint cur = evaluate_point(prob, {traj.states, traj.states, traj.controls}, scfg);

  SqpResult out;
  SqpState& st = out.state;
  st.multipliers.assign(dim, 0.0);
  st.trust_radius = cfg.delta0;
  st.penalty = cfg.penalty0;
  if (cfg.on_point) cfg.on_point(cur.it);

  for (st.iteration = 0;; ++st.iteration) {
    const Vector grad_l = axpy(1.0, cur.grad, cur.jac_transpose(prob, st.multipliers));
    st.optimality = prob.dual_norm(grad_l);
    st.feasibility = norm2(cur.c);
    if (st.optimality <= cfg.gtol && st.feasibility <= cfg.ctol) {
      out.converged = true;
      break;
    }
    if (st.iteration >= cfg.max_iters) break;

    StepStats stats;
    const double delta = st.trust_radius;
    const Vector n = quasi_normal_step(prob, cur, delta, cfg, stats);
    const CgResult tr = tangential_step(prob, cur, st.multipliers, grad_l, n, delta, cfg, stats);
    const Vector s = axpy(1.0, n, tr.step);
    const double s_norm = prob.q_norm(s);

    // Predicted reduction of the merit function.
    const Vector hs = prob.hessian(cur.it, st.multipliers, s, cfg.hessian);
    const double q = dot(grad_l, s) + 0.5 * dot(s, hs);
    const Vector lin = axpy(1.0, cur.jac(prob, s), cur.c);
    const double c2 = dot(cur.c, cur.c), lin2 = dot(lin, lin);

    bool accepted = false;
    std::unique_ptr<SqpPoint> trial;
    Vector y_new;
    try {
      trial = std::make_unique<SqpPoint>(evaluate_point(prob, prob.unpack(axpy(1.0, s, cur.x)), scfg));
      y_new = multiplier_update(prob, *trial, st.multipliers, delta, cfg, stats);
    } catch (const Error&) {
      trial.reset();  // a trial point that cannot be evaluated or linearized is rejected
    }
    if (trial) {
      const Vector dy = axpy(-1.0, st.multipliers, y_new);
      const double part = -q - dot(dy, lin);
      const double feas_drop = c2 - lin2;
      if (feas_drop > 0.0 && part + st.penalty * feas_drop < 0.5 * st.penalty * feas_drop)
        st.penalty = std::max(st.penalty, -2.0 * part / feas_drop + cfg.penalty_margin);
      const double pred = part + st.penalty * feas_drop;
      const double ared = merit(cur, st.multipliers, st.penalty) - merit(*trial, y_new, st.penalty);
      const double ratio = pred > 0.0 ? ared / pred : (ared >= 0.0 ? 1.0 : -1.0);
      accepted = std::isfinite(ared) && ratio >= cfg.eta_accept;
      if (accepted && ratio >= cfg.eta_expand && s_norm >= 0.8 * delta) st.trust_radius = 2.0 * delta;
    }
    if (!accepted) st.trust_radius = 0.5 * std::min(delta, s_norm > 0.0 ? s_norm : delta);
    stats.accepted = accepted;
    if (accepted) {
      cur = std::move(*trial);
      st.multipliers = std::move(y_new);
      if (cfg.on_point) cfg.on_point(cur.it);
    }
    out.steps.push_back(stats);
    if (cfg.log)
      *cfg.log << "k=" << st.iteration << " |c|=" << st.feasibility << " |gradL|=" << st.optimality
               << " delta=" << delta << " accepted=" << (accepted ? 1 : 0) << " cg=" << stats.cg_iters
               << " ls_calls=" << stats.ls_calls << " ls_avg=" << stats.ls_average() << '\n';
    if (st.trust_radius < 1e-14 * cfg.delta0) break;
  }
  st.x = cur.it;
  return out;
}

}  // namespace tempo_kkt
