#pragma once

/// \file krylov.hpp
/// \brief Right-preconditioned GMRES, flexible GMRES and a trust-region
///        truncated projected conjugate gradient method.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "linalg.hpp"

namespace tempo_kkt {

/// \brief Square linear map given by its action.
struct LinearOperator {
  std::size_t dimension = 0;
  std::function<Vector(CSpan)> apply;
};

/// \brief Approximate inverse used on the right. Set is_flexible when apply is
/// not a fixed linear map (for example when it contains an inner iterative solve).
struct Preconditioner {
  std::function<Vector(CSpan)> apply;
  bool is_flexible = false;
};

struct SolveReport {
  std::size_t iterations = 0;
  std::vector<double> residual_history;  ///< relative to the initial residual
  bool converged = false;
  double final_relative_residual = 0.0;  ///< recomputed ||b - A x|| / ||b - A x0||
};

struct SolveResult {
  Vector x;
  SolveReport report;
};

inline constexpr double kHappyBreakdownRel = 1e-14;

namespace detail {

inline Vector residual(const LinearOperator& op, CSpan b, CSpan x) {
  Vector ax = op.apply(x);
  require_dims(ax.size() == b.size(), "operator output dimension mismatch");
  for (std::size_t i = 0; i < ax.size(); ++i) ax[i] = b[i] - ax[i];
  return ax;
}

// Arnoldi with modified Gram-Schmidt and Givens rotations. When `flexible` the
// preconditioned directions are stored and combined directly; otherwise the
// Krylov basis is combined first and the preconditioner applied once. A cycle
// whose implicit residual meets the target is only accepted if the recomputed
// residual does too; otherwise the method restarts from the current iterate.
inline SolveResult gmres_core(const LinearOperator& op, const Preconditioner* prec, CSpan b,
                              CSpan x0, double rel_tol, std::size_t max_iters, std::size_t restart,
                              bool flexible) {
  const std::size_t n = op.dimension;
  require_dims(b.size() == n && x0.size() == n, "gmres: dimension mismatch");
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw Error("gmres: rel_tol must lie in (0,1)");
  if (restart == 0) restart = max_iters;
  restart = std::max<std::size_t>(1, restart);

  SolveResult out{Vector(x0.begin(), x0.end()), {}};
  SolveReport& rep = out.report;
  Vector r = residual(op, b, out.x);
  const double beta0 = norm2(r);
  if (!std::isfinite(beta0)) throw NonFiniteValue("gmres: non-finite initial residual");
  rep.residual_history.push_back(beta0 > 0.0 ? 1.0 : 0.0);
  if (beta0 == 0.0) {
    rep.converged = true;
    return out;
  }
  const double target = rel_tol * beta0;
  auto precondition = [&](CSpan v) -> Vector {
    if (!prec) return Vector(v.begin(), v.end());
    Vector z = prec->apply(v);
    require_dims(z.size() == n, "preconditioner output dimension mismatch");
    return z;
  };

  bool first_cycle = true;
  for (;;) {
    if (!first_cycle) r = residual(op, b, out.x);
    const double beta = norm2(r);
    if (!std::isfinite(beta)) throw NonFiniteValue("gmres: non-finite residual");
    if (!first_cycle) rep.residual_history.back() = beta / beta0;
    first_cycle = false;
    rep.final_relative_residual = beta / beta0;
    if (beta <= target) {
      rep.converged = true;
      return out;
    }
    if (rep.iterations >= max_iters) return out;

    const std::size_t m = std::min(restart, max_iters - rep.iterations);
    std::vector<Vector> v;
    std::vector<Vector> z;
    v.reserve(m + 1);
    v.push_back(r);
    scale_inplace(1.0 / beta, v[0]);
    std::vector<std::vector<double>> h(m, std::vector<double>(m + 1, 0.0));  // column-major
    std::vector<double> cs(m), sn(m), g(m + 1, 0.0);
    g[0] = beta;
    std::size_t k = 0;
    bool breakdown = false;
    for (std::size_t j = 0; j < m; ++j) {
      Vector zj = precondition(v[j]);
      Vector w = op.apply(zj);
      if (flexible) z.push_back(std::move(zj));
      for (std::size_t i = 0; i <= j; ++i) {
        h[j][i] = dot(w, v[i]);
        axpy_inplace(-h[j][i], v[i], w);
      }
      const double hn = norm2(w);
      if (!std::isfinite(hn)) throw NonFiniteValue("gmres: non-finite Arnoldi vector");
      h[j][j + 1] = hn;
      for (std::size_t i = 0; i < j; ++i) {
        const double t = cs[i] * h[j][i] + sn[i] * h[j][i + 1];
        h[j][i + 1] = -sn[i] * h[j][i] + cs[i] * h[j][i + 1];
        h[j][i] = t;
      }
      const double den = std::hypot(h[j][j], h[j][j + 1]);
      cs[j] = den > 0.0 ? h[j][j] / den : 1.0;
      sn[j] = den > 0.0 ? h[j][j + 1] / den : 0.0;
      h[j][j] = den;
      h[j][j + 1] = 0.0;
      g[j + 1] = -sn[j] * g[j];
      g[j] = cs[j] * g[j];
      ++rep.iterations;
      k = j + 1;
      const double res = std::abs(g[j + 1]);
      rep.residual_history.push_back(res / beta0);
      if (res <= target) break;
      if (hn <= kHappyBreakdownRel * beta) {
        breakdown = true;
        break;
      }
      v.push_back(std::move(w));
      scale_inplace(1.0 / hn, v.back());
    }
    std::vector<double> y(k, 0.0);
    for (std::size_t i = k; i-- > 0;) {
      double s = g[i];
      for (std::size_t j = i + 1; j < k; ++j) s -= h[j][i] * y[j];
      if (h[i][i] == 0.0) throw Breakdown("gmres: singular Hessenberg matrix");
      y[i] = s / h[i][i];
    }
    if (flexible) {
      for (std::size_t i = 0; i < k; ++i) axpy_inplace(y[i], z[i], out.x);
    } else {
      Vector u(n, 0.0);
      for (std::size_t i = 0; i < k; ++i) axpy_inplace(y[i], v[i], u);
      axpy_inplace(1.0, precondition(u), out.x);
    }
    // A breakdown that still reduced the residual is rounding noise; the restart
    // recomputes the true residual. One that made no progress cannot recover.
    if (breakdown && std::abs(g[k]) > target && std::abs(g[k]) > 0.5 * beta)
      throw Breakdown("gmres: Krylov space exhausted with residual " + std::to_string(std::abs(g[k]) / beta0));
  }
}

}  // namespace detail

/// \brief Restarted GMRES with optional right preconditioning; restart = 0 means no restart.
inline SolveResult gmres(const LinearOperator& op, const Preconditioner* prec, CSpan b, CSpan x0,
                         double rel_tol, std::size_t max_iters, std::size_t restart = 0) {
  return detail::gmres_core(op, prec, b, x0, rel_tol, max_iters, restart, false);
}

/// \brief Flexible GMRES: tolerates a preconditioner that changes between applications.
inline SolveResult fgmres(const LinearOperator& op, const Preconditioner& prec, CSpan b, CSpan x0,
                          double rel_tol, std::size_t max_iters, std::size_t restart = 0) {
  return detail::gmres_core(op, &prec, b, x0, rel_tol, max_iters, restart, true);
}

enum class CgStatus { converged, boundary, negative_curvature, max_iters };

inline const char* to_string(CgStatus s) {
  switch (s) {
    case CgStatus::converged: return "converged";
    case CgStatus::boundary: return "boundary";
    case CgStatus::negative_curvature: return "negative_curvature";
    case CgStatus::max_iters: return "max_iters";
  }
  return "?";
}

struct CgOptions {
  /// Inner product defining the trust-region norm; Euclidean when empty.
  std::function<double(CSpan, CSpan)> inner;
  /// Fixed offset o: the region is ||o + step|| <= radius. Zero when empty.
  Vector offset;
  /// When set, the residual is replaced by reset(g) after every projection g = P r.
  /// For a projector built on an augmented system with metric Q this is Q g = r - J^T y,
  /// which drops the range-space part of r that would otherwise grow and spoil beta.
  std::function<Vector(CSpan)> reset;
};

struct CgResult {
  Vector step;
  CgStatus status = CgStatus::converged;
  std::size_t iterations = 0;
};

/// \brief Truncated projected CG for min g.t + 1/2 t.H t over the range of `project`
/// inside a trust region. `project` maps a gradient-like residual to a feasible
/// direction and is re-applied to the updated residual every iteration.
inline CgResult projected_cg(const LinearOperator& hess, const std::function<Vector(CSpan)>& project,
                             CSpan grad, double trust_radius, double rel_tol, std::size_t max_iters,
                             const CgOptions& opt = {}) {
  const std::size_t n = grad.size();
  require_dims(hess.dimension == n, "projected_cg: dimension mismatch");
  if (!(trust_radius > 0.0)) throw Error("projected_cg: trust radius must be positive");
  auto inner = [&](CSpan a, CSpan b) { return opt.inner ? opt.inner(a, b) : dot(a, b); };
  const bool has_offset = !opt.offset.empty();
  if (has_offset) require_dims(opt.offset.size() == n, "projected_cg: offset dimension mismatch");

  CgResult out{Vector(n, 0.0), CgStatus::max_iters, 0};
  Vector& t = out.step;
  Vector r(grad.begin(), grad.end());
  Vector g = project(r);
  if (opt.reset) r = opt.reset(g);
  double rg = dot(r, g);
  if (!std::isfinite(rg)) throw NonFiniteValue("projected_cg: non-finite projected gradient");
  if (rg <= 0.0) {
    out.status = CgStatus::converged;
    return out;
  }
  const double stop = rel_tol * std::sqrt(rg);
  Vector p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = -g[i];

  auto to_boundary = [&](CSpan dir) {
    Vector base = t;
    if (has_offset) axpy_inplace(1.0, opt.offset, base);
    const double a = inner(dir, dir), bq = 2.0 * inner(base, dir),
                 c = inner(base, base) - trust_radius * trust_radius;
    const double disc = std::max(0.0, bq * bq - 4.0 * a * c);
    const double tau = a > 0.0 ? (-bq + std::sqrt(disc)) / (2.0 * a) : 0.0;
    axpy_inplace(std::max(0.0, tau), dir, t);
  };

  for (std::size_t k = 0; k < max_iters; ++k) {
    const Vector hp = hess.apply(p);
    const double kappa = dot(p, hp);
    if (!std::isfinite(kappa)) throw NonFiniteValue("projected_cg: non-finite curvature");
    ++out.iterations;
    if (kappa <= 0.0) {
      to_boundary(p);
      out.status = CgStatus::negative_curvature;
      return out;
    }
    const double alpha = rg / kappa;
    Vector trial = axpy(alpha, p, t);
    if (has_offset) axpy_inplace(1.0, opt.offset, trial);
    if (std::sqrt(inner(trial, trial)) >= trust_radius) {
      to_boundary(p);
      out.status = CgStatus::boundary;
      return out;
    }
    axpy_inplace(alpha, p, t);
    axpy_inplace(alpha, hp, r);
    g = project(r);
    if (opt.reset) r = opt.reset(g);
    const double rg_new = dot(r, g);
    if (!std::isfinite(rg_new)) throw NonFiniteValue("projected_cg: non-finite residual");
    if (std::sqrt(std::max(rg_new, 0.0)) <= stop) {
      out.status = CgStatus::converged;
      return out;
    }
    const double beta = rg_new / rg;
    for (std::size_t i = 0; i < n; ++i) p[i] = -g[i] + beta * p[i];
    rg = rg_new;
  }
  out.status = CgStatus::max_iters;
  return out;
}

}  // namespace tempo_kkt
