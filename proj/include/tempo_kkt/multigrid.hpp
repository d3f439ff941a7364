#pragma once

/// \file multigrid.hpp
/// \brief Multigrid in time for the block-tridiagonal KKT operator: transfers,
///        rediscretized level hierarchy, V/F/W cycles and the coarse solver.

#include <cstddef>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "kkt.hpp"
#include "krylov.hpp"
#include "smoothers.hpp"

namespace tempo_kkt {

using Sequence = std::vector<Vector>;

/// \brief Nodes 1..2Nc from nodes 1..Nc: even nodes copied, odd nodes averaged.
/// `left` is the node-0 value used by fine node 1.
inline Sequence prolong_state(const Sequence& coarse, const Vector& left) {
  Sequence fine;
  fine.reserve(2 * coarse.size());
  for (std::size_t j = 0; j < coarse.size(); ++j) {
    const Vector& prev = j == 0 ? left : coarse[j - 1];
    require_dims(prev.size() == coarse[j].size(), "prolong_state: inconsistent node dimension");
    Vector mid(coarse[j].size());
    for (std::size_t k = 0; k < mid.size(); ++k) mid[k] = 0.5 * (prev[k] + coarse[j][k]);
    fine.push_back(std::move(mid));
    fine.push_back(coarse[j]);
  }
  return fine;
}

/// \brief Same with the node-0 value extrapolated as a copy of node 1.
inline Sequence prolong_state(const Sequence& coarse) {
  return coarse.empty() ? Sequence{} : prolong_state(coarse, coarse.front());
}

/// \brief Injection at even nodes.
inline Sequence restrict_state(const Sequence& fine) {
  require_dims(fine.size() % 2 == 0, "restrict_state: odd number of fine nodes");
  Sequence coarse;
  for (std::size_t j = 1; j < fine.size(); j += 2) coarse.push_back(fine[j]);
  return coarse;
}

/// \brief Piecewise-constant injection of interval values.
inline Sequence prolong_control(const Sequence& coarse) {
  Sequence fine;
  for (const Vector& c : coarse) {
    fine.push_back(c);
    fine.push_back(c);
  }
  return fine;
}

/// \brief Average over the two fine intervals inside each coarse interval.
inline Sequence restrict_control(const Sequence& fine) {
  require_dims(fine.size() % 2 == 0, "restrict_control: odd number of fine intervals");
  Sequence coarse;
  for (std::size_t j = 0; j < fine.size(); j += 2) {
    require_dims(fine[j].size() == fine[j + 1].size(), "restrict_control: inconsistent dimension");
    Vector c(fine[j].size());
    for (std::size_t k = 0; k < c.size(); ++k) c[k] = 0.5 * (fine[j][k] + fine[j + 1][k]);
    coarse.push_back(std::move(c));
  }
  return coarse;
}

inline constexpr VarKind kAllKinds[] = {VarKind::u, VarKind::v, VarKind::z, VarKind::lambda, VarKind::mu};

inline Sequence gather(const KktLayout& l, CSpan x, VarKind k) {
  Sequence s(l.n_steps());
  for (std::size_t i = 1; i <= l.n_steps(); ++i) {
    CSpan v = x.subspan(l.offset(k, i), l.size(k));
    s[i - 1].assign(v.begin(), v.end());
  }
  return s;
}

inline void scatter(const KktLayout& l, const Sequence& s, VarKind k, MSpan x) {
  for (std::size_t i = 1; i <= l.n_steps(); ++i)
    std::copy(s[i - 1].begin(), s[i - 1].end(), x.begin() + static_cast<std::ptrdiff_t>(l.offset(k, i)));
}

/// \brief Restriction of a KKT vector: state rule for u, v, lambda, mu; control rule for z.
inline Vector restrict_kkt(const KktLayout& fine, CSpan x) {
  require_dims(x.size() == fine.dimension() && fine.n_steps() % 2 == 0, "restrict_kkt: dimension mismatch");
  const KktLayout coarse(fine.n_u(), fine.n_z(), fine.n_steps() / 2);
  Vector y(coarse.dimension(), 0.0);
  for (VarKind k : kAllKinds) {
    const Sequence s = gather(fine, x, k);
    scatter(coarse, k == VarKind::z ? restrict_control(s) : restrict_state(s), k, y);
  }
  return y;
}

inline Vector prolong_kkt(const KktLayout& coarse, CSpan x) {
  require_dims(x.size() == coarse.dimension(), "prolong_kkt: dimension mismatch");
  const KktLayout fine(coarse.n_u(), coarse.n_z(), coarse.n_steps() * 2);
  Vector y(fine.dimension(), 0.0);
  for (VarKind k : kAllKinds) {
    const Sequence s = gather(coarse, x, k);
    scatter(fine, k == VarKind::z ? prolong_control(s) : prolong_state(s), k, y);
  }
  return y;
}

/// \brief Restricts a primal iterate for rediscretization on the next coarser grid.
inline Iterate restrict_iterate(const Iterate& it) {
  return {restrict_state(it.u), restrict_state(it.v), restrict_control(it.z)};
}

enum class CycleKind { v, f, w };

inline const char* to_string(CycleKind c) {
  switch (c) {
    case CycleKind::v: return "v";
    case CycleKind::f: return "f";
    case CycleKind::w: return "w";
  }
  return "?";
}

struct MgConfig {
  CycleKind cycle = CycleKind::w;
  SmootherConfig smoother{SmootherKind::jacobi, 4, 1.0};
  double coarse_tol = 1e-6;
  std::size_t coarse_max_iters = 401;
  std::ostream* trace = nullptr;  ///< cycle trace sink, off when null
};

struct MgLevel {
  double dt = 0.0;
  StageBlocks stages;
  BlockTriKKT op;
  DiagFactors factors;
};

struct MgStats {
  std::size_t cycles = 0;
  std::size_t coarse_calls = 0;
  std::size_t coarse_iters = 0;
};

class MgHierarchy {
 public:
  MgConfig cfg;
  std::vector<std::unique_ptr<MgLevel>> levels;
  mutable MgStats stats;

  std::size_t num_levels() const { return levels.size(); }
  const MgLevel& level(std::size_t l) const { return *levels.at(l); }
  const BlockTriKKT& fine() const { return levels.front()->op; }
};

/// \brief Number of levels whose coarsest grid has `coarsest_steps` steps (1 if n is smaller).
inline std::size_t levels_for(std::size_t n_steps, std::size_t coarsest_steps) {
  std::size_t levels = 1;
  while (n_steps % 2 == 0 && n_steps / 2 >= coarsest_steps && n_steps > coarsest_steps) {
    n_steps /= 2;
    ++levels;
  }
  return levels;
}

/// \brief Rediscretized hierarchy: level l has N/2^l steps of size dt*2^l, linearized
/// at the restricted iterate. Every level is checked against the nonsingularity hypotheses.
inline std::shared_ptr<MgHierarchy> build_hierarchy(const ProblemSpec& p, const Iterate& it,
                                                    const TimeGrid& g, std::size_t levels,
                                                    const MgConfig& cfg) {
  if (levels == 0) throw IndivisibleSteps("build_hierarchy: need at least one level");
  const std::size_t factor = std::size_t{1} << (levels - 1);
  if (g.n_steps % factor != 0 || (levels > 1 && g.n_steps / factor < 2))
    throw IndivisibleSteps("build_hierarchy: " + std::to_string(g.n_steps) + " steps cannot be coarsened " +
                           std::to_string(levels - 1) + " times");
  require_dims(it.u.size() == g.n_steps, "build_hierarchy: iterate length does not match the grid");
  auto h = std::make_shared<MgHierarchy>();
  h->cfg = cfg;
  Iterate cur = it;
  double dt = g.dt;
  for (std::size_t l = 0; l < levels; ++l) {
    if (l > 0) {
      cur = restrict_iterate(cur);
      dt *= 2.0;
    }
    auto lv = std::make_unique<MgLevel>();
    lv->dt = dt;
    lv->stages = linearize(p, cur, dt);
    const NonsingularityReport rep = check_nonsingularity(lv->stages);
    if (!rep.all_pass()) {
      const BlockCheck bad = rep.failures().front();
      throw SingularBlock(bad.index, "level " + std::to_string(l) + " violates " + bad.condition);
    }
    lv->op = assemble_kkt(lv->stages, p.n_u, p.n_z);
    lv->factors = factor_diagonal(lv->op);
    h->levels.push_back(std::move(lv));
  }
  return h;
}

namespace detail {

inline void trace(const MgHierarchy& h, std::size_t level, const char* phase, const BlockTriKKT& a, CSpan b,
                  CSpan x) {
  if (!h.cfg.trace) return;
  const Vector r = detail::residual(a, b, x);
  *h.cfg.trace << "level=" << level << " phase=" << phase << " rnorm=" << norm2(r) << '\n';
}

}  // namespace detail

/// \brief SGS-preconditioned GMRES on the coarsest level with zero initial guess.
inline Vector coarse_solve(const MgHierarchy& h, CSpan r, double rel_tol, std::size_t max_iters) {
  const MgLevel& lv = *h.levels.back();
  const LinearOperator op = as_operator(lv.op);
  const Preconditioner sgs = block_preconditioner(lv.op, lv.factors, {SmootherKind::sgs, 1, 1.0});
  const Vector zero(r.size(), 0.0);
  SolveResult res = gmres(op, &sgs, r, zero, rel_tol, max_iters);
  ++h.stats.coarse_calls;
  h.stats.coarse_iters += res.report.iterations;
  return std::move(res.x);
}

inline Vector cycle(const MgHierarchy& h, std::size_t level, CSpan b, CSpan x0);

namespace detail {

inline Vector cycle_kind(const MgHierarchy& h, std::size_t level, CSpan b, CSpan x0, CycleKind kind) {
  const MgLevel& lv = *h.levels.at(level);
  const BlockTriKKT& a = lv.op;
  if (level + 1 == h.num_levels()) {
    Vector x(x0.begin(), x0.end());
    const Vector r = residual(a, b, x);
    axpy_inplace(1.0, coarse_solve(h, r, h.cfg.coarse_tol, h.cfg.coarse_max_iters), x);
    trace(h, level, "coarse", a, b, x);
    return x;
  }
  const SmootherConfig& sm = h.cfg.smoother;
  Vector x = smooth(a, lv.factors, b, x0, sm);
  trace(h, level, "pre", a, b, x);
  const Vector rc = restrict_kkt(a.layout, residual(a, b, x));
  const Vector zero(rc.size(), 0.0);
  Vector ec;
  switch (kind) {
    case CycleKind::v: ec = cycle_kind(h, level + 1, rc, zero, CycleKind::v); break;
    case CycleKind::w:
      ec = cycle_kind(h, level + 1, rc, zero, CycleKind::w);
      ec = cycle_kind(h, level + 1, rc, ec, CycleKind::w);
      break;
    case CycleKind::f:
      ec = cycle_kind(h, level + 1, rc, zero, CycleKind::f);
      ec = cycle_kind(h, level + 1, rc, ec, CycleKind::v);
      break;
  }
  axpy_inplace(1.0, prolong_kkt(h.levels.at(level + 1)->op.layout, ec), x);
  x = smooth(a, lv.factors, b, x, sm);
  trace(h, level, "post", a, b, x);
  return x;
}

}  // namespace detail

/// \brief One multigrid cycle of the configured kind starting at `level`.
inline Vector cycle(const MgHierarchy& h, std::size_t level, CSpan b, CSpan x0) {
  require_dims(level < h.num_levels(), "cycle: level out of range");
  require_dims(b.size() == h.level(level).op.dimension() && x0.size() == b.size(), "cycle: dimension mismatch");
  return detail::cycle_kind(h, level, b, x0, h.cfg.cycle);
}

/// \brief One cycle with zero initial guess applied to a residual. Flexible because
/// the inexact coarse solve makes the map nonlinear.
inline Preconditioner mg_preconditioner(std::shared_ptr<const MgHierarchy> h) {
  return {[h](CSpan r) {
            ++h->stats.cycles;
            return cycle(*h, 0, r, Vector(r.size(), 0.0));
          },
          true};
}

}  // namespace tempo_kkt
