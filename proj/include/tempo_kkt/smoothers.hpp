#pragma once

/// \file smoothers.hpp
/// \brief Block Jacobi and block Gauss-Seidel iterations over the splitting A = D - L - U.

#include <cstddef>
#include <string>

#include "kkt.hpp"
#include "krylov.hpp"
#include "parallel.hpp"

namespace tempo_kkt {

enum class SmootherKind { jacobi, fgs, bgs, sgs };

inline const char* to_string(SmootherKind k) {
  switch (k) {
    case SmootherKind::jacobi: return "jacobi";
    case SmootherKind::fgs: return "fgs";
    case SmootherKind::bgs: return "bgs";
    case SmootherKind::sgs: return "sgs";
  }
  return "?";
}

struct SmootherConfig {
  SmootherKind kind = SmootherKind::jacobi;
  std::size_t sweeps = 4;
  double damping = 1.0;  ///< Jacobi only
};

namespace detail {

inline void check_smoother_args(const BlockTriKKT& a, const DiagFactors& f, CSpan b, CSpan x) {
  require_dims(f.size() == a.layout.num_blocks(), "smoother: factor count does not match the operator");
  require_dims(b.size() == a.dimension() && x.size() == a.dimension(), "smoother: dimension mismatch");
}

inline Vector residual(const BlockTriKKT& a, CSpan b, CSpan x) {
  Vector r = multiply(a, x);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = b[i] - r[i];
  return r;
}

// In place: r <- (D - L)^{-1} r, i.e. forward substitution with the block lower triangle of A.
inline void forward_substitute(const BlockTriKKT& a, const DiagFactors& f, Vector& r) {
  const KktLayout& l = a.layout;
  for (std::size_t b = 0; b < l.num_blocks(); ++b) {
    MSpan rb = l.block(r, b);
    if (b > 0) a.lower[b].multiply_add(-1.0, l.block(std::as_const(r), b - 1), rb);
    f[b].solve_inplace(rb);
  }
}

// In place: r <- (D - U)^{-1} r.
inline void backward_substitute(const BlockTriKKT& a, const DiagFactors& f, Vector& r) {
  const KktLayout& l = a.layout;
  const std::size_t nb = l.num_blocks();
  for (std::size_t b = nb; b-- > 0;) {
    MSpan rb = l.block(r, b);
    if (b + 1 < nb) a.upper[b].multiply_add(-1.0, l.block(std::as_const(r), b + 1), rb);
    f[b].solve_inplace(rb);
  }
}

}  // namespace detail

/// \brief x <- x + omega D^{-1}(b - A x), `sweeps` times. Block solves are independent.
inline Vector jacobi_apply(const BlockTriKKT& a, const DiagFactors& f, CSpan b, CSpan x0,
                           std::size_t sweeps, double damping = 1.0, std::size_t threads = 0) {
  detail::check_smoother_args(a, f, b, x0);
  const KktLayout& l = a.layout;
  Vector x(x0.begin(), x0.end());
  Vector r(x.size());
  for (std::size_t s = 0; s < sweeps; ++s) {
    apply_into(a, x, r);
    parallel_for(
        l.num_blocks(),
        [&](std::size_t k) {
          MSpan rk = l.block(r, k);
          CSpan bk = b.subspan(l.block_offset(k), l.block_size(k));
          for (std::size_t i = 0; i < rk.size(); ++i) rk[i] = bk[i] - rk[i];
          f[k].solve_inplace(rk);
          MSpan xk = l.block(x, k);
          for (std::size_t i = 0; i < rk.size(); ++i) xk[i] += damping * rk[i];
        },
        threads);
  }
  return x;
}

/// \brief x <- x + (D - L)^{-1}(b - A x).
inline Vector fgs_apply(const BlockTriKKT& a, const DiagFactors& f, CSpan b, CSpan x0) {
  detail::check_smoother_args(a, f, b, x0);
  Vector r = detail::residual(a, b, x0);
  detail::forward_substitute(a, f, r);
  return axpy(1.0, r, x0);
}

/// \brief x <- x + (D - U)^{-1}(b - A x).
inline Vector bgs_apply(const BlockTriKKT& a, const DiagFactors& f, CSpan b, CSpan x0) {
  detail::check_smoother_args(a, f, b, x0);
  Vector r = detail::residual(a, b, x0);
  detail::backward_substitute(a, f, r);
  return axpy(1.0, r, x0);
}

/// \brief x <- x + (D - U)^{-1} D (D - L)^{-1}(b - A x).
inline Vector sgs_apply(const BlockTriKKT& a, const DiagFactors& f, CSpan b, CSpan x0) {
  detail::check_smoother_args(a, f, b, x0);
  const KktLayout& l = a.layout;
  Vector r = detail::residual(a, b, x0);
  detail::forward_substitute(a, f, r);
  Vector w(r.size(), 0.0);
  for (std::size_t k = 0; k < l.num_blocks(); ++k) a.diag[k].multiply_add(1.0, l.block(std::as_const(r), k), l.block(w, k));
  detail::backward_substitute(a, f, w);
  return axpy(1.0, w, x0);
}

/// \brief `cfg.sweeps` sweeps of the chosen iteration starting from x0.
inline Vector smooth(const BlockTriKKT& a, const DiagFactors& f, CSpan b, CSpan x0, const SmootherConfig& cfg) {
  if (cfg.kind == SmootherKind::jacobi) return jacobi_apply(a, f, b, x0, cfg.sweeps, cfg.damping);
  Vector x(x0.begin(), x0.end());
  for (std::size_t s = 0; s < cfg.sweeps; ++s) {
    switch (cfg.kind) {
      case SmootherKind::fgs: x = fgs_apply(a, f, b, x); break;
      case SmootherKind::bgs: x = bgs_apply(a, f, b, x); break;
      default: x = sgs_apply(a, f, b, x); break;
    }
  }
  return x;
}

/// \brief One application of the chosen iteration to a residual with zero initial guess.
/// Jacobi uses `sweeps` sweeps; the Gauss-Seidel variants a single one.
inline Preconditioner block_preconditioner(const BlockTriKKT& a, const DiagFactors& f,
                                           const SmootherConfig& cfg) {
  return {[&a, &f, cfg](CSpan r) {
            const Vector zero(r.size(), 0.0);
            switch (cfg.kind) {
              case SmootherKind::jacobi: return jacobi_apply(a, f, r, zero, cfg.sweeps, cfg.damping);
              case SmootherKind::fgs: return fgs_apply(a, f, r, zero);
              case SmootherKind::bgs: return bgs_apply(a, f, r, zero);
              case SmootherKind::sgs: return sgs_apply(a, f, r, zero);
            }
            return Vector(r.begin(), r.end());
          },
          false};
}

}  // namespace tempo_kkt
