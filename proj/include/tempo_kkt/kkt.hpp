#pragma once

/// \file kkt.hpp
/// \brief Time-ordered block-tridiagonal KKT operator with virtual states.
///
/// Unknowns are grouped by time step:
///   block 0           (u_1, z_1, lambda_1)
///   block i, 1..N-1   (v_i, u_{i+1}, z_{i+1}, mu_i, lambda_{i+1})
///   block N           (v_N, mu_N)
/// lambda_{i+1} multiplies the dynamics constraint on step i, mu_i the
/// continuity constraint u_i - v_i = 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "krylov.hpp"
#include "linalg.hpp"
#include "parallel.hpp"
#include "timedisc.hpp"

namespace tempo_kkt {

enum class VarKind { u, v, z, lambda, mu };

class KktLayout {
 public:
  KktLayout() = default;
  KktLayout(std::size_t n_u, std::size_t n_z, std::size_t n_steps)
      : n_u_(n_u), n_z_(n_z), n_(n_steps) {
    if (n_steps == 0) throw DimensionMismatch("kkt layout needs at least one step");
  }

  std::size_t n_u() const noexcept { return n_u_; }
  std::size_t n_z() const noexcept { return n_z_; }
  std::size_t n_steps() const noexcept { return n_; }
  std::size_t dimension() const noexcept { return n_ * (4 * n_u_ + n_z_); }
  std::size_t num_blocks() const noexcept { return n_ + 1; }

  std::size_t block_size(std::size_t b) const {
    if (b == 0) return 2 * n_u_ + n_z_;
    if (b == n_) return 2 * n_u_;
    return 4 * n_u_ + n_z_;
  }
  std::size_t block_offset(std::size_t b) const {
    return b == 0 ? 0 : (2 * n_u_ + n_z_) + (b - 1) * (4 * n_u_ + n_z_);
  }

  std::size_t size(VarKind k) const { return k == VarKind::z ? n_z_ : n_u_; }

  /// \brief Block holding the variable of kind k at time index i (1..N).
  std::size_t block_of(VarKind k, std::size_t i) const {
    switch (k) {
      case VarKind::u:
      case VarKind::z:
      case VarKind::lambda: return i - 1;
      case VarKind::v:
      case VarKind::mu: return i;
    }
    return 0;
  }

  /// \brief Offset of the variable inside its block.
  std::size_t local_offset(VarKind k, std::size_t i) const {
    check_index(i);
    const bool first = i == 1;
    switch (k) {
      case VarKind::u: return first ? 0 : n_u_;
      case VarKind::z: return first ? n_u_ : 2 * n_u_;
      case VarKind::lambda: return first ? n_u_ + n_z_ : 3 * n_u_ + n_z_;
      case VarKind::v: return 0;
      case VarKind::mu: return i == n_ ? n_u_ : 2 * n_u_ + n_z_;
    }
    return 0;
  }

  std::size_t offset(VarKind k, std::size_t i) const {
    return block_offset(block_of(k, i)) + local_offset(k, i);
  }

  MSpan view(MSpan x, VarKind k, std::size_t i) const { return x.subspan(offset(k, i), size(k)); }
  CSpan view(CSpan x, VarKind k, std::size_t i) const { return x.subspan(offset(k, i), size(k)); }
  MSpan view(Vector& x, VarKind k, std::size_t i) const { return view(MSpan(x), k, i); }
  CSpan view(const Vector& x, VarKind k, std::size_t i) const { return view(CSpan(x), k, i); }
  MSpan block(Vector& x, std::size_t b) const { return MSpan(x).subspan(block_offset(b), block_size(b)); }
  CSpan block(const Vector& x, std::size_t b) const {
    return CSpan(x).subspan(block_offset(b), block_size(b));
  }

  bool operator==(const KktLayout&) const = default;

 private:
  void check_index(std::size_t i) const {
    if (i < 1 || i > n_) throw DimensionMismatch("kkt layout: time index out of range");
  }
  std::size_t n_u_ = 0, n_z_ = 0, n_ = 0;
};

/// \brief Per-step linearization: K_i, C_i, B_i and the inner-product weights Q.
struct StageBlocks {
  std::size_t n_u = 0;
  std::size_t n_z = 0;
  std::vector<SparseMatrix> k, c, b;
  std::vector<SparseMatrix> q_u, q_v, q_z;

  std::size_t n_steps() const { return k.size(); }
};

/// \brief Primal trajectory with virtual states: u_1..u_N, v_1..v_N, z_1..z_N.
struct Iterate {
  std::vector<Vector> u, v, z;
};

/// \brief Scalar factors s with Q^u_i = s_u W, Q^v_i = s_v W, Q^z_i = s_z W_z.
/// They equal the objective Hessian; a zero tracking weight falls back to dt/2
/// so that the inner product stays positive definite.
struct QScales {
  double u, v, z;
};

inline QScales q_scales(const ProblemSpec& p, std::size_t i, std::size_t n, double dt) {
  double s = 0.5 * dt * p.track_weight;
  if (s <= 0.0) s = 0.5 * dt;
  const double term = i + 1 == n ? 0.5 * p.terminal_weight : 0.0;
  return {s + term, s + term, dt * p.control_penalty};
}

/// \brief Linearizes the theta-method constraints at an iterate on a grid of step dt.
inline StageBlocks linearize(const ProblemSpec& p, const Iterate& it, double dt) {
  const std::size_t n = it.u.size();
  require_dims(it.v.size() == n && it.z.size() == n && n > 0, "linearize: iterate length mismatch");
  StageBlocks s;
  s.n_u = p.n_u;
  s.n_z = p.n_z;
  s.k.resize(n);
  s.c.resize(n);
  s.b.resize(n);
  s.q_u.resize(n);
  s.q_v.resize(n);
  s.q_z.resize(n);
  parallel_for(n, [&](std::size_t i) {
    const Vector& vi = i == 0 ? p.u0 : it.v[i - 1];
    StageJacobians j = stage_blocks(p, vi, it.u[i], it.z[i], dt);
    s.k[i] = std::move(j.k);
    s.c[i] = std::move(j.c);
    s.b[i] = std::move(j.b);
    const QScales q = q_scales(p, i, n, dt);
    s.q_u[i] = scaled(q.u, p.state_weight);
    s.q_v[i] = scaled(q.v, p.state_weight);
    s.q_z[i] = scaled(q.z, p.control_weight);
  });
  return s;
}

struct BlockTriKKT {
  KktLayout layout;
  std::vector<SparseMatrix> diag;   ///< N+1 blocks
  std::vector<SparseMatrix> lower;  ///< lower[b] couples block row b to block b-1; lower[0] is empty
  std::vector<SparseMatrix> upper;  ///< upper[b] couples block row b to block b+1; upper[N] is empty

  std::size_t dimension() const { return layout.dimension(); }
};

inline BlockTriKKT assemble_kkt(const StageBlocks& s, std::size_t n_u, std::size_t n_z) {
  const std::size_t n = s.n_steps();
  require_dims(n > 0 && s.n_u == n_u && s.n_z == n_z && s.c.size() == n && s.b.size() == n &&
                   s.q_u.size() == n && s.q_v.size() == n && s.q_z.size() == n,
               "assemble_kkt: stage data do not conform");
  for (std::size_t i = 0; i < n; ++i)
    require_dims(s.k[i].rows() == n_u && s.k[i].cols() == n_u && s.c[i].rows() == n_u &&
                     s.c[i].cols() == n_u && s.b[i].rows() == n_u && s.b[i].cols() == n_z &&
                     s.q_u[i].rows() == n_u && s.q_v[i].rows() == n_u && s.q_z[i].rows() == n_z,
                 "assemble_kkt: stage block has the wrong shape");
  BlockTriKKT a;
  a.layout = KktLayout(n_u, n_z, n);
  const KktLayout& l = a.layout;
  a.diag.resize(n + 1);
  a.lower.resize(n + 1);
  a.upper.resize(n + 1);
  parallel_for(n + 1, [&](std::size_t bk) {
    std::vector<Triplet> t;
    if (bk == 0) {
      const std::size_t u = 0, z = n_u, lam = n_u + n_z;
      s.q_u[0].append_triplets(t, u, u);
      s.k[0].append_triplets(t, u, lam, 1.0, true);
      s.q_z[0].append_triplets(t, z, z);
      s.b[0].append_triplets(t, z, lam, 1.0, true);
      s.k[0].append_triplets(t, lam, u);
      s.b[0].append_triplets(t, lam, z);
    } else if (bk < n) {
      const std::size_t i = bk;
      const std::size_t v = 0, u = n_u, z = 2 * n_u, mu = 2 * n_u + n_z, lam = 3 * n_u + n_z;
      s.q_v[i - 1].append_triplets(t, v, v);
      s.c[i].append_triplets(t, v, lam, 1.0, true);
      s.q_u[i].append_triplets(t, u, u);
      s.k[i].append_triplets(t, u, lam, 1.0, true);
      s.q_z[i].append_triplets(t, z, z);
      s.b[i].append_triplets(t, z, lam, 1.0, true);
      s.c[i].append_triplets(t, lam, v);
      s.k[i].append_triplets(t, lam, u);
      s.b[i].append_triplets(t, lam, z);
      for (std::size_t j = 0; j < n_u; ++j) {
        t.push_back({v + j, mu + j, -1.0});
        t.push_back({mu + j, v + j, -1.0});
      }
    } else {
      s.q_v[n - 1].append_triplets(t, 0, 0);
      for (std::size_t j = 0; j < n_u; ++j) {
        t.push_back({j, n_u + j, -1.0});
        t.push_back({n_u + j, j, -1.0});
      }
    }
    a.diag[bk] = SparseMatrix::from_triplets(l.block_size(bk), l.block_size(bk), std::move(t));
    if (bk >= 1) {
      // mu_bk row picks up +u_bk from the previous block; the transpose sits above.
      std::vector<Triplet> c;
      const std::size_t r0 = l.local_offset(VarKind::mu, bk), c0 = l.local_offset(VarKind::u, bk);
      for (std::size_t j = 0; j < n_u; ++j) c.push_back({r0 + j, c0 + j, 1.0});
      a.lower[bk] = SparseMatrix::from_triplets(l.block_size(bk), l.block_size(bk - 1), std::move(c));
    }
  });
  for (std::size_t bk = 0; bk < n; ++bk) a.upper[bk] = a.lower[bk + 1].transpose();
  return a;
}

/// \brief y = A x blockwise: y_b = L_b x_{b-1} + D_b x_b + U_b x_{b+1}.
inline void apply_into(const BlockTriKKT& a, CSpan x, MSpan y) {
  const KktLayout& l = a.layout;
  require_dims(x.size() == l.dimension() && y.size() == l.dimension(), "apply: dimension mismatch");
  const std::size_t nb = l.num_blocks();
  parallel_for(nb, [&](std::size_t b) {
    MSpan yb = y.subspan(l.block_offset(b), l.block_size(b));
    std::fill(yb.begin(), yb.end(), 0.0);
    a.diag[b].multiply_add(1.0, x.subspan(l.block_offset(b), l.block_size(b)), yb);
    if (b > 0) a.lower[b].multiply_add(1.0, x.subspan(l.block_offset(b - 1), l.block_size(b - 1)), yb);
    if (b + 1 < nb) a.upper[b].multiply_add(1.0, x.subspan(l.block_offset(b + 1), l.block_size(b + 1)), yb);
  });
}

inline Vector multiply(const BlockTriKKT& a, CSpan x) {
  Vector y(a.dimension(), 0.0);
  apply_into(a, x, y);
  return y;
}

inline LinearOperator as_operator(const BlockTriKKT& a) {
  return {a.dimension(), [&a](CSpan x) { return multiply(a, x); }};
}

/// \brief Factored diagonal blocks D_b.
using DiagFactors = std::vector<BandedLu>;

inline DiagFactors factor_diagonal(const BlockTriKKT& a) {
  DiagFactors f(a.diag.size());
  parallel_for(a.diag.size(), [&](std::size_t b) {
    try {
      f[b] = BandedLu(a.diag[b]);
    } catch (const SingularMatrix& e) {
      throw SingularBlock(b, e.what());
    }
  });
  return f;
}

/// \brief Operator views of A = D - L - U (L and U are the negated off-diagonal parts).
struct SplitParts {
  LinearOperator d, l, u;
};

inline SplitParts split_parts(const BlockTriKKT& a) {
  const std::size_t n = a.dimension();
  auto part = [&a, n](int which) {
    return LinearOperator{n, [&a, which](CSpan x) {
                            const KktLayout& l = a.layout;
                            Vector y(l.dimension(), 0.0);
                            const std::size_t nb = l.num_blocks();
                            for (std::size_t b = 0; b < nb; ++b) {
                              MSpan yb = l.block(y, b);
                              if (which == 0)
                                a.diag[b].multiply_add(1.0, x.subspan(l.block_offset(b), l.block_size(b)), yb);
                              else if (which == 1 && b > 0)
                                a.lower[b].multiply_add(-1.0, x.subspan(l.block_offset(b - 1), l.block_size(b - 1)), yb);
                              else if (which == 2 && b + 1 < nb)
                                a.upper[b].multiply_add(-1.0, x.subspan(l.block_offset(b + 1), l.block_size(b + 1)), yb);
                            }
                            return y;
                          }};
  };
  return {part(0), part(1), part(2)};
}

/// \brief Clustered ordering: (u_1, v_1, ..., u_N, v_N, z_1..z_N, lambda_1, mu_1, ..., lambda_N, mu_N).
/// Returns the clustered offset of each variable; the permutation maps clustered to time-ordered.
inline std::vector<std::size_t> clustered_to_ordered(const KktLayout& l) {
  std::vector<std::size_t> perm(l.dimension());
  const std::size_t n = l.n_steps();
  std::size_t pos = 0;
  auto put = [&](VarKind k, std::size_t i) {
    const std::size_t off = l.offset(k, i);
    for (std::size_t j = 0; j < l.size(k); ++j) perm[pos++] = off + j;
  };
  for (std::size_t i = 1; i <= n; ++i) {
    put(VarKind::u, i);
    put(VarKind::v, i);
  }
  for (std::size_t i = 1; i <= n; ++i) put(VarKind::z, i);
  for (std::size_t i = 1; i <= n; ++i) {
    put(VarKind::lambda, i);
    put(VarKind::mu, i);
  }
  return perm;
}

inline Vector from_clustered(CSpan xc, std::size_t n_u, std::size_t n_z, std::size_t n) {
  const KktLayout l(n_u, n_z, n);
  require_dims(xc.size() == l.dimension(), "from_clustered: dimension mismatch");
  const auto perm = clustered_to_ordered(l);
  Vector x(xc.size());
  for (std::size_t k = 0; k < perm.size(); ++k) x[perm[k]] = xc[k];
  return x;
}

inline Vector to_clustered(CSpan x, std::size_t n_u, std::size_t n_z, std::size_t n) {
  const KktLayout l(n_u, n_z, n);
  require_dims(x.size() == l.dimension(), "to_clustered: dimension mismatch");
  const auto perm = clustered_to_ordered(l);
  Vector xc(x.size());
  for (std::size_t k = 0; k < perm.size(); ++k) xc[k] = x[perm[k]];
  return xc;
}

/// \brief Right-hand side data; index i = 0..N-1 refers to time index i+1.
struct RhsData {
  std::vector<Vector> b1;   ///< state targets for u_{i+1}
  std::vector<Vector> b1v;  ///< targets for v_{i+1}
  std::vector<Vector> b2;   ///< control targets for z_{i+1}
  std::vector<Vector> b3;   ///< dynamics residuals
  std::vector<Vector> b4;   ///< continuity residuals
};

inline Vector assemble_rhs(const StageBlocks& s, const RhsData& d) {
  const std::size_t n = s.n_steps();
  require_dims(d.b1.size() == n && d.b1v.size() == n && d.b2.size() == n && d.b3.size() == n &&
                   d.b4.size() == n,
               "assemble_rhs: data length mismatch");
  const KktLayout l(s.n_u, s.n_z, n);
  Vector r(l.dimension(), 0.0);
  auto put = [&](VarKind k, std::size_t i, const Vector& val) {
    require_dims(val.size() == l.size(k), "assemble_rhs: vector dimension mismatch");
    std::copy(val.begin(), val.end(), l.view(r, k, i).begin());
  };
  for (std::size_t i = 0; i < n; ++i) {
    put(VarKind::u, i + 1, s.q_u[i] * d.b1[i]);
    put(VarKind::v, i + 1, s.q_v[i] * d.b1v[i]);
    put(VarKind::z, i + 1, s.q_z[i] * d.b2[i]);
    put(VarKind::lambda, i + 1, d.b3[i]);
    put(VarKind::mu, i + 1, d.b4[i]);
  }
  return r;
}

/// \brief True when a symmetric sparse matrix admits a Cholesky factorization with
/// pivots above the relative floor. Works on the band of the natural ordering.
inline bool is_symmetric_positive_definite(const SparseMatrix& q) {
  const std::size_t n = q.rows();
  if (n == 0 || q.cols() != n) return false;
  const double scale = q.max_abs();
  const SparseMatrix qt = q.transpose();
  if (qt.col_idx() != q.col_idx()) return false;
  for (std::size_t k = 0; k < q.nnz(); ++k)
    if (std::abs(q.values()[k] - qt.values()[k]) > 1e-12 * scale) return false;
  std::size_t bw = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = q.row_ptr()[i]; k < q.row_ptr()[i + 1]; ++k) {
      const std::size_t j = q.col_idx()[k];
      if (j < i) bw = std::max(bw, i - j);
    }
  // l[i*(bw+1) + (i-j)] holds the factor entry (i, j) for i - bw <= j <= i.
  std::vector<double> l(n * (bw + 1), 0.0);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return l[i * (bw + 1) + (i - j)]; };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = q.row_ptr()[i]; k < q.row_ptr()[i + 1]; ++k)
      if (q.col_idx()[k] <= i) at(i, q.col_idx()[k]) = q.values()[k];
  const double floor = kPivotFloorRel * scale;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j0 = i > bw ? i - bw : 0;
    for (std::size_t j = j0; j <= i; ++j) {
      double s = at(i, j);
      for (std::size_t k = std::max(j0, j > bw ? j - bw : 0); k < j; ++k) s -= at(i, k) * at(j, k);
      if (j == i) {
        if (!(s > floor)) return false;
        at(i, i) = std::sqrt(s);
      } else {
        at(i, j) = s / at(j, j);
      }
    }
  }
  return true;
}

struct BlockCheck {
  std::string condition;  ///< "Q_u", "Q_v", "Q_z" or "K"
  std::size_t index;
  bool pass;
};

struct NonsingularityReport {
  std::vector<BlockCheck> items;
  bool all_pass() const {
    return std::all_of(items.begin(), items.end(), [](const BlockCheck& t) { return t.pass; });
  }
  std::vector<BlockCheck> failures() const {
    std::vector<BlockCheck> f;
    for (const auto& t : items)
      if (!t.pass) f.push_back(t);
    return f;
  }
};

/// \brief Checks the nonsingularity hypotheses: Q blocks SPD and each K_i nonsingular.
inline NonsingularityReport check_nonsingularity(const StageBlocks& s) {
  const std::size_t n = s.n_steps();
  std::vector<std::array<bool, 4>> ok(n);
  parallel_for(n, [&](std::size_t i) {
    ok[i][0] = is_symmetric_positive_definite(s.q_u[i]);
    ok[i][1] = is_symmetric_positive_definite(s.q_v[i]);
    ok[i][2] = is_symmetric_positive_definite(s.q_z[i]);
    try {
      BandedLu lu(s.k[i]);
      ok[i][3] = true;
    } catch (const Error&) {
      ok[i][3] = false;
    }
  });
  NonsingularityReport r;
  static const char* names[4] = {"Q_u", "Q_v", "Q_z", "K"};
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c) r.items.push_back({names[c], i, ok[i][c]});
  return r;
}

/// \brief Dense copy of the whole operator (small instances only).
inline DenseMatrix materialize(const BlockTriKKT& a) {
  const KktLayout& l = a.layout;
  DenseMatrix m(l.dimension(), l.dimension());
  const std::size_t nb = l.num_blocks();
  auto put = [&](const SparseMatrix& s, std::size_t r0, std::size_t c0) {
    for (std::size_t i = 0; i < s.rows(); ++i)
      for (std::size_t k = s.row_ptr()[i]; k < s.row_ptr()[i + 1]; ++k)
        m(r0 + i, c0 + s.col_idx()[k]) += s.values()[k];
  };
  for (std::size_t b = 0; b < nb; ++b) {
    put(a.diag[b], l.block_offset(b), l.block_offset(b));
    if (b > 0) put(a.lower[b], l.block_offset(b), l.block_offset(b - 1));
    if (b + 1 < nb) put(a.upper[b], l.block_offset(b), l.block_offset(b + 1));
  }
  return m;
}

/// \brief Writes the operator in coordinate matrix-market format with 1-based indices.
inline void write_matrix_market(const BlockTriKKT& a, std::ostream& os) {
  const DenseMatrix m = materialize(a);
  std::size_t nnz = 0;
  for (double v : m.data()) nnz += v != 0.0;
  os << "%%MatrixMarket matrix coordinate real general\n";
  os << "% blocks " << a.layout.num_blocks() << " n_u " << a.layout.n_u() << " n_z " << a.layout.n_z() << "\n";
  os << m.rows() << ' ' << m.cols() << ' ' << nnz << '\n';
  os.precision(17);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (m(i, j) != 0.0) os << i + 1 << ' ' << j + 1 << ' ' << m(i, j) << '\n';
}

}  // namespace tempo_kkt
