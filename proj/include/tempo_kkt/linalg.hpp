#pragma once

/// \file linalg.hpp
/// \brief Vector kernels, row-major dense matrices with pivoted LU, CSR sparse
///        matrices and a bandwidth-reducing banded LU for the KKT diagonal blocks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <boost/graph/adjacency_list.hpp>
#include <boost/graph/cuthill_mckee_ordering.hpp>

#include "errors.hpp"

namespace tempo_kkt {

using Vector = std::vector<double>;
using CSpan = std::span<const double>;
using MSpan = std::span<double>;

inline double dot(CSpan x, CSpan y) {
  require_dims(x.size() == y.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double norm2(CSpan x) { return std::sqrt(dot(x, x)); }

/// \brief Returns alpha*x + y.
inline Vector axpy(double alpha, CSpan x, CSpan y) {
  require_dims(x.size() == y.size(), "axpy: length mismatch");
  Vector r(y.begin(), y.end());
  for (std::size_t i = 0; i < x.size(); ++i) r[i] += alpha * x[i];
  return r;
}

/// \brief y += alpha*x in place.
inline void axpy_inplace(double alpha, CSpan x, MSpan y) {
  require_dims(x.size() == y.size(), "axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale_inplace(double alpha, MSpan x) {
  for (double& v : x) v *= alpha;
}

inline bool all_finite(CSpan x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

/// \brief Dense matrix in row-major order: entry (i, j) lives at i*cols + j.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  CSpan row(std::size_t i) const { return CSpan(data_).subspan(i * cols_, cols_); }
  CSpan data() const noexcept { return data_; }

  DenseMatrix transpose() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Vector matvec(const DenseMatrix& a, CSpan x) {
  require_dims(a.cols() == x.size(), "matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  require_dims(a.cols() == b.rows(), "matmul: dimension mismatch");
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

/// \brief Combined unit-lower/upper factors of P A = L U.
struct LuFactors {
  DenseMatrix lu;
  std::vector<std::size_t> pivots;  ///< row i of PA is row pivots[i] of A
  int sign = 1;
  double min_pivot = 0.0;
};

/// \brief Pivot floor used when none is given: rel * max|a|.
inline constexpr double kPivotFloorRel = 1e-14;

inline LuFactors lu_factor(const DenseMatrix& a, double floor_rel = kPivotFloorRel) {
  require_dims(a.rows() == a.cols(), "lu_factor: matrix not square");
  if (!all_finite(a.data())) throw NonFiniteValue("lu_factor: non-finite entry");
  const std::size_t n = a.rows();
  LuFactors f{a, std::vector<std::size_t>(n), 1, n ? std::numeric_limits<double>::infinity() : 0.0};
  std::iota(f.pivots.begin(), f.pivots.end(), std::size_t{0});
  const double floor = floor_rel * a.max_abs();
  DenseMatrix& m = f.lu;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(m(i, k)) > std::abs(m(p, k))) p = i;
    const double piv = std::abs(m(p, k));
    f.min_pivot = std::min(f.min_pivot, piv);
    if (piv <= floor || piv == 0.0)
      throw SingularMatrix("lu_factor: pivot " + std::to_string(piv) + " below floor at column " +
                           std::to_string(k));
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m(p, j), m(k, j));
      std::swap(f.pivots[p], f.pivots[k]);
      f.sign = -f.sign;
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double l = m(i, k) / m(k, k);
      m(i, k) = l;
      if (l == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) m(i, j) -= l * m(k, j);
    }
  }
  return f;
}

inline Vector lu_solve(const LuFactors& f, CSpan b) {
  const std::size_t n = f.lu.rows();
  require_dims(b.size() == n, "lu_solve: dimension mismatch");
  Vector x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = b[f.pivots[i]];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) x[i] -= f.lu(i, j) * x[j];
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = i + 1; j < n; ++j) x[i] -= f.lu(i, j) * x[j];
    x[i] /= f.lu(i, i);
  }
  return x;
}

/// \brief Solves a dense system directly; convenience for oracles and tiny blocks.
inline Vector dense_solve(const DenseMatrix& a, CSpan b) { return lu_solve(lu_factor(a), b); }

/// \brief (row, col, value) entry used to build sparse matrices.
struct Triplet {
  std::size_t row;
  std::size_t col;
  double value;
};

/// \brief Compressed sparse row matrix. Duplicate triplets are summed.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  SparseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), ptr_(rows + 1, 0) {}

  static SparseMatrix from_triplets(std::size_t rows, std::size_t cols, std::vector<Triplet> t) {
    for (const auto& e : t) require_dims(e.row < rows && e.col < cols, "triplet out of range");
    std::sort(t.begin(), t.end(), [](const Triplet& a, const Triplet& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    SparseMatrix m(rows, cols);
    for (std::size_t k = 0; k < t.size();) {
      std::size_t r = t[k].row, c = t[k].col;
      double v = 0.0;
      for (; k < t.size() && t[k].row == r && t[k].col == c; ++k) v += t[k].value;
      m.idx_.push_back(c);
      m.val_.push_back(v);
      ++m.ptr_[r + 1];
    }
    for (std::size_t r = 0; r < rows; ++r) m.ptr_[r + 1] += m.ptr_[r];
    return m;
  }

  static SparseMatrix from_dense(const DenseMatrix& d) {
    std::vector<Triplet> t;
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < d.cols(); ++j)
        if (d(i, j) != 0.0) t.push_back({i, j, d(i, j)});
    return from_triplets(d.rows(), d.cols(), std::move(t));
  }

  static SparseMatrix identity(std::size_t n, double scale = 1.0) {
    std::vector<Triplet> t;
    for (std::size_t i = 0; i < n; ++i) t.push_back({i, i, scale});
    return from_triplets(n, n, std::move(t));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nnz() const noexcept { return val_.size(); }
  const std::vector<std::size_t>& row_ptr() const noexcept { return ptr_; }
  const std::vector<std::size_t>& col_idx() const noexcept { return idx_; }
  const std::vector<double>& values() const noexcept { return val_; }

  /// \brief y += alpha * A x.
  void multiply_add(double alpha, CSpan x, MSpan y) const {
    require_dims(x.size() == cols_ && y.size() == rows_, "sparse multiply: dimension mismatch");
    for (std::size_t i = 0; i < rows_; ++i) {
      double s = 0.0;
      for (std::size_t k = ptr_[i]; k < ptr_[i + 1]; ++k) s += val_[k] * x[idx_[k]];
      y[i] += alpha * s;
    }
  }

  /// \brief y += alpha * A^T x.
  void multiply_transpose_add(double alpha, CSpan x, MSpan y) const {
    require_dims(x.size() == rows_ && y.size() == cols_, "sparse multiply: dimension mismatch");
    for (std::size_t i = 0; i < rows_; ++i) {
      const double xi = alpha * x[i];
      for (std::size_t k = ptr_[i]; k < ptr_[i + 1]; ++k) y[idx_[k]] += val_[k] * xi;
    }
  }

  Vector operator*(CSpan x) const {
    Vector y(rows_, 0.0);
    multiply_add(1.0, x, y);
    return y;
  }

  Vector transpose_times(CSpan x) const {
    Vector y(cols_, 0.0);
    multiply_transpose_add(1.0, x, y);
    return y;
  }

  /// \brief Appends the entries of alpha*A shifted by (r0, c0) to a triplet list.
  void append_triplets(std::vector<Triplet>& t, std::size_t r0, std::size_t c0, double alpha = 1.0,
                       bool transposed = false) const {
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t k = ptr_[i]; k < ptr_[i + 1]; ++k) {
        if (transposed)
          t.push_back({r0 + idx_[k], c0 + i, alpha * val_[k]});
        else
          t.push_back({r0 + i, c0 + idx_[k], alpha * val_[k]});
      }
  }

  SparseMatrix transpose() const {
    std::vector<Triplet> t;
    append_triplets(t, 0, 0, 1.0, true);
    return from_triplets(cols_, rows_, std::move(t));
  }

  DenseMatrix to_dense() const {
    DenseMatrix d(rows_, cols_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t k = ptr_[i]; k < ptr_[i + 1]; ++k) d(i, idx_[k]) += val_[k];
    return d;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : val_) m = std::max(m, std::abs(v));
    return m;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> ptr_{0};
  std::vector<std::size_t> idx_;
  std::vector<double> val_;
};

inline SparseMatrix scaled(double alpha, const SparseMatrix& a) {
  std::vector<Triplet> t;
  a.append_triplets(t, 0, 0, alpha);
  return SparseMatrix::from_triplets(a.rows(), a.cols(), std::move(t));
}

/// \brief Returns alpha*A + beta*B.
inline SparseMatrix add(double alpha, const SparseMatrix& a, double beta, const SparseMatrix& b) {
  require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "sparse add: dimension mismatch");
  std::vector<Triplet> t;
  a.append_triplets(t, 0, 0, alpha);
  b.append_triplets(t, 0, 0, beta);
  return SparseMatrix::from_triplets(a.rows(), a.cols(), std::move(t));
}

/// \brief Reverse Cuthill-McKee ordering of the symmetrized pattern of a.
/// perm[k] is the original index placed at position k.
inline std::vector<std::size_t> rcm_ordering(const SparseMatrix& a) {
  using Graph = boost::adjacency_list<boost::vecS, boost::vecS, boost::undirectedS>;
  const std::size_t n = a.rows();
  Graph g(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = a.row_ptr()[i]; k < a.row_ptr()[i + 1]; ++k) {
      const std::size_t j = a.col_idx()[k];
      if (j > i) boost::add_edge(i, j, g);
      if (j < i && !boost::edge(j, i, g).second) boost::add_edge(j, i, g);
    }
  std::vector<Graph::vertex_descriptor> order(n);
  boost::cuthill_mckee_ordering(g, order.rbegin());
  return {order.begin(), order.end()};
}

/// \brief LU with partial pivoting of a sparse square matrix stored as a band
///        after reverse Cuthill-McKee reordering. Reduces to dense LU for
///        small or dense blocks.
class BandedLu {
 public:
  BandedLu() = default;

  explicit BandedLu(const SparseMatrix& a, double floor_rel = kPivotFloorRel) {
    require_dims(a.rows() == a.cols(), "banded lu: matrix not square");
    if (!all_finite(a.values())) throw NonFiniteValue("banded lu: non-finite entry");
    n_ = a.rows();
    perm_ = rcm_ordering(a);
    std::vector<std::size_t> inv(n_);
    for (std::size_t k = 0; k < n_; ++k) inv[perm_[k]] = k;
    kl_ = ku_ = 0;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t k = a.row_ptr()[i]; k < a.row_ptr()[i + 1]; ++k) {
        const std::size_t pi = inv[i], pj = inv[a.col_idx()[k]];
        if (pi > pj) kl_ = std::max(kl_, pi - pj);
        if (pj > pi) ku_ = std::max(ku_, pj - pi);
      }
    w_ = 2 * kl_ + ku_ + 1;
    band_.assign(n_ * w_, 0.0);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t k = a.row_ptr()[i]; k < a.row_ptr()[i + 1]; ++k)
        at(inv[i], inv[a.col_idx()[k]]) += a.values()[k];
    piv_.resize(n_);
    factor(floor_rel * a.max_abs());
  }

  std::size_t size() const noexcept { return n_; }
  double min_pivot() const noexcept { return min_pivot_; }
  std::size_t lower_bandwidth() const noexcept { return kl_; }
  std::size_t upper_bandwidth() const noexcept { return ku_; }

  /// \brief Solves A x = b, overwriting b with x.
  void solve_inplace(MSpan b) const {
    require_dims(b.size() == n_, "banded lu solve: dimension mismatch");
    Vector& y = scratch();
    y.resize(n_);
    for (std::size_t k = 0; k < n_; ++k) y[k] = b[perm_[k]];
    for (std::size_t k = 0; k < n_; ++k) {
      if (piv_[k] != k) std::swap(y[k], y[piv_[k]]);
      const double yk = y[k];
      if (yk == 0.0) continue;
      const std::size_t iend = std::min(n_ - 1, k + kl_);
      for (std::size_t i = k + 1; i <= iend; ++i) y[i] -= get(i, k) * yk;
    }
    for (std::size_t k = n_; k-- > 0;) {
      double s = y[k];
      const std::size_t jend = std::min(n_ - 1, k + kl_ + ku_);
      for (std::size_t j = k + 1; j <= jend; ++j) s -= get(k, j) * y[j];
      y[k] = s / get(k, k);
    }
    for (std::size_t k = 0; k < n_; ++k) b[perm_[k]] = y[k];
  }

  Vector solve(CSpan b) const {
    Vector x(b.begin(), b.end());
    solve_inplace(x);
    return x;
  }

 private:
  double& at(std::size_t i, std::size_t j) { return band_[i * w_ + (j + kl_ - i)]; }
  double get(std::size_t i, std::size_t j) const { return band_[i * w_ + (j + kl_ - i)]; }

  static Vector& scratch() {
    thread_local Vector s;
    return s;
  }

  void factor(double floor) {
    min_pivot_ = n_ ? std::numeric_limits<double>::infinity() : 0.0;
    for (std::size_t k = 0; k < n_; ++k) {
      const std::size_t iend = std::min(n_ - 1, k + kl_);
      std::size_t p = k;
      for (std::size_t i = k + 1; i <= iend; ++i)
        if (std::abs(get(i, k)) > std::abs(get(p, k))) p = i;
      const double pv = std::abs(get(p, k));
      min_pivot_ = std::min(min_pivot_, pv);
      if (pv <= floor || pv == 0.0)
        throw SingularMatrix("banded lu: pivot " + std::to_string(pv) + " below floor at column " +
                             std::to_string(k));
      piv_[k] = p;
      const std::size_t jend = std::min(n_ - 1, k + kl_ + ku_);
      if (p != k)
        for (std::size_t j = k; j <= jend; ++j) std::swap(at(p, j), at(k, j));
      const double d = get(k, k);
      for (std::size_t i = k + 1; i <= iend; ++i) {
        const double l = get(i, k) / d;
        at(i, k) = l;
        if (l == 0.0) continue;
        for (std::size_t j = k + 1; j <= jend; ++j) at(i, j) -= l * get(k, j);
      }
    }
  }

  std::size_t n_ = 0, kl_ = 0, ku_ = 0, w_ = 1;
  std::vector<std::size_t> perm_;
  std::vector<std::size_t> piv_;
  std::vector<double> band_;
  double min_pivot_ = 0.0;
};

}  // namespace tempo_kkt
