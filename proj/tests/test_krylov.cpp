#include <gtest/gtest.h>

#include <random>

#include "tempo_kkt/krylov.hpp"
#include "test_util.hpp"

namespace {

using namespace tempo_kkt;
using tk_test::random_vector;
using tk_test::rel_err;

DenseMatrix nonsymmetric(std::size_t n, std::mt19937_64& rng) {
  DenseMatrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = random_vector(1, rng)[0] / std::sqrt(double(n));
  for (std::size_t i = 0; i < n; ++i) a(i, i) += 2.0 + 0.1 * double(i);
  return a;
}

LinearOperator dense_op(const DenseMatrix& a) {
  return {a.rows(), [&a](CSpan x) { return matvec(a, x); }};
}

TEST(Gmres, SolvesNonsymmetricSystem) {
  std::mt19937_64 rng(3);
  const DenseMatrix a = nonsymmetric(60, rng);
  const Vector b = random_vector(60, rng);
  const SolveResult r = gmres(dense_op(a), nullptr, b, Vector(60, 0.0), 1e-10, 200);
  EXPECT_TRUE(r.report.converged);
  EXPECT_LE(r.report.final_relative_residual, 1e-10);
  EXPECT_LT(rel_err(r.x, dense_solve(a, b)), 1e-8);
  EXPECT_EQ(r.report.residual_history.size(), r.report.iterations + 1);
}

TEST(Gmres, ExactPreconditionerTakesOneIteration) {
  std::mt19937_64 rng(4);
  const DenseMatrix a = nonsymmetric(30, rng);
  const LuFactors f = lu_factor(a);
  const Preconditioner p{[&f](CSpan r) { return lu_solve(f, r); }, false};
  const Vector b = random_vector(30, rng);
  const SolveResult r = gmres(dense_op(a), &p, b, Vector(30, 0.0), 1e-12, 50);
  EXPECT_EQ(r.report.iterations, 1u);
  EXPECT_LT(rel_err(r.x, dense_solve(a, b)), 1e-10);
}

TEST(Gmres, RestartedStillConverges) {
  std::mt19937_64 rng(5);
  const DenseMatrix a = nonsymmetric(80, rng);
  const Vector b = random_vector(80, rng);
  const SolveResult r = gmres(dense_op(a), nullptr, b, Vector(80, 0.0), 1e-9, 500, 10);
  EXPECT_TRUE(r.report.converged);
  EXPECT_LT(rel_err(r.x, dense_solve(a, b)), 1e-7);
}

TEST(Gmres, ReportsCapAndRejectsBadTolerance) {
  std::mt19937_64 rng(6);
  const DenseMatrix a = nonsymmetric(40, rng);
  const Vector b = random_vector(40, rng);
  const SolveResult r = gmres(dense_op(a), nullptr, b, Vector(40, 0.0), 1e-14, 3);
  EXPECT_FALSE(r.report.converged);
  EXPECT_EQ(r.report.iterations, 3u);
  EXPECT_THROW(gmres(dense_op(a), nullptr, b, Vector(40, 0.0), 1.5, 3), Error);
}

// A preconditioner that changes on every call: flexible GMRES must still converge
// to the true solution, since it combines the actual preconditioned directions.
TEST(Fgmres, VariablePreconditioner) {
  std::mt19937_64 rng(8);
  const DenseMatrix a = nonsymmetric(50, rng);
  const LuFactors f = lu_factor(a);
  int calls = 0;
  const Preconditioner p{[&](CSpan r) {
                           Vector z = lu_solve(f, r);
                           scale_inplace(1.0 + 0.3 * std::sin(++calls), z);
                           for (std::size_t i = 0; i < z.size(); i += 7) z[i] += 0.05 * r[i];
                           return z;
                         },
                         true};
  const Vector b = random_vector(50, rng);
  const SolveResult r = fgmres(dense_op(a), p, b, Vector(50, 0.0), 1e-10, 100);
  EXPECT_TRUE(r.report.converged);
  EXPECT_LT(rel_err(r.x, dense_solve(a, b)), 1e-8);
}

TEST(Gmres, ZeroRhsReturnsInitialGuess) {
  const DenseMatrix a = DenseMatrix::identity(4);
  const SolveResult r = gmres(dense_op(a), nullptr, Vector(4, 0.0), Vector(4, 0.0), 1e-8, 10);
  EXPECT_TRUE(r.report.converged);
  EXPECT_EQ(r.report.iterations, 0u);
}

DenseMatrix spd(std::size_t n, std::mt19937_64& rng) {
  DenseMatrix b(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) b(i, j) = random_vector(1, rng)[0];
  DenseMatrix a = matmul(b.transpose(), b);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += 1.0;
  return a;
}

const auto identity_projection = [](CSpan r) { return Vector(r.begin(), r.end()); };

TEST(ProjectedCg, InteriorSolutionIsNewtonStep) {
  std::mt19937_64 rng(9);
  const DenseMatrix h = spd(10, rng);
  const Vector g = random_vector(10, rng);
  const CgResult r = projected_cg(dense_op(h), identity_projection, g, 1e6, 1e-12, 100);
  EXPECT_EQ(r.status, CgStatus::converged);
  Vector neg_g = g;
  scale_inplace(-1.0, neg_g);
  EXPECT_LT(rel_err(r.step, dense_solve(h, neg_g)), 1e-8);
}

TEST(ProjectedCg, StopsOnBoundary) {
  std::mt19937_64 rng(10);
  const DenseMatrix h = spd(10, rng);
  const Vector g = random_vector(10, rng);
  const CgResult r = projected_cg(dense_op(h), identity_projection, g, 1e-3, 1e-12, 100);
  EXPECT_EQ(r.status, CgStatus::boundary);
  EXPECT_NEAR(norm2(r.step), 1e-3, 1e-12);
}

TEST(ProjectedCg, NegativeCurvatureGoesToBoundary) {
  DenseMatrix h = DenseMatrix::identity(3);
  h(0, 0) = -1.0;
  const Vector g{1.0, 0.0, 0.0};
  const CgResult r = projected_cg(dense_op(h), identity_projection, g, 2.0, 1e-12, 10);
  EXPECT_EQ(r.status, CgStatus::negative_curvature);
  EXPECT_NEAR(norm2(r.step), 2.0, 1e-12);
  EXPECT_LT(dot(r.step, g), 0.0);
}

TEST(ProjectedCg, OffsetShiftsTheBall) {
  const DenseMatrix h = DenseMatrix::identity(2);
  const Vector g{-10.0, 0.0};
  CgOptions opt;
  opt.offset = {0.6, 0.0};
  const CgResult r = projected_cg(dense_op(h), identity_projection, g, 1.0, 1e-12, 10, opt);
  EXPECT_EQ(r.status, CgStatus::boundary);
  EXPECT_NEAR(r.step[0], 0.4, 1e-12);
}

// Projection onto {t : t_0 = 0}: the step must stay in that subspace.
TEST(ProjectedCg, StepStaysInProjectedSubspace) {
  std::mt19937_64 rng(11);
  const DenseMatrix h = spd(6, rng);
  const Vector g = random_vector(6, rng);
  auto project = [](CSpan r) {
    Vector p(r.begin(), r.end());
    p[0] = 0.0;
    return p;
  };
  const CgResult r = projected_cg(dense_op(h), project, g, 1e6, 1e-12, 100);
  EXPECT_EQ(r.step[0], 0.0);
  const Vector res = axpy(1.0, g, matvec(h, r.step));
  for (std::size_t i = 1; i < 6; ++i) EXPECT_NEAR(res[i], 0.0, 1e-9);
}

}  // namespace
