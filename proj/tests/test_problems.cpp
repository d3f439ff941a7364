#include <gtest/gtest.h>

#include <random>

#include "tempo_kkt/problems.hpp"
#include "test_util.hpp"

namespace {

using namespace tempo_kkt;
using tk_test::random_vector;

std::vector<std::pair<std::string, ProblemSpec>> all_problems(const TimeGrid& g) {
  HeatNeumannConfig hc;
  hc.n_cells = 6;
  return {{"vanderpol", tk_test::small_vanderpol(g)},
          {"burgers", tk_test::small_burgers(g, 10)},
          {"heat", build_heat_neumann(hc, g)}};
}

TEST(Problems, RhsJacobiansMatchFiniteDifferences) {
  const TimeGrid g = TimeGrid::uniform(1.0, 4);
  std::mt19937_64 rng(31);
  for (const auto& [name, p] : all_problems(g)) {
    const Vector u = random_vector(p.n_u, rng), z = random_vector(p.n_z, rng);
    const DenseMatrix ju = p.f_jac_u(u, z).to_dense(), jz = p.f_jac_z(u, z).to_dense();
    const double h = 1e-6;
    double err = 0.0, scale = std::max({1.0, ju.max_abs(), jz.max_abs()});
    for (std::size_t j = 0; j < p.n_u; ++j) {
      Vector up = u, um = u;
      up[j] += h;
      um[j] -= h;
      const Vector fp = p.f_eval(up, z), fm = p.f_eval(um, z);
      for (std::size_t i = 0; i < p.n_u; ++i) err = std::max(err, std::abs((fp[i] - fm[i]) / (2 * h) - ju(i, j)));
    }
    for (std::size_t j = 0; j < p.n_z; ++j) {
      Vector zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      const Vector fp = p.f_eval(u, zp), fm = p.f_eval(u, zm);
      for (std::size_t i = 0; i < p.n_u; ++i) err = std::max(err, std::abs((fp[i] - fm[i]) / (2 * h) - jz(i, j)));
    }
    EXPECT_LE(err / scale, 1e-6) << name;
  }
}

TEST(Problems, SecondDerivativesMatchFiniteDifferences) {
  const TimeGrid g = TimeGrid::uniform(1.0, 4);
  std::mt19937_64 rng(32);
  for (const auto& [name, p] : all_problems(g)) {
    if (!p.f_hess) continue;
    const Vector u = random_vector(p.n_u, rng), z = random_vector(p.n_z, rng), lam = random_vector(p.n_u, rng);
    const Vector du = random_vector(p.n_u, rng), dz = random_vector(p.n_z, rng);
    const CurvatureTerms t = p.f_hess(u, z, lam, du, dz);
    const double h = 1e-6;
    const Vector gp = p.f_jac_u(axpy(h, du, u), axpy(h, dz, z)).transpose_times(lam);
    const Vector gm = p.f_jac_u(axpy(-h, du, u), axpy(-h, dz, z)).transpose_times(lam);
    Vector fd(gp.size());
    for (std::size_t i = 0; i < fd.size(); ++i) fd[i] = (gp[i] - gm[i]) / (2 * h);
    EXPECT_LE(norm2(axpy(-1.0, fd, t.hu)), 1e-6 * std::max(1.0, norm2(fd))) << name;
  }
}

// Gauss-Legendre (3 points, exact for the cubic integrand) on every element.
TEST(Burgers, ConvectionMatchesQuadrature) {
  const std::size_t ne = 9, n = ne - 1;
  const double h = 1.0 / ne;
  std::mt19937_64 rng(33);
  const Vector u = random_vector(n, rng);
  auto nodal = [&](std::size_t k) { return k == 0 || k == ne ? 0.0 : u[k - 1]; };
  const double gx[3] = {-std::sqrt(0.6), 0.0, std::sqrt(0.6)}, gw[3] = {5.0 / 9, 8.0 / 9, 5.0 / 9};
  Vector ref(n, 0.0);
  for (std::size_t e = 0; e < ne; ++e) {
    const double a = nodal(e), b = nodal(e + 1), slope = (b - a) / h;
    for (int q = 0; q < 3; ++q) {
      const double s = 0.5 * (gx[q] + 1.0), w = 0.5 * h * gw[q];
      const double val = (1 - s) * a + s * b;
      if (e > 0) ref[e - 1] += w * val * slope * (1 - s);
      if (e + 1 <= n) ref[e] += w * val * slope * s;
    }
  }
  BurgersConfig c;
  c.n_elems = ne;
  const TimeGrid g = TimeGrid::uniform(1.0, 2);
  const ProblemSpec p = build_burgers(c, g);
  // F(u, 0) = -nu K u - N(u), so adding nu K u back isolates the convection term.
  std::vector<Triplet> t;
  for (std::size_t i = 0; i < n; ++i) {
    t.push_back({i, i, 2.0 / h});
    if (i) t.push_back({i, i - 1, -1.0 / h});
    if (i + 1 < n) t.push_back({i, i + 1, -1.0 / h});
  }
  const SparseMatrix k = SparseMatrix::from_triplets(n, n, t);
  Vector f = p.f_eval(u, Vector(n, 0.0));
  k.multiply_add(c.nu, u, f);
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(-f[i], ref[i], 1e-13);
}

TEST(Burgers, InitialStateAndTarget) {
  const TimeGrid g = TimeGrid::uniform(1.0, 3);
  const ProblemSpec p = tk_test::small_burgers(g, 8);
  EXPECT_EQ(p.n_u, 7u);
  EXPECT_EQ(p.u0, (Vector{1, 1, 1, 1, 0, 0, 0}));
  ASSERT_EQ(p.u_target.size(), 3u);
  EXPECT_EQ(p.u_target[2], p.u0);
  double mass_total = 0.0;
  const DenseMatrix m = p.mass.to_dense();
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) mass_total += m(i, j);
  EXPECT_NEAR(mass_total, 1.0 - 4.0 / 3.0 / 8.0, 1e-14);  // int (sum phi_i)^2, which ramps over the end elements
}

TEST(Heat, ConstantsAreSteadyAndFluxEntersAtLeftEnd) {
  const TimeGrid g = TimeGrid::uniform(1.0, 3);
  HeatNeumannConfig hc;
  hc.n_cells = 5;
  const ProblemSpec p = build_heat_neumann(hc, g);
  const Vector f = p.f_eval(Vector(p.n_u, 2.0), Vector{0.0});
  for (double x : f) EXPECT_NEAR(x, 0.0, 1e-13);
  const Vector fz = p.f_eval(Vector(p.n_u, 0.0), Vector{1.5});
  EXPECT_DOUBLE_EQ(fz[0], 1.5);
  for (std::size_t i = 1; i < fz.size(); ++i) EXPECT_EQ(fz[i], 0.0);
  double mass_total = 0.0;
  const DenseMatrix m = p.mass.to_dense();
  for (std::size_t i = 0; i < p.n_u; ++i)
    for (std::size_t j = 0; j < p.n_u; ++j) mass_total += m(i, j);
  EXPECT_NEAR(mass_total, 1.0, 1e-14);
  EXPECT_DOUBLE_EQ(p.u_target.back()[0], 1.0);
}

TEST(VanDerPol, TargetComesFromTheLightlyDampedOscillator) {
  const TimeGrid g = TimeGrid::uniform(8.0, 32);
  const ProblemSpec p = tk_test::small_vanderpol(g);
  ASSERT_EQ(p.u_target.size(), 32u);
  const Trajectory own = forward_solve(p, std::vector<Vector>(32, Vector(2, 0.0)), g);
  EXPECT_GT(norm2(axpy(-1.0, own.states.back(), p.u_target.back())), 1e-3);
}

TEST(Problems, RejectInvalidConfigs) {
  const TimeGrid g = TimeGrid::uniform(1.0, 2);
  BurgersConfig b;
  b.nu = 0.0;
  EXPECT_THROW(build_burgers(b, g), ConfigError);
  VanDerPolConfig v;
  v.alpha = -1.0;
  EXPECT_THROW(build_vanderpol(v, g), ConfigError);
  HeatNeumannConfig h;
  h.alpha1 = 0.0;
  EXPECT_THROW(build_heat_neumann(h, g), ConfigError);
}

}  // namespace
