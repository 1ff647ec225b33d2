#include <catch2/catch_amalgamated.hpp>

#include "ftmpc/qpsolver.hpp"

using namespace ftmpc;

namespace {

struct TestRng {
  std::uint64_t s;
  explicit TestRng(std::uint64_t seed) : s(seed) {}
  double next() {
    s += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= z >> 31;
    return 2.0 * ((z >> 11) * 0x1.0p-53) - 1.0;
  }
  Vec vec(int n) {
    Vec v(n);
    for (double& x : v) x = next();
    return v;
  }
  Mat mat(int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = next();
    return m;
  }
};

const Mat kA = Mat::from_rows({{1.1, 2.0}, {0.0, 0.95}});
const Mat kB = Mat::from_rows({{0.0}, {0.079}});
const Mat kK = Mat::from_rows({{4.3, 24.7}});

ControllerDesign paper_design(int N = 8) {
  return build_design(LinearSystem(kA, kB), BoxConstraintSet::input_bound(2, 1, 5.0), N,
                      Mat::identity(2), Mat::from_rows({{0.1}}), kK);
}

CondensedProgram paper_program(int N = 8) {
  return build_condensed(LinearSystem(kA, kB), BoxConstraintSet::input_bound(2, 1, 5.0),
                         paper_design(N));
}

// forward simulation oracle for the prediction map
Vec simulate_stack(const Mat& a, const Mat& b, const Vec& x0, const Vec& u, int N) {
  Vec out;
  Vec x = x0;
  const int m = b.cols();
  for (int i = 0; i < N; ++i) {
    Vec ui(u.begin() + i * m, u.begin() + (i + 1) * m);
    x = a * x + b * ui;
    out.insert(out.end(), x.begin(), x.end());
  }
  return out;
}

// Brute-force oracle: enumerate every row-activity pattern (inactive / at_lo /
// at_hi), solve the equality-constrained QP, keep the best primal-feasible
// candidate. Exponential, so only for tiny instances.
double enumeration_oracle(const Mat& h, const Vec& f, const Mat& c, const Vec& lo,
                          const Vec& hi, bool* feasible_out = nullptr) {
  const int rows = c.rows(), nu = c.cols();
  double best = kInf;
  bool found = false;
  std::vector<int> pattern(rows, 0);
  const long total = static_cast<long>(std::pow(3.0, rows));
  for (long code = 0; code < total; ++code) {
    long t = code;
    int na = 0;
    for (int i = 0; i < rows; ++i) {
      pattern[i] = static_cast<int>(t % 3);
      t /= 3;
      if (pattern[i]) ++na;
    }
    Mat kkt(nu + na, nu + na);
    Vec rhs(nu + na, 0.0);
    for (int i = 0; i < nu; ++i) {
      for (int j = 0; j < nu; ++j) kkt(i, j) = 2.0 * h(i, j);
      rhs[i] = -2.0 * f[i];
    }
    int slot = 0;
    for (int i = 0; i < rows; ++i) {
      if (!pattern[i]) continue;
      for (int j = 0; j < nu; ++j) {
        kkt(nu + slot, j) = c(i, j);
        kkt(j, nu + slot) = c(i, j);
      }
      rhs[nu + slot] = pattern[i] == 1 ? lo[i] : hi[i];
      ++slot;
    }
    Vec sol;
    try {
      sol = solve_linear(kkt, rhs);
    } catch (const SingularMatrixError&) {
      continue;
    }
    const Vec u(sol.begin(), sol.begin() + nu);
    bool ok = true;
    const Vec cu = c * u;
    for (int i = 0; i < rows && ok; ++i)
      ok = cu[i] >= lo[i] - 1e-9 && cu[i] <= hi[i] + 1e-9;
    if (!ok) continue;
    const double obj = dot(u, h * u) + 2.0 * dot(f, u);
    if (obj < best) best = obj;
    found = true;
  }
  if (feasible_out) *feasible_out = found;
  return best;
}

}  // namespace

TEST_CASE("condense matches the hand-expanded scalar program", "[qpsolver]") {
  // a = 2, b = 1, n = 1, N = 2, Q = R = 1, P = 13/3 (from K = 1.5):
  //   J = x(1)^2 + u1^2 + (13/3) x(2)^2 with x(1) = 2 x0 + u0, x(2) = 2 x(1) + u1
  StagePlan plan;
  plan.N = 2;
  plan.nx = 1;
  plan.nu1 = 1;
  plan.A.assign(2, Mat::from_rows({{2.0}}));
  plan.B.assign(2, Mat::from_rows({{1.0}}));
  plan.Qhat = {Mat::from_rows({{1.0}}), Mat::from_rows({{13.0 / 3.0}})};
  plan.Rhat = {Mat::from_rows({{0.0}}), Mat::from_rows({{1.0}})};
  plan.u_lo = {-kInf};
  plan.u_hi = {kInf};
  const CondensedProgram prog = condense(plan);

  CHECK(prog.H(0, 0) == Catch::Approx(55.0 / 3.0).epsilon(1e-12));
  CHECK(prog.H(0, 1) == Catch::Approx(26.0 / 3.0).epsilon(1e-12));
  CHECK(prog.H(1, 1) == Catch::Approx(16.0 / 3.0).epsilon(1e-12));
  CHECK(prog.f_map(0, 0) == Catch::Approx(110.0 / 3.0).epsilon(1e-12));
  CHECK(prog.f_map(1, 0) == Catch::Approx(52.0 / 3.0).epsilon(1e-12));
  CHECK(prog.const_map(0, 0) == Catch::Approx(220.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("condense at N = n recovers the pure terminal objective", "[qpsolver]") {
  const CondensedProgram prog = paper_program(2);
  const ControllerDesign d = paper_design(2);
  TestRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec x0 = rng.vec(2);
    const Vec u = rng.vec(2);
    // with the shifted window empty, only ||x(N)||_P survives
    const Vec stack = simulate_stack(kA, kB, x0, u, 2);
    const Vec xn(stack.end() - 2, stack.end());
    CHECK(true_cost(prog, x0, u) == Catch::Approx(quad_form(d.P, xn)).margin(1e-12));
  }
}

TEST_CASE("paper program dimensions and stage-weight window", "[qpsolver]") {
  const CondensedProgram prog = paper_program(8);
  CHECK(prog.Phi.rows() == 16);
  CHECK(prog.Phi.cols() == 8);
  CHECK(frob_norm(prog.Qhat[0]) == 0.0);                      // x(1) unweighted
  for (int i = 2; i <= 7; ++i) CHECK(frob_norm(prog.Qhat[i - 1] - Mat::identity(2)) == 0.0);
  CHECK(frob_norm(prog.Qhat[7] - paper_design(8).P) <= 1e-12);  // P on x(8)
  CHECK(frob_norm(prog.Rhat[0]) == 0.0);
  CHECK(frob_norm(prog.Rhat[1]) == 0.0);
  for (int i = 2; i <= 7; ++i) CHECK(prog.Rhat[i](0, 0) == Catch::Approx(0.1));
}

TEST_CASE("prediction map equals forward simulation", "[qpsolver]") {
  const CondensedProgram prog = paper_program(8);
  TestRng rng(222);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec x0 = rng.vec(2);
    const Vec u = rng.vec(8);
    const Vec lhs = prog.F * x0 + prog.Phi * u + prog.pred_offset;
    const Vec rhs = simulate_stack(kA, kB, x0, u, 8);
    double scale = std::max(norm_inf(rhs), 1.0);
    CHECK(norm_inf(lhs - rhs) <= 1e-10 * scale);
  }
}

TEST_CASE("condensed quadratic form equals the simulated cost", "[qpsolver]") {
  const CondensedProgram prog = paper_program(8);
  TestRng rng(333);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec x0 = rng.vec(2);
    const Vec u = rng.vec(8);
    const double direct = true_cost(prog, x0, u);
    const double quad = full_cost(prog, x0, u);
    CHECK(std::abs(direct - quad) <= 1e-9 * (1.0 + std::abs(direct)));
  }
}

TEST_CASE("project_ellipsoid basic and oracle cases", "[qpsolver]") {
  // interior point unchanged
  const Vec inside = project_ellipsoid({0.1, 0.2}, Mat::identity(2), 1.0);
  CHECK(inside[0] == 0.1);
  CHECK(inside[1] == 0.2);

  // unit-ball radial projection
  const Vec radial = project_ellipsoid({2.0, 0.0}, Mat::identity(2), 1.0);
  CHECK(radial[0] == Catch::Approx(1.0).epsilon(1e-9));
  CHECK(radial[1] == Catch::Approx(0.0).margin(1e-12));

  // dense 1-D mu-grid oracle on an anisotropic case
  const Mat p = Mat::from_rows({{4.0, 0.0}, {0.0, 1.0}});
  const double eps = 4.0;
  const Vec z{2.0, 2.0};
  const Vec proj = project_ellipsoid(z, p, eps);
  double best_d = kInf;
  Vec best{0.0, 0.0};
  for (int i = 0; i <= 2000000; ++i) {
    const double mu = i * 1e-6 * 4.0;
    const Vec cand{z[0] / (1.0 + 4.0 * mu), z[1] / (1.0 + mu)};
    if (quad_form(p, cand) > eps) continue;
    const double dist = norm2(cand - z);
    if (dist < best_d) { best_d = dist; best = cand; }
  }
  CHECK(norm2(proj - z) <= best_d + 1e-4);
  CHECK(std::abs(quad_form(p, proj) - eps) <= 1e-9 * eps);
  // KKT residual: proj - z + mu P proj is parallel to zero
  const double mu_est = (z[0] / proj[0] - 1.0) / 4.0;
  const Vec kkt_res{proj[0] - z[0] + mu_est * 4.0 * proj[0], proj[1] - z[1] + mu_est * proj[1]};
  CHECK(norm_inf(kkt_res) <= 1e-9);
}

TEST_CASE("solve at the origin returns zero", "[qpsolver]") {
  const CondensedProgram prog = paper_program(8);
  const SolveResult r = solve(prog, {0.0, 0.0});
  CHECK(r.status == SolveStatus::Optimal);
  CHECK(norm_inf(r.U_opt) <= 1e-9);
  CHECK(std::abs(r.objective) <= 1e-12);
}

TEST_CASE("unconstrained solve matches the normal equations", "[qpsolver]") {
  const LinearSystem sys(kA, kB);
  ControllerDesign d = paper_design(8);
  d.eps = kInf;  // disables the terminal ellipsoid
  const CondensedProgram prog = build_condensed(sys, BoxConstraintSet::unbounded(2, 1), d);
  TestRng rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    const Vec x0 = rng.vec(2);
    const SolveResult r = solve(prog, x0);
    REQUIRE(r.status == SolveStatus::Optimal);
    const Vec f = prog.f_map * x0;
    const Vec direct = solve_linear(prog.H, -1.0 * f);
    CHECK(norm_inf(r.U_opt - direct) <= 1e-6 * (1.0 + norm_inf(direct)));
  }
}

TEST_CASE("splitting matches the enumeration oracle on random boxes", "[qpsolver]") {
  TestRng rng(2024);
  int done = 0;
  while (done < 50) {
    // random controllable-ish 2-state plant over N = 3
    Mat a = rng.mat(2, 2);
    Mat b = rng.mat(2, 1);
    StagePlan plan;
    plan.N = 3;
    plan.nx = 2;
    plan.nu1 = 1;
    plan.A.assign(3, a);
    plan.B.assign(3, b);
    Mat q = Mat::identity(2);
    Mat p = Mat::identity(2);
    p(0, 0) = 1.0 + std::abs(rng.next());
    plan.Qhat = {Mat(2, 2), q, p};
    plan.Rhat = {Mat(1, 1), Mat(1, 1), Mat::from_rows({{0.5}})};
    const double ub = 0.5 + std::abs(rng.next());
    plan.u_lo = {-ub};
    plan.u_hi = {ub};
    const Vec x0 = rng.vec(2);
    // state box wide enough that the zero-input rollout stays feasible
    Vec rollout = simulate_stack(a, b, x0, Vec(3, 0.0), 3);
    double span = 0.0;
    for (double v : rollout) span = std::max(span, std::abs(v));
    plan.xb_lo = Vec(2, -(1.5 * span + 0.5));
    plan.xb_hi = Vec(2, 1.5 * span + 0.5);
    plan.state_box_first = 1;
    plan.state_box_last = 2;

    CondensedProgram prog;
    try {
      prog = condense(plan);
    } catch (const NotPositiveDefiniteError&) {
      continue;  // degenerate draw
    }
    const SolveResult r = solve(prog, x0);
    REQUIRE(r.status == SolveStatus::Optimal);

    // assemble the full row matrix (inputs + state rows) for the oracle
    const int rows = prog.total_rows();
    Mat c(rows, prog.nu);
    Vec lo(rows), hi(rows);
    for (int i = 0; i < rows; ++i) {
      const double s = prog.row_scale[i];
      for (int j = 0; j < prog.nu; ++j) c(i, j) = prog.Ms(i, j) / s;
      double off = prog.d0s[i] / s;
      for (int j = 0; j < prog.n0; ++j) off += prog.Ds(i, j) / s * x0[j];
      lo[i] = prog.lo_s[i] / s - off;
      hi[i] = prog.hi_s[i] / s - off;
    }
    const Vec f = prog.f_map * x0;
    bool feasible = false;
    const double oracle = enumeration_oracle(prog.H, f, c, lo, hi, &feasible);
    REQUIRE(feasible);
    CHECK(std::abs(r.objective - oracle) <= 1e-5 * (1.0 + std::abs(oracle)));
    ++done;
  }
}

TEST_CASE("KKT residuals at optimality", "[qpsolver]") {
  const CondensedProgram prog = paper_program(8);
  // pick states where the terminal ellipsoid is active
  int checked = 0;
  for (double r = 1.2; r <= 2.4 && checked < 5; r += 0.3) {
    const Vec x0{r, -0.2 * r};
    if (!check_feasible(prog, x0)) continue;
    const SolveResult res = solve(prog, x0);
    if (res.status != SolveStatus::Optimal) continue;
    const KktResiduals k = kkt_residuals(prog, x0, res);
    CHECK(k.stationarity <= 1e-6 * (1.0 + norm_inf(res.U_opt)));
    CHECK(k.primal <= 1e-6);
    CHECK(k.comp_slack <= 1e-6);
    ++checked;
  }
  CHECK(checked >= 3);
}

TEST_CASE("check_feasible basic verdicts", "[qpsolver]") {
  const CondensedProgram prog = paper_program(8);
  CHECK(check_feasible(prog, {0.0, 0.0}));
  CHECK_FALSE(check_feasible(prog, {1e6, 1e6}));
}

TEST_CASE("warm starts are no worse than cold starts along a nominal run", "[qpsolver]") {
  const CondensedProgram prog = paper_program(8);
  const ControllerDesign d = paper_design(8);
  const LinearSystem sys(kA, kB);
  Vec x{1.0, 0.5};
  WarmStart warm;
  bool have_warm = false;
  int no_worse = 0, steps = 0;
  for (int k = 0; k < 30; ++k) {
    const SolveResult cold = solve(prog, x);
    const SolveResult hot = have_warm ? solve(prog, x, &warm) : cold;
    REQUIRE(hot.status == SolveStatus::Optimal);
    if (have_warm) {
      ++steps;
      if (hot.iterations <= cold.iterations) ++no_worse;
    }
    Vec x_terminal(hot.X_pred.end() - 2, hot.X_pred.end());
    warm = shift_warm_start(prog, hot, -1.0 * (d.K * x_terminal));
    have_warm = true;
    const Vec u(hot.U_opt.begin(), hot.U_opt.begin() + 1);
    x = sys.step(x, u);
  }
  REQUIRE(steps >= 20);
  CHECK(no_worse >= (steps * 9) / 10);
}
