#include <catch2/catch_amalgamated.hpp>

#include "ftmpc/design.hpp"

using namespace ftmpc;

namespace {

const Mat kA = Mat::from_rows({{1.1, 2.0}, {0.0, 0.95}});
const Mat kB = Mat::from_rows({{0.0}, {0.079}});
const Mat kK = Mat::from_rows({{4.3, 24.7}});
const Mat kQ2 = Mat::identity(2);
const Mat kR1 = Mat::from_rows({{0.1}});

LinearSystem paper_plant() { return LinearSystem(kA, kB); }
BoxConstraintSet paper_box() { return BoxConstraintSet::input_bound(2, 1, 5.0); }

// independent oracle: truncated Lyapunov series sum_i (A')^i W A^i
Mat lyapunov_series(const Mat& acl, const Mat& w, int terms) {
  Mat p(w.rows(), w.cols());
  Mat power = Mat::identity(acl.rows());
  for (int i = 0; i < terms; ++i) {
    p = p + transpose(power) * (w * power);
    power = acl * power;
  }
  return p;
}

}  // namespace

TEST_CASE("LinearSystem rejects uncontrollable pairs", "[design]") {
  CHECK_THROWS_AS(LinearSystem(Mat::identity(2), Mat::from_rows({{1.0}, {0.0}})),
                  NotControllableError);
  CHECK_NOTHROW(paper_plant());
}

TEST_CASE("BoxConstraintSet validates interior and ordering", "[design]") {
  CHECK_THROWS_AS(BoxConstraintSet({-1.0}, {-2.0}, {-1.0}, {1.0}), DimensionError);
  CHECK_THROWS_AS(BoxConstraintSet({0.5}, {2.0}, {-1.0}, {1.0}), DegenerateError);
  CHECK_NOTHROW(BoxConstraintSet({-kInf}, {kInf}, {-5.0}, {5.0}));
}

TEST_CASE("lyapunov trivial cases", "[design]") {
  // nilpotent of order 1: the series truncates at W
  const Mat w = kQ2 + transpose(kK) * (kR1 * kK);
  const Mat p0 = solve_discrete_lyapunov(Mat(2, 2), w);
  CHECK(frob_norm(p0 - w) <= 1e-12 * frob_norm(w));

  // scalar geometric series: Acl = 0.5, W = 1 -> P = 4/3
  Mat acl(1, 1), ws(1, 1);
  acl(0, 0) = 0.5;
  ws(0, 0) = 1.0;
  const Mat p1 = solve_discrete_lyapunov(acl, ws);
  CHECK(p1(0, 0) == Catch::Approx(4.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("lyapunov requires a contractive closed loop", "[design]") {
  CHECK_THROWS_AS(solve_discrete_lyapunov(Mat::identity(2), Mat::identity(2)),
                  NotContractiveError);
}

TEST_CASE("lyapunov reproduces the paper terminal weight", "[design]") {
  const Mat acl = kA - kB * kK;
  const Mat w = kQ2 + transpose(kK) * (kR1 * kK);
  const Mat p = solve_discrete_lyapunov(acl, w);

  // residual of the defining equation
  CHECK(frob_norm(transpose(acl) * (p * acl) - p + w) <= 1e-8 * frob_norm(p));

  // independent series oracle
  const Mat series = lyapunov_series(acl, w, 400);
  CHECK(frob_norm(p - series) <= 1e-9 * frob_norm(p));

  // frozen exact solution (series oracle value); the two small entries agree
  // with the published rounded matrix to 0.1 as well
  CHECK(p(0, 0) == Catch::Approx(6.739718511621723).epsilon(1e-10));
  CHECK(p(0, 1) == Catch::Approx(22.28282784718318).epsilon(1e-10));
  CHECK(p(1, 1) == Catch::Approx(107.35639028907583).epsilon(1e-10));
  CHECK(std::abs(p(0, 0) - 6.7) <= 0.1);
  CHECK(std::abs(p(0, 1) - 22.2) <= 0.1);
}

TEST_CASE("deadbeat gain trivial cases", "[design]") {
  // already nilpotent plant: gain is zero
  const LinearSystem shift(Mat::from_rows({{0.0, 1.0}, {0.0, 0.0}}),
                           Mat::from_rows({{0.0}, {1.0}}));
  const Mat k0 = deadbeat_gain(shift);
  CHECK(frob_norm(k0) <= 1e-12);

  // scalar plant: one-step deadbeat K = a/b
  const LinearSystem scalar(Mat::from_rows({{0.8}}), Mat::from_rows({{2.0}}));
  const Mat ks = deadbeat_gain(scalar);
  CHECK(ks(0, 0) == Catch::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("deadbeat gain on the paper plant", "[design]") {
  const LinearSystem sys = paper_plant();
  const Mat kdb = deadbeat_gain(sys);
  CHECK(kdb(0, 0) == Catch::Approx(7.658227848101266).epsilon(1e-9));
  CHECK(kdb(0, 1) == Catch::Approx(25.949367088607595).epsilon(1e-9));
  // nilpotency oracle: (A - b K_db)^2 vanishes
  const Mat acl = kA - kB * kdb;
  CHECK(frob_norm(mat_pow(acl, 2)) <= 1e-10);
}

TEST_CASE("riccati gain trivial and scalar closed form", "[design]") {
  const LinearSystem zero(Mat(1, 1), Mat::from_rows({{1.0}}));
  const Mat k0 = riccati_gain(zero, Mat::identity(1), Mat::identity(1));
  CHECK(frob_norm(k0) <= 1e-12);

  // scalar DARE: p = q + a^2 p - a^2 b^2 p^2 / (r + b^2 p), root by bisection
  const double a = 0.5, b = 1.0, q = 1.0, r = 1.0;
  auto g = [&](double p) { return q + a * a * p - a * a * b * b * p * p / (r + b * b * p) - p; };
  double lo = q, hi = 100.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (g(mid) > 0.0 ? lo : hi) = mid;
  }
  const double p_star = 0.5 * (lo + hi);
  const double k_star = b * p_star * a / (r + b * b * p_star);

  const LinearSystem sys(Mat::from_rows({{a}}), Mat::from_rows({{b}}));
  const Mat k = riccati_gain(sys, Mat::from_rows({{q}}), Mat::from_rows({{r}}));
  CHECK(k(0, 0) == Catch::Approx(k_star).epsilon(1e-8));
}

TEST_CASE("riccati gain stabilizes the paper plant", "[design]") {
  const Mat k = riccati_gain(paper_plant(), kQ2, kR1);
  CHECK(spectral_radius_below_one(kA - kB * k));
  // fixed point of its own recursion: P from the Lyapunov solve satisfies the
  // gain equation again
  const Mat w = kQ2 + transpose(k) * (kR1 * k);
  const Mat p = solve_discrete_lyapunov(kA - kB * k, w);
  const Mat pb = p * kB;
  const Mat k2 = solve_linear(kR1 + transpose(kB) * pb, transpose(pb) * kA);
  CHECK(frob_norm(k - k2) <= 1e-7 * frob_norm(k));
}

TEST_CASE("terminal level basic geometry", "[design]") {
  // unit ball in the unit box, free input
  const BoxConstraintSet unit_box({-1.0, -1.0}, {1.0, 1.0}, {-kInf}, {kInf});
  CHECK(terminal_level(Mat::identity(2), Mat(1, 2), unit_box) == Catch::Approx(1.0));

  // axis-aligned: P = diag(4,1), only |x1| <= 1 binds
  const BoxConstraintSet slab({-1.0, -kInf}, {1.0, kInf}, {-kInf}, {kInf});
  const Mat p = Mat::from_rows({{4.0, 0.0}, {0.0, 1.0}});
  CHECK(terminal_level(p, Mat(1, 2), slab) == Catch::Approx(4.0));
}

TEST_CASE("terminal level reports unbounded sets", "[design]") {
  const BoxConstraintSet free2 = BoxConstraintSet::unbounded(2, 1);
  CHECK_THROWS_AS(terminal_level(Mat::identity(2), Mat::from_rows({{1.0, 0.0}}), free2),
                  UnboundedError);
}

TEST_CASE("terminal level matches the closed-form oracle on the paper data", "[design]") {
  const Mat acl = kA - kB * kK;
  const Mat w = kQ2 + transpose(kK) * (kR1 * kK);
  const Mat p = solve_discrete_lyapunov(acl, w);
  const double eps = terminal_level(p, kK, paper_box());

  // cofactor inverse keeps the oracle independent of solve_linear
  const double det = p(0, 0) * p(1, 1) - p(0, 1) * p(1, 0);
  const Mat pinv = Mat::from_rows({{p(1, 1) / det, -p(0, 1) / det},
                                   {-p(1, 0) / det, p(0, 0) / det}});
  const double denom = quad_form(pinv, {kK(0, 0), kK(0, 1)});
  const double oracle = 25.0 / denom;
  CHECK(eps == Catch::Approx(oracle).epsilon(1e-9));
  CHECK(eps >= 4.0);
  CHECK(eps <= 4.3);
}

TEST_CASE("build_design assembles the paper controller", "[design]") {
  const LinearSystem sys = paper_plant();
  const BoxConstraintSet box = paper_box();
  const ControllerDesign d = build_design(sys, box, 8, kQ2, kR1, kK);
  CHECK(d.N == 8);
  CHECK(std::abs(d.P(0, 0) - 6.7) <= 0.1);
  CHECK(std::abs(d.P(0, 1) - 22.2) <= 0.1);
  CHECK(d.eps >= 4.0);
  CHECK(d.eps <= 4.3);

  const DesignValidation v = validate_design(sys, box, d);
  CHECK(v.lyapunov_residual <= 1e-8);
  CHECK(v.nilpotency_residual <= 1e-8);
  CHECK(v.invariance_failures == 0);
  CHECK(v.ok());
}

TEST_CASE("build_design degenerates to the short-horizon scheme at N = n", "[design]") {
  const ControllerDesign d = build_design(paper_plant(), paper_box(), 2, kQ2, kR1, kK);
  CHECK(d.N == 2);
  CHECK(d.eps > 0.0);
}

TEST_CASE("build_design with the deadbeat gain matches the finite-sum oracle", "[design]") {
  const LinearSystem sys = paper_plant();
  const Mat kdb = deadbeat_gain(sys);
  const ControllerDesign d = build_design(sys, paper_box(), 8, kQ2, kR1, kdb);
  // nilpotent closed loop: the series is a finite sum of n terms
  const Mat acl = kA - kB * kdb;
  const Mat w = kQ2 + transpose(kdb) * (kR1 * kdb);
  const Mat finite = lyapunov_series(acl, w, sys.n());
  CHECK(frob_norm(d.P - finite) <= 1e-9 * frob_norm(finite));
}

TEST_CASE("build_design rejects bad inputs", "[design]") {
  CHECK_THROWS_AS(build_design(paper_plant(), paper_box(), 1, kQ2, kR1), DimensionError);
  CHECK_THROWS_AS(build_design(paper_plant(), paper_box(), 8, kQ2, kR1, Mat(1, 2)),
                  NotStabilizingError);  // K = 0 on an unstable plant
}

// --- decoupling -------------------------------------------------------------

TEST_CASE("decouple block-diagonal plants split cleanly", "[design]") {
  // two independent controllable blocks
  const Mat a = Mat::from_rows({{0.5, 1.0, 0.0}, {0.0, 0.5, 0.0}, {0.0, 0.0, 0.8}});
  const Mat b = Mat::from_rows({{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}});
  const DecoupledForm d = decouple(LinearSystem(a, b));
  CHECK(d.q == 2);
  REQUIRE(d.block_dims.size() == 2);
  CHECK(d.block_dims[0] == 2);
  CHECK(d.block_dims[1] == 1);
  CHECK(frob_norm(d.Minv * d.F * d.M - a) <= 1e-9 * frob_norm(a));
  CHECK(frob_norm(d.Minv * d.G - b) <= 1e-9 * std::max(frob_norm(b), 1.0));
}

TEST_CASE("decouple drops redundant inputs", "[design]") {
  const Mat a = Mat::from_rows({{1.1, 2.0}, {0.0, 0.95}});
  Mat b(2, 2);
  const Mat ab = a * kB;
  for (int i = 0; i < 2; ++i) {
    b(i, 0) = kB(i, 0);
    b(i, 1) = ab(i, 0);  // b2 = A b1 adds no new direction
  }
  const DecoupledForm d = decouple(LinearSystem(a, b));
  CHECK(d.q == 1);
  CHECK(d.block_dims[0] == 2);
  CHECK(d.active_inputs[0] == 0);
}

TEST_CASE("decouple of the studied multi-input plant gives one block", "[design]") {
  const Mat a = Mat::from_rows({{1.1, 2.0, -0.4}, {0.0, 0.95, -0.8}, {0.0, 0.1, 1.0}});
  const Mat b = Mat::from_rows({{0.0, 0.0}, {0.079, 0.0}, {-0.1, 0.1}});
  const DecoupledForm d = decouple(LinearSystem(a, b));
  CHECK(d.q == 1);
  CHECK(d.block_dims[0] == 3);
  CHECK(d.active_inputs[0] == 0);
  // similarity invariants
  CHECK(frob_norm(d.Minv * d.F * d.M - a) <= 1e-9 * frob_norm(a));
  CHECK(frob_norm(d.Minv * d.G - b) <= 1e-9 * std::max(frob_norm(b), 1.0));
}

TEST_CASE("build_multi_design produces stabilizing per-block data", "[design]") {
  const Mat a = Mat::from_rows({{1.1, 2.0, -0.4}, {0.0, 0.95, -0.8}, {0.0, 0.1, 1.0}});
  const Mat b = Mat::from_rows({{0.0, 0.0}, {0.079, 0.0}, {-0.1, 0.1}});
  const LinearSystem sys(a, b);
  const BoxConstraintSet box = BoxConstraintSet::input_bound(3, 2, 5.0);
  const MultiDesign md = build_multi_design(sys, box, 8, Mat::identity(3),
                                            0.1 * Mat::identity(2));
  REQUIRE(md.dec.q == 1);
  CHECK(md.epsj[0] > 0.0);
  const Mat fjj = md.dec.F;
  Mat gj(3, 1);
  for (int i = 0; i < 3; ++i) gj(i, 0) = md.dec.G(i, 0);
  CHECK(spectral_radius_below_one(fjj - gj * md.Kj[0]));
  // Lyapunov residual of the block weight
  const Mat acl = fjj - gj * md.Kj[0];
  const Mat w = md.Qj[0] + transpose(md.Kj[0]) * (md.Rj[0] * md.Kj[0]);
  CHECK(frob_norm(transpose(acl) * (md.Pj[0] * acl) - md.Pj[0] + w) <=
        1e-8 * frob_norm(md.Pj[0]));
}

TEST_CASE("build_multi_design shrinks against bounded state boxes", "[design]") {
  // bounded states force the product-invariance sampling path
  const Mat a = Mat::from_rows({{0.5, 1.0, 0.0}, {0.0, 0.5, 0.0}, {0.0, 0.0, 0.8}});
  const Mat b = Mat::from_rows({{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}});
  const LinearSystem sys(a, b);
  const BoxConstraintSet box(Vec(3, -1.0), Vec(3, 1.0), Vec(2, -2.0), Vec(2, 2.0));
  const MultiDesign md = build_multi_design(sys, box, 6, Mat::identity(3),
                                            0.1 * Mat::identity(2));
  // every product boundary sample must stay in the physical box
  for (double e : md.epsj) CHECK(e > 0.0);
}
