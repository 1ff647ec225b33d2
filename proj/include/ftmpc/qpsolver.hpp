#pragma once

#include <cstdint>
#include <optional>

#include "ftmpc/design.hpp"
#include "ftmpc/matrix.hpp"
#include "ftmpc/system.hpp"

namespace ftmpc {

// ---------------------------------------------------------------------------
// Condensed finite-horizon program
//
//   minimize   U' H U + 2 f(x0)' U            (constant term kept separately)
//   subject to per-step input boxes, per-step state boxes on the affine
//              prediction X = F x0 + Phi U + gamma, and one terminal
//              ellipsoid per state block.
//
// The ellipsoid is honored exactly inside the splitting iteration; it is not
// replaced by a polytopic approximation.
// ---------------------------------------------------------------------------

enum class SolveStatus { Optimal, MaxIters, Infeasible };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::MaxIters: return "maxiters";
    case SolveStatus::Infeasible: return "infeasible";
  }
  return "?";
}

struct SolverOptions {
  double rho = 1.0;              // fixed splitting penalty (rows are rescaled instead)
  double eps_abs = 1e-8;
  double eps_rel = 1e-6;
  int max_iters = 20000;
  int divergence_window = 500;   // iterations between divergence checks
  double divergence_floor = 1e-5;
  double feas_tol = 1e-6;        // acceptable constraint violation
  double reg_scale = 1e-9;       // delta_reg = reg_scale * trace(H) / dim
  double feas_delta = 1e-8;      // feasibility-mode objective delta * ||U||^2
  bool polish = true;
};

struct WarmStart {
  Vec U;  // primal seed, length nu
  Vec y;  // scaled dual seed, one entry per constraint row
};

struct SolveResult {
  Vec U_opt;
  Vec X_pred;                  // stacked predicted states x(1..N)
  SolveStatus status = SolveStatus::MaxIters;
  double objective = 0.0;      // U'HU + 2 f'U (x0-constant excluded)
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double max_violation = 0.0;  // of the returned U against all constraints
  bool polished = false;
  Vec duals;                   // scaled multipliers (rho * y), one per row
};

/// Euclidean projection onto { x : x'Px <= eps }. Interior points return
/// unchanged; otherwise x(mu) = V (I + mu*Lambda)^{-1} V' z with mu >= 0 found
/// by safeguarded Newton on g(mu) = x(mu)'P x(mu) - eps, which is strictly
/// decreasing.
namespace detail {

struct EllipsoidProjector {
  Vec lam;
  Mat V;
  double eps = 0.0;

  EllipsoidProjector() = default;
  EllipsoidProjector(const Mat& p, double e, const Tolerances& tol = default_tols()) {
    auto eig = sym_eig(p, tol);
    lam = std::move(eig.values);
    V = std::move(eig.vectors);
    eps = e;
    for (double l : lam)
      if (l <= 0.0) throw NotPositiveDefiniteError("project_ellipsoid: P not positive definite");
    if (!(eps > 0.0)) throw DimensionError("project_ellipsoid: eps must be positive");
  }

  Vec project(const Vec& z) const {
    const int n = static_cast<int>(lam.size());
    Vec w(n, 0.0);
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int r = 0; r < n; ++r) s += V(r, i) * z[r];
      w[i] = s;
    }
    double g0 = -eps;
    for (int i = 0; i < n; ++i) g0 += lam[i] * w[i] * w[i];
    if (g0 <= 0.0) return z;

    auto g = [&](double mu) {
      double s = -eps;
      for (int i = 0; i < n; ++i) {
        const double d = 1.0 + mu * lam[i];
        const double wi = w[i] / d;
        s += lam[i] * wi * wi;
      }
      return s;
    };
    double mu_lo = 0.0, mu_hi = 1.0;
    while (g(mu_hi) > 0.0) mu_hi *= 2.0;
    double mu = 0.5 * mu_hi;
    for (int it = 0; it < 200; ++it) {
      double gv = -eps, dg = 0.0;
      for (int i = 0; i < n; ++i) {
        const double d = 1.0 + mu * lam[i];
        const double wi2 = w[i] * w[i];
        gv += lam[i] * wi2 / (d * d);
        dg += -2.0 * lam[i] * lam[i] * wi2 / (d * d * d);
      }
      if (std::abs(gv) <= 1e-10 * eps) break;
      if (gv > 0.0) mu_lo = mu; else mu_hi = mu;
      const double newton = mu - gv / dg;
      mu = (newton > mu_lo && newton < mu_hi) ? newton : 0.5 * (mu_lo + mu_hi);
    }
    Vec out(n, 0.0);
    for (int i = 0; i < n; ++i) {
      const double wi = w[i] / (1.0 + mu * lam[i]);
      for (int r = 0; r < n; ++r) out[r] += V(r, i) * wi;
    }
    return out;
  }
};

}  // namespace detail

inline Vec project_ellipsoid(const Vec& z, const Mat& p, double eps,
                             const Tolerances& tol = default_tols()) {
  return detail::EllipsoidProjector(p, eps, tol).project(z);
}

// ---------------------------------------------------------------------------
// Stage plan: the generic time-varying description condensed into a program.
// ---------------------------------------------------------------------------

struct StagePlan {
  int N = 0;    // horizon
  int nx = 0;   // predicted-state dimension
  int nu1 = 0;  // decision inputs per step
  std::vector<Mat> A, B;     // N step matrices (x(i+1) = A_i x(i) + B_i u(i) + c_i)
  std::vector<Vec> c;        // optional per-step offsets (empty = zero)
  std::vector<Mat> Qhat;     // N weights for x(1..N); Qhat[N-1] is the terminal weight
  std::vector<Mat> Rhat;     // N weights for u(0..N-1)
  Vec u_lo, u_hi;            // per-coordinate input bounds (replicated each step)
  Vec xb_lo, xb_hi;          // state-box bounds (in transformed coordinates, see T)
  int state_box_first = 1;   // inclusive predicted-step range carrying the box
  int state_box_last = 0;    // 0 disables the state box
  Mat T;                     // optional row transform: bound T * x(i); empty = identity

  struct TerminalEllipsoid {
    int row0 = 0, dim = 0;   // coordinate slice of x(N)
    Mat P;
    double eps = 0.0;        // +inf disables the constraint
  };
  std::vector<TerminalEllipsoid> terminals;
};

struct CondensedProgram {
  // quadratic data
  int N = 0, nx = 0, nu1 = 0, nu = 0, n0 = 0;
  Mat H;            // nu x nu
  Mat f_map;        // nu x n0
  Vec f_const;      // nu
  Mat const_map;    // n0 x n0 (x0' const_map x0 completes the true cost)
  Vec const_lin;    // n0
  double const_scalar = 0.0;
  Mat F, Phi;       // prediction maps, (N*nx) x n0 and (N*nx) x nu
  Vec pred_offset;  // N*nx

  // stage data kept for the forward-simulation cross-check
  std::vector<Mat> A_steps, B_steps;
  std::vector<Vec> c_steps;
  std::vector<Mat> Qhat, Rhat;

  SolverOptions opts;

  // prepared splitting data
  struct RowBlock {
    enum Kind { InputBox, StateBox, Ellipsoid } kind;
    int row0 = 0, rows = 0;
    int stride = 0;      // dual shift stride for warm starts
    int ell = -1;        // index into projectors
  };
  Mat Ms, Ds;          // scaled constraint stack and its x0 map
  Vec d0s;             // scaled constant offsets
  Vec row_scale;       // s_i (scaled row = s_i * original row)
  Vec lo_s, hi_s;      // scaled box bounds (ellipsoid rows carry +-inf)
  std::vector<RowBlock> blocks;
  std::vector<detail::EllipsoidProjector> projectors;
  std::vector<StagePlan::TerminalEllipsoid> terminal_info;  // original terminal data
  CholFactor chol_main;   // 2(H + delta I) + rho Ms'Ms
  CholFactor chol_feas;   // 2 delta_f I + rho Ms'Ms
  double delta_reg = 0.0;

  int total_rows() const { return Ms.rows(); }
};

// ---------------------------------------------------------------------------
// Condensing
// ---------------------------------------------------------------------------

inline CondensedProgram condense(const StagePlan& plan, const SolverOptions& opts = {}) {
  const int N = plan.N, nx = plan.nx, nu1 = plan.nu1;
  if (N < 1 || nx < 1 || nu1 < 1) throw DimensionError("condense: bad plan dimensions");
  if (static_cast<int>(plan.A.size()) != N || static_cast<int>(plan.B.size()) != N)
    throw DimensionError("condense: need N step matrices");
  if (static_cast<int>(plan.Qhat.size()) != N || static_cast<int>(plan.Rhat.size()) != N)
    throw DimensionError("condense: need N weight blocks per signal");

  CondensedProgram prog;
  prog.N = N;
  prog.nx = nx;
  prog.nu1 = nu1;
  prog.nu = N * nu1;
  prog.n0 = nx;
  prog.opts = opts;
  prog.A_steps = plan.A;
  prog.B_steps = plan.B;
  prog.c_steps = plan.c.empty() ? std::vector<Vec>(N) : plan.c;
  prog.Qhat = plan.Qhat;
  prog.Rhat = plan.Rhat;

  // prediction maps by forward recursion:
  //   x(i) = Fi x0 + sum_j Phi_ij u(j) + gamma_i
  prog.F = Mat(N * nx, nx);
  prog.Phi = Mat(N * nx, prog.nu);
  prog.pred_offset.assign(N * nx, 0.0);
  Mat Fi = Mat::identity(nx);
  Mat Phii(nx, prog.nu);
  Vec gi(nx, 0.0);
  for (int i = 0; i < N; ++i) {
    Fi = plan.A[i] * Fi;
    Phii = plan.A[i] * Phii;
    Phii.set_block(0, i * nu1, plan.B[i]);
    gi = plan.A[i] * gi;
    if (!prog.c_steps[i].empty())
      for (int r = 0; r < nx; ++r) gi[r] += prog.c_steps[i][r];
    prog.F.set_block(i * nx, 0, Fi);
    prog.Phi.set_block(i * nx, 0, Phii);
    for (int r = 0; r < nx; ++r) prog.pred_offset[i * nx + r] = gi[r];
  }

  // H = Phi' Qhat Phi + Rhat, f = Phi' Qhat (F x0 + gamma)
  Mat qphi(N * nx, prog.nu);   // Qhat * Phi
  Mat qf(N * nx, nx);          // Qhat * F
  Vec qg(N * nx, 0.0);
  for (int i = 0; i < N; ++i) {
    const Mat& qb = plan.Qhat[i];
    if (frob_norm(qb) == 0.0) continue;
    qphi.set_block(i * nx, 0, qb * prog.Phi.block(i * nx, 0, nx, prog.nu));
    qf.set_block(i * nx, 0, qb * prog.F.block(i * nx, 0, nx, nx));
    Vec seg(nx);
    for (int r = 0; r < nx; ++r) seg[r] = prog.pred_offset[i * nx + r];
    const Vec qs = qb * seg;
    for (int r = 0; r < nx; ++r) qg[i * nx + r] = qs[r];
  }
  const Mat phit = transpose(prog.Phi);
  prog.H = phit * qphi;
  for (int i = 0; i < N; ++i) prog.H.set_block(i * nu1, i * nu1,
      prog.H.block(i * nu1, i * nu1, nu1, nu1) + plan.Rhat[i]);
  // enforce exact symmetry against round-off
  for (int i = 0; i < prog.nu; ++i)
    for (int j = i + 1; j < prog.nu; ++j) {
      const double v = 0.5 * (prog.H(i, j) + prog.H(j, i));
      prog.H(i, j) = prog.H(j, i) = v;
    }
  prog.f_map = phit * qf;
  prog.f_const = phit * qg;
  const Mat ft = transpose(prog.F);
  prog.const_map = ft * qf;
  prog.const_lin = 2.0 * (ft * qg);
  prog.const_scalar = dot(prog.pred_offset, qg);

  // positive definiteness of H is part of the build contract
  (void)CholFactor::compute(prog.H);

  // ---- constraint stack -----------------------------------------------
  std::vector<Vec> rows, drows;
  Vec d0rows, lo, hi;
  auto push_row = [&](Vec cu, Vec dx, double d0, double l, double h) {
    rows.push_back(std::move(cu));
    drows.push_back(std::move(dx));
    d0rows.push_back(d0);
    lo.push_back(l);
    hi.push_back(h);
  };

  // input box first: identity rows anchor the consensus copy of U
  CondensedProgram::RowBlock ib;
  ib.kind = CondensedProgram::RowBlock::InputBox;
  ib.row0 = 0;
  ib.rows = prog.nu;
  ib.stride = nu1;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < nu1; ++j) {
      Vec cu(prog.nu, 0.0);
      cu[i * nu1 + j] = 1.0;
      push_row(std::move(cu), Vec(nx, 0.0), 0.0, plan.u_lo[j], plan.u_hi[j]);
    }
  prog.blocks.push_back(ib);

  // state box rows
  bool any_state = false;
  if (plan.state_box_last >= plan.state_box_first) {
    for (double v : plan.xb_lo) if (std::isfinite(v)) any_state = true;
    for (double v : plan.xb_hi) if (std::isfinite(v)) any_state = true;
  }
  if (any_state) {
    const Mat& t = plan.T;
    const bool has_t = !t.empty();
    const int rows_per_step = has_t ? t.rows() : nx;
    CondensedProgram::RowBlock sb;
    sb.kind = CondensedProgram::RowBlock::StateBox;
    sb.row0 = static_cast<int>(rows.size());
    sb.stride = rows_per_step;
    for (int step = plan.state_box_first; step <= plan.state_box_last; ++step) {
      for (int r = 0; r < rows_per_step; ++r) {
        if (!std::isfinite(plan.xb_lo[r]) && !std::isfinite(plan.xb_hi[r])) continue;
        Vec cu(prog.nu, 0.0), dx(nx, 0.0);
        double d0 = 0.0;
        for (int c = 0; c < nx; ++c) {
          const double w = has_t ? t(r, c) : (r == c ? 1.0 : 0.0);
          if (w == 0.0) continue;
          const int prow = (step - 1) * nx + c;
          for (int u = 0; u < prog.nu; ++u) cu[u] += w * prog.Phi(prow, u);
          for (int x = 0; x < nx; ++x) dx[x] += w * prog.F(prow, x);
          d0 += w * prog.pred_offset[prow];
        }
        push_row(std::move(cu), std::move(dx), d0, plan.xb_lo[r], plan.xb_hi[r]);
      }
    }
    sb.rows = static_cast<int>(rows.size()) - sb.row0;
    if (sb.rows > 0) prog.blocks.push_back(sb);
  }

  // terminal ellipsoids on x(N) slices
  for (const auto& te : plan.terminals) {
    if (!std::isfinite(te.eps)) continue;
    CondensedProgram::RowBlock eb;
    eb.kind = CondensedProgram::RowBlock::Ellipsoid;
    eb.row0 = static_cast<int>(rows.size());
    eb.rows = te.dim;
    eb.stride = 0;
    eb.ell = static_cast<int>(prog.projectors.size());
    for (int r = 0; r < te.dim; ++r) {
      const int prow = (N - 1) * nx + te.row0 + r;
      Vec cu(prog.nu), dx(nx);
      for (int u = 0; u < prog.nu; ++u) cu[u] = prog.Phi(prow, u);
      for (int x = 0; x < nx; ++x) dx[x] = prog.F(prow, x);
      push_row(std::move(cu), std::move(dx), prog.pred_offset[prow], -kInf, kInf);
    }
    prog.blocks.push_back(eb);
    prog.terminal_info.push_back(te);
    prog.projectors.emplace_back();  // filled after scaling
  }

  // ---- row scaling and factorizations -----------------------------------
  const int nrows = static_cast<int>(rows.size());
  prog.Ms = Mat(nrows, prog.nu);
  prog.Ds = Mat(nrows, nx);
  prog.d0s.assign(nrows, 0.0);
  prog.row_scale.assign(nrows, 1.0);
  prog.lo_s.assign(nrows, -kInf);
  prog.hi_s.assign(nrows, kInf);
  for (int i = 0; i < nrows; ++i) {
    double nrm = norm2(rows[i]);
    const double s = 1.0 / std::max(nrm, 1e-12);
    prog.row_scale[i] = s;
    for (int j = 0; j < prog.nu; ++j) prog.Ms(i, j) = s * rows[i][j];
    for (int j = 0; j < nx; ++j) prog.Ds(i, j) = s * drows[i][j];
    prog.d0s[i] = s * d0rows[i];
    prog.lo_s[i] = lo[i] * s;
    prog.hi_s[i] = hi[i] * s;
  }
  // scaled ellipsoids: z_scaled = S (C U + ...), so P_scaled = S^{-1} P S^{-1}
  {
    int next_ell = 0;
    for (const auto& blk : prog.blocks) {
      if (blk.kind != CondensedProgram::RowBlock::Ellipsoid) continue;
      const auto& te = prog.terminal_info[next_ell];
      Mat pscaled(te.dim, te.dim);
      for (int i = 0; i < te.dim; ++i)
        for (int j = 0; j < te.dim; ++j)
          pscaled(i, j) = te.P(i, j) / (prog.row_scale[blk.row0 + i] * prog.row_scale[blk.row0 + j]);
      prog.projectors[next_ell] = detail::EllipsoidProjector(pscaled, te.eps);
      ++next_ell;
    }
  }

  Mat mtm = transpose(prog.Ms) * prog.Ms;
  double tr = 0.0;
  for (int i = 0; i < prog.nu; ++i) tr += prog.H(i, i);
  prog.delta_reg = opts.reg_scale * tr / prog.nu;
  Mat g_main = 2.0 * prog.H + opts.rho * mtm;
  Mat g_feas = opts.rho * mtm;
  for (int i = 0; i < prog.nu; ++i) {
    g_main(i, i) += 2.0 * prog.delta_reg;
    g_feas(i, i) += 2.0 * opts.feas_delta;
  }
  prog.chol_main = CholFactor::compute(g_main);
  prog.chol_feas = CholFactor::compute(g_feas);
  return prog;
}

/// Condensed program for a single-input design: F stacks A..A^N, Phi is the
/// lower block-Toeplitz response, the stage weights follow the shifted window
/// (zero for predicted steps 1..n-1 and inputs 0..n-1, Q and R afterwards, P
/// terminally) and the terminal ellipsoid (P, eps) binds x(N).
inline CondensedProgram build_condensed(const LinearSystem& sys, const BoxConstraintSet& box,
                                        const ControllerDesign& d, const SolverOptions& opts = {}) {
  const int n = sys.n(), N = d.N;
  if (N < n) throw DimensionError("build_condensed: horizon below state dimension");
  StagePlan plan;
  plan.N = N;
  plan.nx = n;
  plan.nu1 = sys.m();
  plan.A.assign(N, sys.A());
  plan.B.assign(N, sys.B());
  plan.Qhat.resize(N);
  plan.Rhat.resize(N);
  for (int i = 1; i <= N; ++i)
    plan.Qhat[i - 1] = (i == N) ? d.P : (i >= n ? d.Q : Mat(n, n));
  for (int i = 0; i < N; ++i)
    plan.Rhat[i] = (i >= n) ? d.R : Mat(sys.m(), sys.m());
  plan.u_lo = box.u_lo();
  plan.u_hi = box.u_hi();
  plan.xb_lo = box.x_lo();
  plan.xb_hi = box.x_hi();
  plan.state_box_first = 1;
  plan.state_box_last = N - 1;
  plan.terminals.push_back({0, n, d.P, d.eps});
  return condense(plan, opts);
}

/// Joint condensed program over the decoupled coordinates: decision variables
/// are the stacked active inputs, state boxes act through M^{-1} (exact, not
/// an interval relaxation), and each block carries its own terminal
/// ellipsoid. The program parameter is z0 = M x.
inline CondensedProgram build_condensed_multi(const MultiDesign& md, const BoxConstraintSet& box,
                                              const SolverOptions& opts = {}) {
  const DecoupledForm& dec = md.dec;
  const int n = dec.F.rows();
  const int q = dec.q;
  const int N = md.N;
  StagePlan plan;
  plan.N = N;
  plan.nx = n;
  plan.nu1 = q;
  Mat g_active(n, q);
  for (int j = 0; j < q; ++j)
    for (int i = 0; i < n; ++i) g_active(i, j) = dec.G(i, dec.active_inputs[j]);
  plan.A.assign(N, dec.F);
  plan.B.assign(N, g_active);
  plan.Qhat.resize(N);
  plan.Rhat.resize(N);
  for (int i = 1; i <= N; ++i) {
    Mat qb(n, n);
    for (int j = 0; j < q; ++j) {
      const int off = dec.block_offsets[j], nj = dec.block_dims[j];
      if (i == N) qb.set_block(off, off, md.Pj[j]);
      else if (i >= nj) qb.set_block(off, off, md.Qj[j]);
    }
    plan.Qhat[i - 1] = qb;
  }
  for (int i = 0; i < N; ++i) {
    Mat rb(q, q);
    for (int j = 0; j < q; ++j)
      if (i >= dec.block_dims[j]) rb(j, j) = md.Rj[j](0, 0);
    plan.Rhat[i] = rb;
  }
  plan.u_lo.resize(q);
  plan.u_hi.resize(q);
  for (int j = 0; j < q; ++j) {
    plan.u_lo[j] = box.u_lo()[dec.active_inputs[j]];
    plan.u_hi[j] = box.u_hi()[dec.active_inputs[j]];
  }
  plan.xb_lo = box.x_lo();
  plan.xb_hi = box.x_hi();
  plan.state_box_first = 1;
  plan.state_box_last = N - 1;
  plan.T = dec.Minv;  // bound x = M^{-1} z by the physical state box
  for (int j = 0; j < q; ++j)
    plan.terminals.push_back({dec.block_offsets[j], dec.block_dims[j], md.Pj[j], md.epsj[j]});
  return condense(plan, opts);
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

namespace detail {

inline void project_rows(const CondensedProgram& prog, const Vec& t, Vec& z) {
  const int nrows = prog.total_rows();
  for (int i = 0; i < nrows; ++i)
    z[i] = std::min(std::max(t[i], prog.lo_s[i]), prog.hi_s[i]);
  for (const auto& blk : prog.blocks) {
    if (blk.kind != CondensedProgram::RowBlock::Ellipsoid) continue;
    Vec seg(t.begin() + blk.row0, t.begin() + blk.row0 + blk.rows);
    const Vec pr = prog.projectors[blk.ell].project(seg);
    for (int i = 0; i < blk.rows; ++i) z[blk.row0 + i] = pr[i];
  }
}

// constraint violation of a candidate U in original (unscaled) units
inline double violation_of(const CondensedProgram& prog, const Vec& x0, const Vec& u) {
  double worst = 0.0;
  const Vec v = prog.Ms * u;
  for (int i = 0; i < prog.total_rows(); ++i) {
    double val = v[i] + prog.d0s[i];
    for (int j = 0; j < prog.n0; ++j) val += prog.Ds(i, j) * x0[j];
    const double s = prog.row_scale[i];
    if (std::isfinite(prog.lo_s[i])) worst = std::max(worst, (prog.lo_s[i] - val) / s);
    if (std::isfinite(prog.hi_s[i])) worst = std::max(worst, (val - prog.hi_s[i]) / s);
  }
  int next_ell = 0;
  for (const auto& blk : prog.blocks) {
    if (blk.kind != CondensedProgram::RowBlock::Ellipsoid) continue;
    const auto& te = prog.terminal_info[next_ell];
    Vec seg(blk.rows);
    for (int i = 0; i < blk.rows; ++i) {
      double val = v[blk.row0 + i] + prog.d0s[blk.row0 + i];
      for (int j = 0; j < prog.n0; ++j) val += prog.Ds(blk.row0 + i, j) * x0[j];
      seg[i] = val / prog.row_scale[blk.row0 + i];
    }
    worst = std::max(worst, quad_form(te.P, seg) - te.eps);
    ++next_ell;
  }
  return worst;
}

// Equality-constrained polish on the detected active set; requires every
// ellipsoid inactive. Returns true when the refined point is feasible with
// consistently signed multipliers.
inline bool try_polish(const CondensedProgram& prog, const Vec& x0, const Vec& f,
                       const Vec& z, const Vec& y, Vec& u_out) {
  const double act_tol = 1e-7;
  struct Active { int row; bool upper; };
  std::vector<Active> act;
  for (const auto& blk : prog.blocks) {
    if (blk.kind == CondensedProgram::RowBlock::Ellipsoid) {
      // bail out if the ellipsoid constraint is (near) active
      Vec seg(blk.rows);
      for (int i = 0; i < blk.rows; ++i) seg[i] = z[blk.row0 + i] / prog.row_scale[blk.row0 + i];
      const auto& te = prog.terminal_info[blk.ell];
      if (quad_form(te.P, seg) >= te.eps * (1.0 - 1e-9)) return false;
      continue;
    }
    for (int i = blk.row0; i < blk.row0 + blk.rows; ++i) {
      const bool at_hi = std::isfinite(prog.hi_s[i]) &&
                         (prog.hi_s[i] - z[i] <= act_tol * (1.0 + std::abs(prog.hi_s[i])) || y[i] > act_tol);
      const bool at_lo = std::isfinite(prog.lo_s[i]) &&
                         (z[i] - prog.lo_s[i] <= act_tol * (1.0 + std::abs(prog.lo_s[i])) || y[i] < -act_tol);
      if (at_hi && !at_lo) act.push_back({i, true});
      else if (at_lo && !at_hi) act.push_back({i, false});
      else if (at_hi && at_lo) return false;   // pinned interval; leave to the splitting
    }
  }

  const int nu = prog.nu;
  for (int pass = 0; pass < 3; ++pass) {
    const int na = static_cast<int>(act.size());
    Mat kkt(nu + na, nu + na);
    Vec rhs(nu + na, 0.0);
    for (int i = 0; i < nu; ++i) {
      for (int j = 0; j < nu; ++j) kkt(i, j) = 2.0 * prog.H(i, j);
      rhs[i] = -2.0 * f[i];
    }
    for (int a = 0; a < na; ++a) {
      const int row = act[a].row;
      const double s = prog.row_scale[row];
      for (int j = 0; j < nu; ++j) {
        kkt(nu + a, j) = prog.Ms(row, j) / s;
        kkt(j, nu + a) = prog.Ms(row, j) / s;
      }
      double off = prog.d0s[row] / s;
      for (int j = 0; j < prog.n0; ++j) off += prog.Ds(row, j) / s * x0[j];
      rhs[nu + a] = (act[a].upper ? prog.hi_s[row] : prog.lo_s[row]) / s - off;
    }
    Vec sol;
    try {
      sol = solve_linear(kkt, rhs);
    } catch (const SingularMatrixError&) {
      return false;
    }
    Vec u(sol.begin(), sol.begin() + nu);
    // multiplier signs: upper-active rows push down (nu >= 0), lower-active up
    std::vector<Active> keep;
    bool signs_ok = true;
    for (int a = 0; a < na; ++a) {
      const double lam = sol[nu + a];
      const bool ok = act[a].upper ? lam >= -1e-9 * (1.0 + std::abs(lam))
                                   : lam <= 1e-9 * (1.0 + std::abs(lam));
      if (ok) keep.push_back(act[a]);
      else signs_ok = false;
    }
    if (!signs_ok) {
      act = std::move(keep);
      continue;
    }
    if (violation_of(prog, x0, u) > 1e-9) return false;
    u_out = std::move(u);
    return true;
  }
  return false;
}

}  // namespace detail

/// Operator-splitting solve of the condensed program at parameter x0. The
/// quadratic step reuses the factorization computed at build time; the
/// constraint step is a closed-form projection (coordinate clamps plus exact
/// ellipsoid projections). A warm start seeds both the primal iterate and the
/// scaled duals. `feasibility_mode` swaps the objective for a small
/// regularizer so only constraint satisfaction matters.
inline SolveResult solve(const CondensedProgram& prog, const Vec& x0,
                         const WarmStart* warm = nullptr, bool feasibility_mode = false) {
  if (static_cast<int>(x0.size()) != prog.n0) throw DimensionError("solve: x0 dimension mismatch");
  const SolverOptions& o = prog.opts;
  const int nu = prog.nu;
  const int nrows = prog.total_rows();

  Vec f(nu, 0.0);
  if (!feasibility_mode) {
    f = prog.f_map * x0;
    for (int i = 0; i < nu; ++i) f[i] += prog.f_const[i];
  }
  Vec mrow = prog.Ds * x0;
  for (int i = 0; i < nrows; ++i) mrow[i] += prog.d0s[i];

  Vec u(nu, 0.0), y(nrows, 0.0);
  if (warm && static_cast<int>(warm->U.size()) == nu) u = warm->U;
  if (warm && static_cast<int>(warm->y.size()) == nrows) y = warm->y;

  Vec v = prog.Ms * u;
  for (int i = 0; i < nrows; ++i) v[i] += mrow[i];
  Vec z(nrows);
  detail::project_rows(prog, v, z);

  const CholFactor& chol = feasibility_mode ? prog.chol_feas : prog.chol_main;
  const double rho = o.rho;

  SolveStatus status = SolveStatus::MaxIters;
  int it = 0;
  double rp = kInf, rd = kInf;
  double window_best = kInf, prev_window_best = kInf, prev_ynorm = 0.0;
  Vec rhs(nu), t(nrows), zn(nrows), grad(nu);

  for (it = 1; it <= o.max_iters; ++it) {
    // U-step: (2(H+delta) + rho M'M) U = -2f - rho M'(m - z + y)
    for (int i = 0; i < nrows; ++i) t[i] = mrow[i] - z[i] + y[i];
    for (int j = 0; j < nu; ++j) {
      double s = -2.0 * f[j];
      for (int i = 0; i < nrows; ++i) s -= rho * prog.Ms(i, j) * t[i];
      rhs[j] = s;
    }
    u = rhs;
    chol.solve_inplace(u);

    // projection step
    v = prog.Ms * u;
    for (int i = 0; i < nrows; ++i) { v[i] += mrow[i]; t[i] = v[i] + y[i]; }
    detail::project_rows(prog, t, zn);

    rp = 0.0;
    for (int i = 0; i < nrows; ++i) rp = std::max(rp, std::abs(v[i] - zn[i]));
    rd = 0.0;
    for (int j = 0; j < nu; ++j) {
      double s = 0.0;
      for (int i = 0; i < nrows; ++i) s += prog.Ms(i, j) * (zn[i] - z[i]);
      rd = std::max(rd, rho * std::abs(s));
    }
    z.swap(zn);
    for (int i = 0; i < nrows; ++i) y[i] += v[i] - z[i];

    double vmax = 0.0, zmax = 0.0;
    for (int i = 0; i < nrows; ++i) {
      vmax = std::max(vmax, std::abs(v[i]));
      zmax = std::max(zmax, std::abs(z[i]));
    }
    double gscale = 1.0;
    if (!feasibility_mode) {
      grad = prog.H * u;
      for (int j = 0; j < nu; ++j) gscale = std::max(gscale, std::abs(2.0 * grad[j] + 2.0 * f[j]));
    }
    if (rp <= o.eps_abs + o.eps_rel * std::max(vmax, zmax) &&
        rd <= o.eps_abs + o.eps_rel * gscale) {
      status = SolveStatus::Optimal;
      break;
    }

    window_best = std::min(window_best, rp);
    if (it % o.divergence_window == 0) {
      double yn = 0.0;
      for (int i = 0; i < nrows; ++i) yn = std::max(yn, std::abs(y[i]));
      if (window_best >= 0.999 * prev_window_best && yn > 1.05 * prev_ynorm &&
          window_best > o.divergence_floor) {
        status = SolveStatus::Infeasible;
        break;
      }
      prev_window_best = window_best;
      window_best = kInf;
      prev_ynorm = yn;
    }
  }
  if (it > o.max_iters) it = o.max_iters;

  SolveResult res;
  res.status = status;
  res.iterations = it;
  res.primal_residual = rp;
  res.dual_residual = rd;
  res.duals.assign(nrows, 0.0);
  for (int i = 0; i < nrows; ++i) res.duals[i] = rho * y[i];

  // return the feasible consensus copy of the inputs
  Vec u_ret(nu);
  if (status == SolveStatus::Infeasible) {
    u_ret = u;
  } else {
    const auto& ib = prog.blocks.front();
    for (int i = 0; i < nu; ++i) u_ret[i] = z[ib.row0 + i] / prog.row_scale[ib.row0 + i];
  }
  if (status == SolveStatus::Optimal && !feasibility_mode && o.polish) {
    Vec up;
    if (detail::try_polish(prog, x0, f, z, y, up)) {
      // clamp to the input box to remove round-off overshoot
      const auto& ib = prog.blocks.front();
      for (int i = 0; i < nu; ++i) {
        const double lo = prog.lo_s[ib.row0 + i] / prog.row_scale[ib.row0 + i];
        const double hi = prog.hi_s[ib.row0 + i] / prog.row_scale[ib.row0 + i];
        up[i] = std::min(std::max(up[i], lo), hi);
      }
      u_ret = std::move(up);
      res.polished = true;
    }
  }
  res.U_opt = u_ret;
  res.X_pred = prog.F * x0 + prog.Phi * u_ret + prog.pred_offset;
  if (!feasibility_mode) {
    const Vec hu = prog.H * u_ret;
    res.objective = dot(u_ret, hu) + 2.0 * dot(f, u_ret);
  }
  res.max_violation = detail::violation_of(prog, x0, u_ret);
  return res;
}

/// Feasibility probe: replaces the objective by delta ||U||^2 so only
/// constraint satisfaction matters; true iff the splitting converges with
/// violation within tolerance.
inline bool check_feasible(const CondensedProgram& prog, const Vec& x0) {
  const SolveResult r = solve(prog, x0, nullptr, /*feasibility_mode=*/true);
  return r.status == SolveStatus::Optimal && r.max_violation <= prog.opts.feas_tol;
}

/// Evaluates the stage-cost window by forward simulation of the stored step
/// dynamics; used to cross-check the condensed quadratic form.
inline double true_cost(const CondensedProgram& prog, const Vec& x0, const Vec& u_seq) {
  if (static_cast<int>(u_seq.size()) != prog.nu) throw DimensionError("true_cost: U length mismatch");
  Vec x = x0;
  double cost = 0.0;
  for (int i = 0; i < prog.N; ++i) {
    Vec ui(u_seq.begin() + i * prog.nu1, u_seq.begin() + (i + 1) * prog.nu1);
    cost += quad_form(prog.Rhat[i], ui);
    Vec xn = prog.A_steps[i] * x + prog.B_steps[i] * ui;
    if (!prog.c_steps[i].empty())
      for (int r = 0; r < prog.nx; ++r) xn[r] += prog.c_steps[i][r];
    x = std::move(xn);
    cost += quad_form(prog.Qhat[i], x);
  }
  return cost;
}

/// Full shifted-window cost at the program parameter, constant term included.
inline double full_cost(const CondensedProgram& prog, const Vec& x0, const Vec& u_seq) {
  const Vec hu = prog.H * u_seq;
  const Vec fl = prog.f_map * x0 + prog.f_const;
  return dot(u_seq, hu) + 2.0 * dot(fl, u_seq) + quad_form(prog.const_map, x0) +
         dot(prog.const_lin, x0) + prog.const_scalar;
}

struct KktResiduals {
  double stationarity = 0.0;
  double primal = 0.0;
  double comp_slack = 0.0;
};

/// KKT diagnostics of a returned solution (scaled-row multipliers).
inline KktResiduals kkt_residuals(const CondensedProgram& prog, const Vec& x0,
                                  const SolveResult& res) {
  KktResiduals k;
  const Vec f = prog.f_map * x0 + prog.f_const;
  Vec g = prog.H * res.U_opt;
  for (int j = 0; j < prog.nu; ++j) g[j] = 2.0 * g[j] + 2.0 * f[j];
  for (int i = 0; i < prog.total_rows(); ++i)
    for (int j = 0; j < prog.nu; ++j) g[j] += prog.Ms(i, j) * res.duals[i];
  k.stationarity = norm_inf(g);
  k.primal = std::max(res.max_violation, 0.0);
  Vec vals = prog.Ms * res.U_opt;
  for (int i = 0; i < prog.total_rows(); ++i) {
    double val = vals[i] + prog.d0s[i];
    for (int j = 0; j < prog.n0; ++j) val += prog.Ds(i, j) * x0[j];
    vals[i] = val;
  }
  for (const auto& blk : prog.blocks) {
    if (blk.kind == CondensedProgram::RowBlock::Ellipsoid) {
      const auto& te = prog.terminal_info[blk.ell];
      Vec seg(blk.rows);
      double ydotz = 0.0;
      for (int i = 0; i < blk.rows; ++i) {
        seg[i] = vals[blk.row0 + i] / prog.row_scale[blk.row0 + i];
        ydotz += res.duals[blk.row0 + i] * vals[blk.row0 + i];
      }
      const double qf = quad_form(te.P, seg);
      const double mu = qf > 0.0 ? ydotz / (2.0 * qf) : 0.0;
      k.comp_slack = std::max(k.comp_slack, std::abs(mu * (qf - te.eps)));
      continue;
    }
    for (int i = blk.row0; i < blk.row0 + blk.rows; ++i) {
      const double lam = res.duals[i];
      if (lam > 0.0 && std::isfinite(prog.hi_s[i]))
        k.comp_slack = std::max(k.comp_slack, lam * std::max(prog.hi_s[i] - vals[i], 0.0));
      else if (lam < 0.0 && std::isfinite(prog.lo_s[i]))
        k.comp_slack = std::max(k.comp_slack, -lam * std::max(vals[i] - prog.lo_s[i], 0.0));
    }
  }
  return k;
}

/// Shifts a warm start by one receding-horizon step: drops the first input
/// block, appends `tail_input`, and shifts the duals inside each row block by
/// its stride.
inline WarmStart shift_warm_start(const CondensedProgram& prog, const SolveResult& prev,
                                  const Vec& tail_input) {
  WarmStart w;
  w.U.assign(prog.nu, 0.0);
  for (int i = 0; i + prog.nu1 < prog.nu; ++i) w.U[i] = prev.U_opt[i + prog.nu1];
  for (int j = 0; j < prog.nu1; ++j) w.U[prog.nu - prog.nu1 + j] = tail_input[j];
  w.y.assign(prog.total_rows(), 0.0);
  for (const auto& blk : prog.blocks) {
    for (int i = 0; i < blk.rows; ++i) {
      const int src = i + blk.stride;
      w.y[blk.row0 + i] =
          (blk.stride > 0 && src < blk.rows) ? prev.duals[blk.row0 + src] / prog.opts.rho
          : (blk.stride == 0 ? prev.duals[blk.row0 + i] / prog.opts.rho : 0.0);
    }
  }
  return w;
}

}  // namespace ftmpc
