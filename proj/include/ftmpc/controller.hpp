#pragma once

#include <functional>

#include "ftmpc/qpsolver.hpp"

namespace ftmpc {

// ---------------------------------------------------------------------------
// Receding-horizon controllers: linear single-input, multi-input via the
// decoupled form, and nonlinear via sequential quadratic subproblems.
// ---------------------------------------------------------------------------

struct ControlStep {
  Vec u;                    // applied input (first block of the optimizer)
  double predicted_cost = 0.0;  // full shifted-window cost at the solution
  SolveStatus status = SolveStatus::MaxIters;
  int solve_iterations = 0;
};

struct LinearWarmState {
  WarmStart ws;
  bool valid = false;
};

/// One receding-horizon step: solve at x (warm-started with the shifted
/// previous solution, tail-padded by -K x_pred(N)) and return the first input
/// block. Throws InfeasibleAtStateError when the solver certifies
/// infeasibility; the caller decides how to proceed.
inline ControlStep lin_step(const CondensedProgram& prog, const ControllerDesign& design,
                            const Vec& x, LinearWarmState& warm) {
  const SolveResult res = solve(prog, x, warm.valid ? &warm.ws : nullptr);
  if (res.status == SolveStatus::Infeasible)
    throw InfeasibleAtStateError("lin_step: solver certified infeasibility at the measured state");
  ControlStep step;
  step.u.assign(res.U_opt.begin(), res.U_opt.begin() + prog.nu1);
  step.status = res.status;
  step.solve_iterations = res.iterations;
  step.predicted_cost = full_cost(prog, x, res.U_opt);
  Vec x_terminal(res.X_pred.end() - prog.nx, res.X_pred.end());
  const Vec tail = -1.0 * (design.K * x_terminal);
  warm.ws = shift_warm_start(prog, res, tail);
  warm.valid = true;
  return step;
}

/// Multi-input step in decoupled coordinates: transforms z = Mx, solves the
/// joint program over the active inputs, and embeds the result into the
/// physical input vector with exact zeros on the inactive channels.
inline ControlStep mi_step(const MultiDesign& md, const CondensedProgram& prog_z,
                           const Vec& x, LinearWarmState& warm, int m_total) {
  const Vec z0 = md.dec.M * x;
  const SolveResult res = solve(prog_z, z0, warm.valid ? &warm.ws : nullptr);
  if (res.status == SolveStatus::Infeasible)
    throw InfeasibleAtStateError("mi_step: solver certified infeasibility at the measured state");
  ControlStep step;
  step.u.assign(m_total, 0.0);
  for (int j = 0; j < md.dec.q; ++j) step.u[md.dec.active_inputs[j]] = res.U_opt[j];
  step.status = res.status;
  step.solve_iterations = res.iterations;
  step.predicted_cost = full_cost(prog_z, z0, res.U_opt);
  Vec z_terminal(res.X_pred.end() - prog_z.nx, res.X_pred.end());
  Vec tail(md.dec.q, 0.0);
  for (int j = 0; j < md.dec.q; ++j) {
    const int off = md.dec.block_offsets[j];
    double s = 0.0;
    for (int i = 0; i < md.dec.block_dims[j]; ++i) s += md.Kj[j](0, i) * z_terminal[off + i];
    tail[j] = -s;
  }
  warm.ws = shift_warm_start(prog_z, res, tail);
  warm.valid = true;
  return step;
}

/// Fidelity variant of the multi-input step: blocks are solved one at a time
/// from the last (self-contained) block upward, each seeing the previously
/// solved inputs as fixed exogenous offsets. The joint solve is never more
/// conservative; this mode mirrors the block-wise convergence argument and is
/// kept for comparison experiments.
inline ControlStep mi_step_peeled(const MultiDesign& md, const BoxConstraintSet& box,
                                  const Vec& x, int m_total, const SolverOptions& opts = {}) {
  const DecoupledForm& dec = md.dec;
  const int n = dec.F.rows();
  const int N = md.N;
  const Vec z0 = dec.M * x;

  std::vector<Vec> fixed_inputs(dec.q);  // per block, length N (scalar inputs)
  ControlStep step;
  step.u.assign(m_total, 0.0);
  step.status = SolveStatus::Optimal;
  step.predicted_cost = 0.0;

  for (int j = dec.q - 1; j >= 0; --j) {
    StagePlan plan;
    plan.N = N;
    plan.nx = n;
    plan.nu1 = 1;
    Mat gj(n, 1);
    for (int i = 0; i < n; ++i) gj(i, 0) = dec.G(i, dec.active_inputs[j]);
    plan.A.assign(N, dec.F);
    plan.B.assign(N, gj);
    plan.c.resize(N);
    for (int i = 0; i < N; ++i) {
      Vec ci(n, 0.0);
      for (int l = j + 1; l < dec.q; ++l) {
        const double ul = fixed_inputs[l][i];
        for (int r = 0; r < n; ++r) ci[r] += dec.G(r, dec.active_inputs[l]) * ul;
      }
      plan.c[i] = std::move(ci);
    }
    plan.Qhat.resize(N);
    plan.Rhat.resize(N);
    const int off = dec.block_offsets[j], nj = dec.block_dims[j];
    for (int i = 1; i <= N; ++i) {
      Mat qb(n, n);
      if (i == N) qb.set_block(off, off, md.Pj[j]);
      else if (i >= nj) qb.set_block(off, off, md.Qj[j]);
      plan.Qhat[i - 1] = qb;
    }
    for (int i = 0; i < N; ++i) {
      Mat rb(1, 1);
      if (i >= nj) rb(0, 0) = md.Rj[j](0, 0);
      plan.Rhat[i] = rb;
    }
    plan.u_lo = {box.u_lo()[dec.active_inputs[j]]};
    plan.u_hi = {box.u_hi()[dec.active_inputs[j]]};
    plan.xb_lo = box.x_lo();
    plan.xb_hi = box.x_hi();
    plan.state_box_first = 1;
    plan.state_box_last = N - 1;
    plan.T = dec.Minv;
    plan.terminals.push_back({off, nj, md.Pj[j], md.epsj[j]});

    const CondensedProgram prog = condense(plan, opts);
    const SolveResult res = solve(prog, z0);
    if (res.status == SolveStatus::Infeasible)
      throw InfeasibleAtStateError("mi_step_peeled: block " + std::to_string(j) +
                                   " infeasible at the measured state");
    if (res.status == SolveStatus::MaxIters) step.status = SolveStatus::MaxIters;
    fixed_inputs[j] = res.U_opt;
    step.predicted_cost += full_cost(prog, z0, res.U_opt);
    step.solve_iterations += res.iterations;
    step.u[dec.active_inputs[j]] = res.U_opt[0];
  }
  return step;
}

// ---------------------------------------------------------------------------
// Nonlinear model and SQP controller
// ---------------------------------------------------------------------------

/// Discrete-time map x(k+1) = f(x, u) with f(0,0) = 0. Jacobians may be
/// supplied analytically; otherwise central differences with coordinatewise
/// step h = 1e-6 (1 + |coordinate|) are used.
struct NonlinearModel {
  int n = 0, m = 0;
  std::function<Vec(const Vec&, const Vec&)> step;
  std::function<std::pair<Mat, Mat>(const Vec&, const Vec&)> jacobians;  // optional

  std::pair<Mat, Mat> linearize(const Vec& x, const Vec& u) const {
    if (jacobians) return jacobians(x, u);
    Mat a(n, n), b(n, m);
    for (int j = 0; j < n; ++j) {
      const double h = 1e-6 * (1.0 + std::abs(x[j]));
      Vec xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      const Vec fp = step(xp, u), fm = step(xm, u);
      for (int i = 0; i < n; ++i) a(i, j) = (fp[i] - fm[i]) / (2.0 * h);
    }
    for (int j = 0; j < m; ++j) {
      const double h = 1e-6 * (1.0 + std::abs(u[j]));
      Vec up = u, um = u;
      up[j] += h;
      um[j] -= h;
      const Vec fp = step(x, up), fm = step(x, um);
      for (int i = 0; i < n; ++i) b(i, j) = (fp[i] - fm[i]) / (2.0 * h);
    }
    return {a, b};
  }

  void validate() const {
    if (!step) throw DimensionError("NonlinearModel: missing step function");
    const Vec z = step(Vec(n, 0.0), Vec(m, 0.0));
    if (norm_inf(z) > 1e-12)
      throw DimensionError("NonlinearModel: f(0,0) must vanish");
  }
};

/// Wraps a linear plant as a NonlinearModel (used by consistency checks).
inline NonlinearModel wrap_linear(const LinearSystem& sys) {
  NonlinearModel m;
  m.n = sys.n();
  m.m = sys.m();
  const Mat a = sys.A(), b = sys.B();
  m.step = [a, b](const Vec& x, const Vec& u) {
    Vec xn = a * x;
    const Vec bu = b * u;
    for (std::size_t i = 0; i < xn.size(); ++i) xn[i] += bu[i];
    return xn;
  };
  m.jacobians = [a, b](const Vec&, const Vec&) { return std::make_pair(a, b); };
  return m;
}

struct NlWarmState {
  Vec U;                 // N*m stacked inputs
  std::vector<Vec> X;    // N predicted states x(1..N)
  bool valid = false;
};

struct SqpOptions {
  int max_major = 50;
  double step_tol = 1e-8;
  double defect_tol = 1e-8;
  double penalty_margin = 1.1;
  SolverOptions qp;
};

struct SqpReport {
  int major_iterations = 0;
  double step_norm = 0.0;
  double defect_norm = 0.0;
};

namespace detail {

inline Vec simulate_inputs(const NonlinearModel& model, const Vec& x0, const Vec& u_seq,
                           int N, std::vector<Vec>& xs) {
  xs.clear();
  Vec x = x0;
  for (int i = 0; i < N; ++i) {
    Vec ui(u_seq.begin() + i * model.m, u_seq.begin() + (i + 1) * model.m);
    x = model.step(x, ui);
    xs.push_back(x);
  }
  return x;
}

inline double dynamics_defect(const NonlinearModel& model, const Vec& x0,
                              const Vec& u_seq, const std::vector<Vec>& xs) {
  double worst = 0.0;
  Vec prev = x0;
  for (int i = 0; i < static_cast<int>(xs.size()); ++i) {
    Vec ui(u_seq.begin() + i * model.m, u_seq.begin() + (i + 1) * model.m);
    const Vec pred = model.step(prev, ui);
    worst = std::max(worst, norm_inf(pred - xs[i]));
    prev = xs[i];
  }
  return worst;
}

}  // namespace detail

/// SQP over the shooting variables (U, X): each major iteration linearizes
/// the dynamics along the current trajectory, condenses the time-varying
/// subproblem with the same shifted-window objective, and applies a
/// backtracking line search on the l1 merit function. The penalty weight is
/// raised above an adjoint-based multiplier estimate so merit descent tracks
/// true progress.
inline ControlStep nl_step(const NonlinearModel& model, const ControllerDesign& design,
                           const BoxConstraintSet& box, const Vec& x, NlWarmState& warm,
                           const SqpOptions& opts = {}, SqpReport* report = nullptr) {
  model.validate();
  const int N = design.N, n = model.n, m = model.m;
  Vec U;
  std::vector<Vec> X;
  if (warm.valid && static_cast<int>(warm.U.size()) == N * m) {
    U = warm.U;
    X = warm.X;
  } else {
    U.assign(N * m, 0.0);
    detail::simulate_inputs(model, x, U, N, X);
  }

  double mu_pen = 1.0;
  double step_norm = kInf;
  double defect = detail::dynamics_defect(model, x, U, X);
  int major = 0;
  bool converged = false;

  for (major = 1; major <= opts.max_major; ++major) {
    // linearize along the trajectory
    StagePlan plan;
    plan.N = N;
    plan.nx = n;
    plan.nu1 = m;
    plan.A.resize(N);
    plan.B.resize(N);
    plan.c.resize(N);
    Vec xi = x;
    for (int i = 0; i < N; ++i) {
      Vec ui(U.begin() + i * m, U.begin() + (i + 1) * m);
      auto [ai, bi] = model.linearize(xi, ui);
      const Vec fi = model.step(xi, ui);
      Vec ci = fi - ai * xi - bi * ui;
      plan.A[i] = std::move(ai);
      plan.B[i] = std::move(bi);
      plan.c[i] = std::move(ci);
      xi = X[i];
    }
    plan.Qhat.resize(N);
    plan.Rhat.resize(N);
    for (int i = 1; i <= N; ++i)
      plan.Qhat[i - 1] = (i == N) ? design.P : (i >= n ? design.Q : Mat(n, n));
    for (int i = 0; i < N; ++i)
      plan.Rhat[i] = (i >= n) ? design.R : Mat(m, m);
    plan.u_lo = box.u_lo();
    plan.u_hi = box.u_hi();
    plan.xb_lo = box.x_lo();
    plan.xb_hi = box.x_hi();
    plan.state_box_first = 1;
    plan.state_box_last = N;   // the nonlinear path bounds every predicted step
    plan.terminals.push_back({0, n, design.P, design.eps});

    const CondensedProgram sub = condense(plan, opts.qp);
    const SolveResult qp = solve(sub, x);
    if (qp.status == SolveStatus::Infeasible) {
      if (major == 1)
        throw InfeasibleAtStateError("nl_step: subproblem infeasible at the measured state");
      throw SqpNoConvergenceError("nl_step: subproblem became infeasible during iterations");
    }

    // adjoint-based multiplier estimate for the merit penalty
    {
      Vec lam = 2.0 * (design.P * X[N - 1]);
      double lam_max = norm_inf(lam);
      for (int i = N - 1; i >= 1; --i) {
        Vec contrib = transpose(plan.A[i]) * lam;
        const Mat& qb = plan.Qhat[i - 1];
        const Vec qx = qb * X[i - 1];
        for (int r = 0; r < n; ++r) contrib[r] += 2.0 * qx[r];
        lam = std::move(contrib);
        lam_max = std::max(lam_max, norm_inf(lam));
      }
      mu_pen = std::max(mu_pen, opts.penalty_margin * lam_max + 1.0);
    }

    // candidate trajectory from the QP (satisfies the linearized dynamics)
    std::vector<Vec> Xq(N, Vec(n));
    for (int i = 0; i < N; ++i)
      for (int r = 0; r < n; ++r) Xq[i][r] = qp.X_pred[i * n + r];

    auto merit = [&](const Vec& Uc, const std::vector<Vec>& Xc) {
      double cost = 0.0;
      for (int i = 0; i < N; ++i) {
        Vec ui(Uc.begin() + i * m, Uc.begin() + (i + 1) * m);
        cost += quad_form(plan.Rhat[i], ui);
        cost += quad_form(plan.Qhat[i], Xc[i]);
      }
      double viol = 0.0;
      Vec prev = x;
      for (int i = 0; i < N; ++i) {
        Vec ui(Uc.begin() + i * m, Uc.begin() + (i + 1) * m);
        const Vec pred = model.step(prev, ui);
        for (int r = 0; r < n; ++r) viol += std::abs(pred[r] - Xc[i][r]);
        prev = Xc[i];
      }
      return cost + mu_pen * viol;
    };

    const double phi0 = merit(U, X);
    double alpha = 1.0;
    Vec U_new = U;
    std::vector<Vec> X_new = X;
    bool accepted = false;
    for (int ls = 0; ls < 24; ++ls) {
      Vec Uc(N * m);
      std::vector<Vec> Xc(N, Vec(n));
      for (int i = 0; i < N * m; ++i) Uc[i] = U[i] + alpha * (qp.U_opt[i] - U[i]);
      for (int i = 0; i < N; ++i)
        for (int r = 0; r < n; ++r) Xc[i][r] = X[i][r] + alpha * (Xq[i][r] - X[i][r]);
      if (merit(Uc, Xc) <= phi0 - 1e-8 * alpha * std::max(phi0, 1.0) || phi0 == 0.0) {
        U_new = std::move(Uc);
        X_new = std::move(Xc);
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      // fall back to the full QP point; the convergence test below decides
      U_new = qp.U_opt;
      X_new = Xq;
    }

    step_norm = 0.0;
    for (int i = 0; i < N * m; ++i) step_norm = std::max(step_norm, std::abs(U_new[i] - U[i]));
    for (int i = 0; i < N; ++i)
      for (int r = 0; r < n; ++r) step_norm = std::max(step_norm, std::abs(X_new[i][r] - X[i][r]));
    U = std::move(U_new);
    X = std::move(X_new);
    defect = detail::dynamics_defect(model, x, U, X);
    if (step_norm <= opts.step_tol && defect <= opts.defect_tol) {
      converged = true;
      break;
    }
  }

  if (report) {
    report->major_iterations = major;
    report->step_norm = step_norm;
    report->defect_norm = defect;
  }
  if (!converged)
    throw SqpNoConvergenceError("nl_step: no convergence (step " + std::to_string(step_norm) +
                                ", defect " + std::to_string(defect) + ")");

  ControlStep step;
  step.u.assign(U.begin(), U.begin() + m);
  step.status = SolveStatus::Optimal;
  step.solve_iterations = major;
  {
    double cost = 0.0;
    Vec prev = x;
    for (int i = 0; i < N; ++i) {
      Vec ui(U.begin() + i * m, U.begin() + (i + 1) * m);
      if (i >= n) cost += quad_form(design.R, ui);
      prev = X[i];
      if (i + 1 == N) cost += quad_form(design.P, prev);
      else if (i + 1 >= n) cost += quad_form(design.Q, prev);
    }
    step.predicted_cost = cost;
  }

  // shift the trajectory for the next call, padding with the terminal gain
  warm.U.assign(N * m, 0.0);
  for (int i = 0; i + m < N * m; ++i) warm.U[i] = U[i + m];
  const Vec x_last = X[N - 1];
  const Vec u_tail = -1.0 * (design.K * x_last);
  for (int j = 0; j < m; ++j) warm.U[(N - 1) * m + j] = u_tail[j];
  warm.X.assign(X.begin() + 1, X.end());
  warm.X.push_back(model.step(x_last, u_tail));
  warm.valid = true;
  return step;
}

/// Terminal data for the nonlinear controller: the linearized design at the
/// origin, with eps halved until a sampled nonlinear invariance check passes
/// on the ellipsoid boundary (feedback feasible, inside the state box, and
/// mapped back inside the set by f).
inline ControllerDesign nl_terminal_design(const NonlinearModel& model, const BoxConstraintSet& box,
                                           const Mat& q, const Mat& r, int N,
                                           int samples = 256,
                                           const Tolerances& tol = default_tols()) {
  model.validate();
  auto [a0, b0] = model.linearize(Vec(model.n, 0.0), Vec(model.m, 0.0));
  const LinearSystem lin(a0, b0, tol);
  ControllerDesign d = build_design(lin, box, N, q, r, std::nullopt, tol);

  const auto dirs = detail::sample_directions(model.n, samples);
  double eps = d.eps;
  while (true) {
    bool ok = true;
    for (const Vec& dir : dirs) {
      const Vec xb = detail::ellipsoid_boundary_point(d.P, eps, dir);
      const Vec u = -1.0 * (d.K * xb);
      if (box.input_violation(u) > 1e-9 || box.state_violation(xb) > 1e-9) { ok = false; break; }
      const Vec xn = model.step(xb, u);
      if (quad_form(d.P, xn) > eps) { ok = false; break; }
    }
    if (ok) break;
    eps *= 0.5;
    if (eps < 1e-10)
      throw NoInvariantSetError("nl_terminal_design: invariant level shrank below floor");
  }
  d.eps = eps;
  return d;
}

// ---------------------------------------------------------------------------
// Convenience controller objects owning their warm-start state
// ---------------------------------------------------------------------------

class LinearMpc {
 public:
  LinearMpc(const LinearSystem& sys, const BoxConstraintSet& box, ControllerDesign design,
            const SolverOptions& opts = {})
      : design_(std::move(design)), prog_(build_condensed(sys, box, design_, opts)) {}

  ControlStep step(const Vec& x) { return lin_step(prog_, design_, x, warm_); }
  void reset() { warm_.valid = false; }
  const CondensedProgram& program() const { return prog_; }
  const ControllerDesign& design() const { return design_; }

  /// Last full solve at the given state without advancing the warm start
  /// (used by diagnostics that need the predicted trajectory).
  SolveResult inspect(const Vec& x) const {
    return solve(prog_, x, warm_.valid ? &warm_.ws : nullptr);
  }

 private:
  ControllerDesign design_;
  CondensedProgram prog_;
  LinearWarmState warm_;
};

class MultiMpc {
 public:
  MultiMpc(const LinearSystem& sys, const BoxConstraintSet& box, MultiDesign design,
           const SolverOptions& opts = {}, bool peeling = false)
      : m_total_(sys.m()), box_(box), opts_(opts), peeling_(peeling),
        design_(std::move(design)), prog_(build_condensed_multi(design_, box, opts)) {}

  ControlStep step(const Vec& x) {
    if (peeling_) return mi_step_peeled(design_, box_, x, m_total_, opts_);
    return mi_step(design_, prog_, x, warm_, m_total_);
  }
  void reset() { warm_.valid = false; }
  const CondensedProgram& program() const { return prog_; }
  const MultiDesign& design() const { return design_; }

 private:
  int m_total_;
  BoxConstraintSet box_;
  SolverOptions opts_;
  bool peeling_;
  MultiDesign design_;
  CondensedProgram prog_;
  LinearWarmState warm_;
};

class NonlinearMpc {
 public:
  NonlinearMpc(NonlinearModel model, const BoxConstraintSet& box, ControllerDesign design,
               const SqpOptions& opts = {})
      : model_(std::move(model)), box_(box), design_(std::move(design)), opts_(opts) {}

  ControlStep step(const Vec& x) { return nl_step(model_, design_, box_, x, warm_, opts_, &last_report_); }
  void reset() { warm_.valid = false; }
  const SqpReport& last_report() const { return last_report_; }
  const ControllerDesign& design() const { return design_; }

 private:
  NonlinearModel model_;
  BoxConstraintSet box_;
  ControllerDesign design_;
  SqpOptions opts_;
  NlWarmState warm_;
  SqpReport last_report_;
};

}  // namespace ftmpc
