#pragma once

#include <optional>
#include <sstream>

#include "ftmpc/matrix.hpp"
#include "ftmpc/system.hpp"

namespace ftmpc {

// ---------------------------------------------------------------------------
// Offline controller synthesis: terminal weight P from the discrete Lyapunov
// equation, deadbeat gain, inscribed terminal ellipsoid level, optional LQR
// gain, and the multi-input decoupling transform.
// ---------------------------------------------------------------------------

struct ControllerDesign {
  int N = 0;      // control horizon, >= state dimension
  Mat Q, R;       // stage weights (positive definite)
  Mat K;          // stabilizing terminal feedback, m x n
  Mat P;          // terminal weight from the Lyapunov equation
  Mat K_db;       // deadbeat gain (single-input designs), 1 x n
  double eps = 0; // terminal level: X_f = { x : x'Px <= eps }
};

/// Solves Acl' P Acl - P = -W for symmetric P by vectorization:
/// (I - kron(Acl', Acl')) vec(P) = vec(W). Requires a spectral-radius
/// certificate on Acl; the result is symmetrized before returning.
inline Mat solve_discrete_lyapunov(const Mat& acl, const Mat& w,
                                   const Tolerances& tol = default_tols()) {
  if (acl.rows() != acl.cols()) throw DimensionError("lyapunov: Acl not square");
  if (w.rows() != acl.rows() || w.cols() != acl.cols())
    throw DimensionError("lyapunov: W shape mismatch");
  if (sym_rel_asymmetry(w) > 1e-8)
    throw DimensionError("lyapunov: W not symmetric");
  if (!spectral_radius_below_one(acl, tol.spectral_max_doublings, tol))
    throw NotContractiveError("lyapunov: spectral radius certificate failed for Acl");
  const int n = acl.rows();
  const Mat at = transpose(acl);
  Mat sys = kron(at, at);
  for (int i = 0; i < n * n; ++i) {
    for (int j = 0; j < n * n; ++j) sys(i, j) = -sys(i, j);
    sys(i, i) += 1.0;
  }
  const Vec p = solve_linear(sys, flatten(w), tol);
  Mat pm = unflatten(p, n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double v = 0.5 * (pm(i, j) + pm(j, i));
      pm(i, j) = pm(j, i) = v;
    }
  return pm;
}

/// Deadbeat gain K_db = [1,0,...,0] S^{-1} A^n with S = [A^{n-1}b, ..., b];
/// places every closed-loop eigenvalue at zero, so (A - b K_db)^n = 0.
inline Mat deadbeat_gain(const LinearSystem& sys, const Tolerances& tol = default_tols()) {
  if (sys.m() != 1) throw DimensionError("deadbeat_gain: single-input systems only");
  const int n = sys.n();
  Mat s(n, n);
  for (int k = 0; k < n; ++k) {
    const Mat col = mat_pow(sys.A(), n - 1 - k) * sys.B();
    for (int i = 0; i < n; ++i) s(i, k) = col(i, 0);
  }
  // S^{-1} A^n exists whenever (A,b) is controllable
  const Mat sia = solve_linear(s, mat_pow(sys.A(), n), tol);
  Mat kdb(1, n);
  for (int j = 0; j < n; ++j) kdb(0, j) = sia(0, j);
  return kdb;
}

/// Fixed-point iteration of the discrete Riccati recursion from P0 = Q;
/// returns the associated gain K = (R + B'PB)^{-1} B'PA.
inline Mat riccati_gain(const LinearSystem& sys, const Mat& q, const Mat& r,
                        int max_iter = 10000, double tol = 1e-10,
                        const Tolerances& tols = default_tols()) {
  const Mat at = transpose(sys.A());
  const Mat bt = transpose(sys.B());
  Mat p = q;
  for (int it = 0; it < max_iter; ++it) {
    const Mat pb = p * sys.B();
    const Mat gain = solve_linear(r + bt * pb, transpose(pb) * sys.A(), tols);
    const Mat pn = q + at * (p * sys.A()) - at * (pb * gain);
    const double diff = frob_norm(pn - p);
    p = pn;
    if (diff <= tol * std::max(frob_norm(p), 1e-300)) {
      const Mat pb2 = p * sys.B();
      return solve_linear(r + bt * pb2, transpose(pb2) * sys.A(), tols);
    }
  }
  throw NoConvergenceError("riccati_gain: no fixed point within iteration budget");
}

/// Largest eps such that { x : x'Px <= eps } fits inside the state box and
/// maps into the input box under u = -Kx. Every active bound becomes a
/// symmetric halfplane |a'x| <= c and eps = min_i c_i^2 / (a_i' P^{-1} a_i);
/// rows with c = inf or a = 0 drop out. Throws UnboundedError when every row
/// drops out.
inline double terminal_level(const Mat& p, const Mat& k, const BoxConstraintSet& box,
                             const Tolerances& tol = default_tols()) {
  const int n = p.rows();
  if (k.cols() != n || box.n() != n || box.m() != k.rows())
    throw DimensionError("terminal_level: shape mismatch");
  const LuFactor plu = LuFactor::compute(p, tol);
  double eps = kInf;
  bool any = false;
  auto add_row = [&](const Vec& a, double c) {
    if (!std::isfinite(c)) return;
    if (c <= 0.0) throw DegenerateError("terminal_level: nonpositive halfplane offset");
    double norm = 0.0;
    for (double v : a) norm += v * v;
    if (norm == 0.0) return;
    const double denom = dot(a, plu.solve(a));
    if (denom <= 0.0) throw NotPositiveDefiniteError("terminal_level: P not positive definite");
    eps = std::min(eps, c * c / denom);
    any = true;
  };
  for (int i = 0; i < n; ++i) {
    Vec a(n, 0.0);
    a[i] = 1.0;
    add_row(a, box.symmetric_state_bound(i));
  }
  for (int r = 0; r < k.rows(); ++r)
    add_row(k.row_vec(r), box.symmetric_input_bound(r));
  if (!any)
    throw UnboundedError("terminal_level: no finite constraint row; level is unbounded");
  return eps;
}

// ---------------------------------------------------------------------------
// Multi-input decoupling (Luenberger-style column selection)
// ---------------------------------------------------------------------------

struct DecoupledForm {
  Mat M;                          // transform z = Mx
  Mat Minv;                       // cached inverse (the selected columns)
  Mat F;                          // M A M^{-1}, block upper triangular
  Mat G;                          // M B
  int q = 0;                      // number of contributing inputs
  std::vector<int> block_dims;    // n_1 ... n_q
  std::vector<int> block_offsets; // row offset of each block in z
  std::vector<int> active_inputs; // original input index driving each block
};

/// Scans b_1, A b_1, ..., then b_2, A b_2, ... and keeps each column that is
/// independent of everything selected before it (input-major, power-ascending
/// order, so the produced q and block sizes are deterministic). The selected
/// columns form M^{-1}; structural invariants of the decoupled form are
/// verified post hoc.
inline DecoupledForm decouple(const LinearSystem& sys, const Tolerances& tol = default_tols()) {
  if (sys.m() < 2) throw DimensionError("decouple: expected a multi-input system");
  const int n = sys.n();
  DecoupledForm d;
  detail::IndependenceTracker tracker(n, tol.rank_rel);
  std::vector<Vec> selected;
  for (int j = 0; j < sys.m(); ++j) {
    Vec col = sys.B().col_vec(j);
    int mu = 0;
    while (static_cast<int>(selected.size()) < n && tracker.try_add(col)) {
      selected.push_back(col);
      ++mu;
      col = sys.A() * col;
    }
    if (mu > 0) {
      d.block_offsets.push_back(static_cast<int>(selected.size()) - mu);
      d.block_dims.push_back(mu);
      d.active_inputs.push_back(j);
    }
  }
  if (static_cast<int>(selected.size()) != n)
    throw NotControllableError("decouple: selected columns do not span the state space");
  d.q = static_cast<int>(d.block_dims.size());

  Mat t(n, n);
  for (int c = 0; c < n; ++c)
    for (int i = 0; i < n; ++i) t(i, c) = selected[c][i];
  d.Minv = t;
  d.M = inverse(t, tol);
  d.F = d.M * sys.A() * t;
  d.G = d.M * sys.B();

  // verify block-triangular pattern
  const double f_tol = 1e-9 * std::max(frob_norm(d.F), 1.0);
  const double g_tol = 1e-9 * std::max(frob_norm(d.G), 1.0);
  std::ostringstream bad;
  for (int bj = 0; bj < d.q; ++bj) {
    const int c0 = d.block_offsets[bj];
    const int cw = d.block_dims[bj];
    for (int c = c0; c < c0 + cw; ++c)
      for (int i = c0 + cw; i < n; ++i)
        if (std::abs(d.F(i, c)) > f_tol)
          bad << " F(" << i << "," << c << ")=" << d.F(i, c);
    const int u = d.active_inputs[bj];
    for (int i = c0 + cw; i < n; ++i)
      if (std::abs(d.G(i, u)) > g_tol)
        bad << " G(" << i << "," << u << ")=" << d.G(i, u);
  }
  if (!bad.str().empty())
    throw StructureViolationError("decouple: block-triangular pattern violated:" + bad.str());

  // each (F_jj, g_j) must be controllable
  for (int bj = 0; bj < d.q; ++bj) {
    const Mat fjj = d.F.block(d.block_offsets[bj], d.block_offsets[bj], d.block_dims[bj], d.block_dims[bj]);
    Mat gj(d.block_dims[bj], 1);
    for (int i = 0; i < d.block_dims[bj]; ++i) gj(i, 0) = d.G(d.block_offsets[bj] + i, d.active_inputs[bj]);
    if (rank_by_elimination(controllability_matrix(fjj, gj), tol.rank_rel) != d.block_dims[bj])
      throw StructureViolationError("decouple: block " + std::to_string(bj) + " not controllable");
  }
  return d;
}

// ---------------------------------------------------------------------------
// Design assembly and validation
// ---------------------------------------------------------------------------

namespace detail {

inline void require_positive_definite(const Mat& m, const char* name) {
  try {
    (void)cholesky(m);
  } catch (const Error&) {
    throw NotPositiveDefiniteError(std::string(name) + " must be symmetric positive definite");
  }
}

// Deterministic directions for boundary sampling: equal angles in 2-D,
// seeded normalized Gaussians otherwise.
inline std::vector<Vec> sample_directions(int n, int count) {
  std::vector<Vec> dirs;
  dirs.reserve(count);
  if (n == 1) {
    dirs.push_back(Vec{1.0});
    dirs.push_back(Vec{-1.0});
    return dirs;
  }
  if (n == 2) {
    for (int i = 0; i < count; ++i) {
      const double th = 2.0 * 3.14159265358979323846 * i / count;
      dirs.push_back(Vec{std::cos(th), std::sin(th)});
    }
    return dirs;
  }
  std::uint64_t state = 0x9e3779b97f4a7c15ull;
  auto next = [&state]() {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  auto gauss = [&]() {
    const double u1 = (next() >> 11) * 0x1.0p-53 + 1e-16;
    const double u2 = (next() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  };
  while (static_cast<int>(dirs.size()) < count) {
    Vec d(n);
    for (int i = 0; i < n; ++i) d[i] = gauss();
    const double r = norm2(d);
    if (r < 1e-8) continue;
    dirs.push_back((1.0 / r) * d);
  }
  return dirs;
}

// point on the boundary { x : x'Px = eps } along direction d
inline Vec ellipsoid_boundary_point(const Mat& p, double eps, const Vec& d) {
  const double s = std::sqrt(eps / quad_form(p, d));
  return s * d;
}

}  // namespace detail

struct DesignValidation {
  double lyapunov_residual = 0.0;   // relative to ||P||_F
  double nilpotency_residual = 0.0; // relative to max(1, ||A||^n_F)
  int invariance_samples = 0;
  int invariance_failures = 0;
  double max_input_violation = 0.0;
  double max_state_violation = 0.0;
  double max_decrease_violation = 0.0;

  bool ok() const {
    return lyapunov_residual <= 1e-8 && nilpotency_residual <= 1e-8 &&
           invariance_failures == 0;
  }
};

/// Checks the produced design against its defining identities: Lyapunov
/// residual, deadbeat nilpotency, and sampled invariance of the terminal
/// ellipsoid (feedback feasibility plus the Lyapunov decrease on boundary
/// points).
inline DesignValidation validate_design(const LinearSystem& sys, const BoxConstraintSet& box,
                                        const ControllerDesign& d, int samples = 64) {
  DesignValidation v;
  const Mat acl = sys.A() - sys.B() * d.K;
  const Mat w = d.Q + transpose(d.K) * (d.R * d.K);
  v.lyapunov_residual =
      frob_norm(transpose(acl) * (d.P * acl) - d.P + w) / std::max(frob_norm(d.P), 1e-300);
  if (!d.K_db.empty()) {
    const Mat acl_db = sys.A() - sys.B() * d.K_db;
    const double scale = std::max(1.0, std::pow(frob_norm(sys.A()), sys.n()));
    v.nilpotency_residual = frob_norm(mat_pow(acl_db, sys.n())) / scale;
  }
  const auto dirs = detail::sample_directions(sys.n(), samples);
  for (const Vec& dir : dirs) {
    const Vec x = detail::ellipsoid_boundary_point(d.P, d.eps, dir);
    const Vec u = -1.0 * (d.K * x);
    v.max_input_violation = std::max(v.max_input_violation, box.input_violation(u));
    v.max_state_violation = std::max(v.max_state_violation, box.state_violation(x));
    const Vec xn = acl * x;
    const double decrease = quad_form(d.P, xn) - (d.eps - quad_form(w, x));
    v.max_decrease_violation = std::max(v.max_decrease_violation, decrease);
    ++v.invariance_samples;
    if (v.max_input_violation > 1e-9 || v.max_state_violation > 1e-9 || decrease > 1e-9)
      ++v.invariance_failures;
  }
  return v;
}

/// Offline synthesis for single-input plants: pick (or accept) a stabilizing
/// gain, solve the Lyapunov equation for P, form the deadbeat gain and the
/// inscribed terminal level.
inline ControllerDesign build_design(const LinearSystem& sys, const BoxConstraintSet& box,
                                     int N, const Mat& q, const Mat& r,
                                     std::optional<Mat> k_opt = std::nullopt,
                                     const Tolerances& tol = default_tols()) {
  if (sys.m() != 1)
    throw DimensionError("build_design: single-input path; use build_multi_design for m > 1");
  if (N < sys.n())
    throw DimensionError("build_design: control horizon must be at least the system dimension");
  if (box.n() != sys.n() || box.m() != sys.m())
    throw DimensionError("build_design: constraint set does not match plant dimensions");
  detail::require_positive_definite(q, "Q");
  detail::require_positive_definite(r, "R");

  ControllerDesign d;
  d.N = N;
  d.Q = q;
  d.R = r;
  if (k_opt) {
    if (k_opt->rows() != sys.m() || k_opt->cols() != sys.n())
      throw DimensionError("build_design: K has wrong shape");
    if (!spectral_radius_below_one(sys.A() - sys.B() * (*k_opt), tol.spectral_max_doublings, tol))
      throw NotStabilizingError("build_design: supplied K fails the spectral radius certificate");
    d.K = *k_opt;
  } else {
    d.K = riccati_gain(sys, q, r, 10000, 1e-10, tol);
    if (!spectral_radius_below_one(sys.A() - sys.B() * d.K, tol.spectral_max_doublings, tol))
      throw NotStabilizingError("build_design: Riccati gain fails the spectral radius certificate");
  }
  const Mat w = q + transpose(d.K) * (r * d.K);
  d.P = solve_discrete_lyapunov(sys.A() - sys.B() * d.K, w, tol);
  d.K_db = deadbeat_gain(sys, tol);
  d.eps = terminal_level(d.P, d.K, box, tol);
  return d;
}

// ---------------------------------------------------------------------------
// Multi-input design: per-block terminal data on the decoupled form
// ---------------------------------------------------------------------------

struct MultiDesign {
  DecoupledForm dec;
  int N = 0;
  std::vector<Mat> Qj, Rj;  // per-block stage weights
  std::vector<Mat> Kj;      // per-block terminal feedback (1 x n_j)
  std::vector<Mat> Pj;      // per-block terminal weights
  Vec epsj;                 // per-block terminal levels
};

namespace detail {

// Interval bound of z = Mx over the state box: an axis-aligned outer box in
// z-coordinates. Contributions of zero entries are dropped so unbounded
// coordinates only propagate where M actually couples them.
inline void z_interval_bounds(const Mat& m, const BoxConstraintSet& box, Vec& lo, Vec& hi) {
  const int n = m.rows();
  lo.assign(n, 0.0);
  hi.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double c = m(i, j);
      if (c == 0.0) continue;
      const double a = c * box.x_lo()[j];
      const double b = c * box.x_hi()[j];
      lo[i] += std::min(a, b);
      hi[i] += std::max(a, b);
    }
  }
}

}  // namespace detail

/// Multi-input synthesis on the decoupled form: per-block Riccati gain,
/// Lyapunov weight and inscribed level against interval bounds of M X in
/// z-coordinates, then a joint shrink until sampled product invariance of the
/// terminal sets inside M X holds.
inline MultiDesign build_multi_design(const LinearSystem& sys, const BoxConstraintSet& box,
                                      int N, const Mat& q, const Mat& r,
                                      const Tolerances& tol = default_tols()) {
  if (sys.m() < 2) throw DimensionError("build_multi_design: expected m > 1");
  if (N < sys.n())
    throw DimensionError("build_multi_design: control horizon must be at least the system dimension");
  if (q.rows() != sys.n() || r.rows() != sys.m())
    throw DimensionError("build_multi_design: weight shapes do not match plant");
  detail::require_positive_definite(q, "Q");
  detail::require_positive_definite(r, "R");

  MultiDesign md;
  md.dec = decouple(sys, tol);
  md.N = N;

  Vec zlo, zhi;
  detail::z_interval_bounds(md.dec.M, box, zlo, zhi);

  for (int j = 0; j < md.dec.q; ++j) {
    const int off = md.dec.block_offsets[j];
    const int nj = md.dec.block_dims[j];
    const int uj = md.dec.active_inputs[j];
    const Mat fjj = md.dec.F.block(off, off, nj, nj);
    Mat gj(nj, 1);
    for (int i = 0; i < nj; ++i) gj(i, 0) = md.dec.G(off + i, uj);
    const Mat qj = q.block(off, off, nj, nj);
    Mat rj(1, 1);
    rj(0, 0) = r(uj, uj);
    detail::require_positive_definite(qj, "Q block");

    const LinearSystem blk(fjj, gj, tol);
    const Mat kj = riccati_gain(blk, qj, rj, 10000, 1e-10, tol);
    const Mat pj = solve_discrete_lyapunov(fjj - gj * kj, qj + transpose(kj) * (rj * kj), tol);

    Vec blo(nj), bhi(nj);
    for (int i = 0; i < nj; ++i) { blo[i] = zlo[off + i]; bhi[i] = zhi[off + i]; }
    const BoxConstraintSet block_box(blo, bhi, Vec{box.u_lo()[uj]}, Vec{box.u_hi()[uj]});
    md.Qj.push_back(qj);
    md.Rj.push_back(rj);
    md.Kj.push_back(kj);
    md.Pj.push_back(pj);
    md.epsj.push_back(terminal_level(pj, kj, block_box, tol));
  }

  // Joint shrink until the sampled product of terminal sets lies in M X.
  bool state_bounded = false;
  for (int i = 0; i < sys.n(); ++i)
    if (std::isfinite(box.x_lo()[i]) || std::isfinite(box.x_hi()[i])) state_bounded = true;
  if (state_bounded) {
    const int product_samples = 256;
    auto product_ok = [&]() {
      std::uint64_t state = 0x51ed2701bca95e2dull;
      auto next = [&state]() {
        state += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
      };
      auto gauss = [&]() {
        const double u1 = (next() >> 11) * 0x1.0p-53 + 1e-16;
        const double u2 = (next() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
      };
      for (int s = 0; s < product_samples; ++s) {
        Vec z(sys.n(), 0.0);
        for (int j = 0; j < md.dec.q; ++j) {
          const int off = md.dec.block_offsets[j];
          const int nj = md.dec.block_dims[j];
          Vec dir(nj);
          double nrm = 0.0;
          for (int i = 0; i < nj; ++i) { dir[i] = gauss(); nrm += dir[i] * dir[i]; }
          nrm = std::sqrt(std::max(nrm, 1e-300));
          for (int i = 0; i < nj; ++i) dir[i] /= nrm;
          const Vec zb = detail::ellipsoid_boundary_point(md.Pj[j], md.epsj[j], dir);
          for (int i = 0; i < nj; ++i) z[off + i] = zb[i];
        }
        const Vec x = md.dec.Minv * z;
        if (box.state_violation(x) > 1e-9) return false;
      }
      return true;
    };
    while (!product_ok()) {
      for (double& e : md.epsj) e *= 0.5;
      if (*std::max_element(md.epsj.begin(), md.epsj.end()) < 1e-10)
        throw NoInvariantSetError("build_multi_design: product terminal set shrank below floor");
    }
  }
  return md;
}

}  // namespace ftmpc
