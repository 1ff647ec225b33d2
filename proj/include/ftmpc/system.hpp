#pragma once

#include "ftmpc/matrix.hpp"

namespace ftmpc {

namespace detail {

// Rank of a set of column vectors by Gram-Schmidt style pivoted elimination.
// Returns for each candidate whether it added a new independent direction.
// `scale` grows with the largest candidate seen so far, so the acceptance
// threshold tracks the data magnitude.
class IndependenceTracker {
 public:
  explicit IndependenceTracker(int dim, double rel_tol) : dim_(dim), rel_tol_(rel_tol) {}

  bool try_add(Vec v) {
    scale_ = std::max({scale_, norm2(v), 1.0});
    for (const Vec& q : basis_) {
      const double c = dot(q, v);
      for (int i = 0; i < dim_; ++i) v[i] -= c * q[i];
    }
    // second pass for numerical re-orthogonalization
    for (const Vec& q : basis_) {
      const double c = dot(q, v);
      for (int i = 0; i < dim_; ++i) v[i] -= c * q[i];
    }
    const double r = norm2(v);
    if (r <= rel_tol_ * scale_) return false;
    basis_.push_back((1.0 / r) * v);
    return true;
  }

  int rank() const { return static_cast<int>(basis_.size()); }

 private:
  int dim_;
  double rel_tol_;
  double scale_ = 1.0;
  std::vector<Vec> basis_;
};

}  // namespace detail

/// Controllability matrix [B, AB, ..., A^(n-1)B].
inline Mat controllability_matrix(const Mat& a, const Mat& b) {
  const int n = a.rows();
  const int m = b.cols();
  Mat c(n, n * m);
  Mat apb = b;
  for (int k = 0; k < n; ++k) {
    c.set_block(0, k * m, apb);
    apb = a * apb;
  }
  return c;
}

inline int rank_by_elimination(const Mat& m, double rel_tol = default_tols().rank_rel) {
  detail::IndependenceTracker t(m.rows(), rel_tol);
  for (int j = 0; j < m.cols(); ++j) t.try_add(m.col_vec(j));
  return t.rank();
}

/// Discrete-time plant x(k+1) = A x(k) + B u(k). Construction verifies
/// dimensions, finiteness and full controllability.
class LinearSystem {
 public:
  LinearSystem(Mat a, Mat b, const Tolerances& tol = default_tols())
      : a_(std::move(a)), b_(std::move(b)) {
    if (a_.rows() != a_.cols()) throw DimensionError("LinearSystem: A not square");
    if (b_.rows() != a_.rows()) throw DimensionError("LinearSystem: B row count != state dim");
    if (b_.cols() < 1) throw DimensionError("LinearSystem: no inputs");
    if (!all_finite(a_) || !all_finite(b_)) throw DimensionError("LinearSystem: non-finite entry");
    const Mat ctrb = controllability_matrix(a_, b_);
    if (rank_by_elimination(ctrb, tol.rank_rel) != a_.rows())
      throw NotControllableError("LinearSystem: (A,B) not controllable");
  }

  const Mat& A() const { return a_; }
  const Mat& B() const { return b_; }
  int n() const { return a_.rows(); }
  int m() const { return b_.cols(); }

  Vec step(const Vec& x, const Vec& u) const {
    Vec xn = a_ * x;
    const Vec bu = b_ * u;
    for (int i = 0; i < n(); ++i) xn[i] += bu[i];
    return xn;
  }

 private:
  Mat a_, b_;
};

/// Elementwise bounds on states and inputs; entries may be +-inf. The origin
/// must be strictly interior.
class BoxConstraintSet {
 public:
  BoxConstraintSet(Vec x_lo, Vec x_hi, Vec u_lo, Vec u_hi)
      : x_lo_(std::move(x_lo)), x_hi_(std::move(x_hi)),
        u_lo_(std::move(u_lo)), u_hi_(std::move(u_hi)) {
    if (x_lo_.size() != x_hi_.size() || u_lo_.size() != u_hi_.size())
      throw DimensionError("BoxConstraintSet: lo/hi size mismatch");
    check_interior(x_lo_, x_hi_, "state");
    check_interior(u_lo_, u_hi_, "input");
  }

  static BoxConstraintSet unbounded(int n, int m) {
    return BoxConstraintSet(Vec(n, -kInf), Vec(n, kInf), Vec(m, -kInf), Vec(m, kInf));
  }

  /// Symmetric input bound |u_i| <= u_max, unbounded states.
  static BoxConstraintSet input_bound(int n, int m, double u_max) {
    return BoxConstraintSet(Vec(n, -kInf), Vec(n, kInf), Vec(m, -u_max), Vec(m, u_max));
  }

  int n() const { return static_cast<int>(x_lo_.size()); }
  int m() const { return static_cast<int>(u_lo_.size()); }

  const Vec& x_lo() const { return x_lo_; }
  const Vec& x_hi() const { return x_hi_; }
  const Vec& u_lo() const { return u_lo_; }
  const Vec& u_hi() const { return u_hi_; }

  double state_violation(const Vec& x) const { return violation(x, x_lo_, x_hi_); }
  double input_violation(const Vec& u) const { return violation(u, u_lo_, u_hi_); }

  bool state_within(const Vec& x, double tol) const { return state_violation(x) <= tol; }
  bool input_within(const Vec& u, double tol) const { return input_violation(u) <= tol; }

  /// Largest c with |x_i| <= c implied by the two-sided bound on coordinate i
  /// (used when a symmetric halfplane row is needed).
  double symmetric_state_bound(int i) const { return std::min(-x_lo_[i], x_hi_[i]); }
  double symmetric_input_bound(int i) const { return std::min(-u_lo_[i], u_hi_[i]); }

 private:
  static void check_interior(const Vec& lo, const Vec& hi, const char* what) {
    for (std::size_t i = 0; i < lo.size(); ++i) {
      if (std::isnan(lo[i]) || std::isnan(hi[i]))
        throw DimensionError(std::string("BoxConstraintSet: NaN ") + what + " bound");
      if (lo[i] > hi[i])
        throw DimensionError(std::string("BoxConstraintSet: ") + what + " lo > hi");
      if (!(lo[i] < 0.0 && hi[i] > 0.0))
        throw DegenerateError(std::string("BoxConstraintSet: origin not strictly interior of ") + what + " box");
    }
  }

  static double violation(const Vec& v, const Vec& lo, const Vec& hi) {
    double worst = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (std::isfinite(lo[i])) worst = std::max(worst, lo[i] - v[i]);
      if (std::isfinite(hi[i])) worst = std::max(worst, v[i] - hi[i]);
    }
    return worst;
  }

  Vec x_lo_, x_hi_, u_lo_, u_hi_;
};

}  // namespace ftmpc
