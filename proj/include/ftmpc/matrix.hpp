#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ftmpc {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct SingularMatrixError : Error { using Error::Error; };
struct NotPositiveDefiniteError : Error { using Error::Error; };
struct NoConvergenceError : Error { using Error::Error; };
struct NotContractiveError : Error { using Error::Error; };
struct NotControllableError : Error { using Error::Error; };
struct NotStabilizingError : Error { using Error::Error; };
struct StructureViolationError : Error { using Error::Error; };
struct UnboundedError : Error { using Error::Error; };
struct DegenerateError : Error { using Error::Error; };
struct InfeasibleAtStateError : Error { using Error::Error; };
struct SqpNoConvergenceError : Error { using Error::Error; };
struct NoInvariantSetError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Numeric tolerances. Defaults apply everywhere; pass a custom record to the
// few entry points that accept one when a caller needs different thresholds.
// ---------------------------------------------------------------------------

struct Tolerances {
  double singular_pivot = 1e-12;      // LU pivot floor, relative to ||A||_F
  double cholesky_symmetry = 1e-10;   // relative symmetry requirement
  double eig_offdiag = 1e-12;         // Jacobi off-diagonal target, relative
  int eig_max_sweeps = 64;
  int spectral_max_doublings = 40;
  double spectral_overflow = 1e150;
  double rank_rel = 1e-9;             // pivoted-elimination rank tolerance
};

inline const Tolerances& default_tols() {
  static const Tolerances t{};
  return t;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Dense row-major matrix and vector
// ---------------------------------------------------------------------------

using Vec = std::vector<double>;

class Mat {
 public:
  Mat() = default;
  Mat(int rows, int cols)
      : rows_(rows), cols_(cols),
        a_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), 0.0) {
    if (rows < 0 || cols < 0) throw DimensionError("Mat: negative dimension");
  }

  static Mat identity(int n) {
    Mat I(n, n);
    for (int i = 0; i < n; ++i) I(i, i) = 1.0;
    return I;
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    Mat m(r, c);
    int i = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c)
        throw DimensionError("Mat::from_rows: ragged rows");
      int j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  static Mat diag(const Vec& d) {
    Mat m(static_cast<int>(d.size()), static_cast<int>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i) m(static_cast<int>(i), static_cast<int>(i)) = d[i];
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool empty() const { return a_.empty(); }

  double& operator()(int i, int j) {
    return a_[static_cast<std::size_t>(i) * cols_ + j];
  }
  double operator()(int i, int j) const {
    return a_[static_cast<std::size_t>(i) * cols_ + j];
  }

  double* data() { return a_.data(); }
  const double* data() const { return a_.data(); }

  const double* row_ptr(int i) const { return a_.data() + static_cast<std::size_t>(i) * cols_; }
  double* row_ptr(int i) { return a_.data() + static_cast<std::size_t>(i) * cols_; }

  Mat block(int i0, int j0, int r, int c) const {
    Mat out(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out(i, j) = (*this)(i0 + i, j0 + j);
    return out;
  }

  void set_block(int i0, int j0, const Mat& m) {
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) (*this)(i0 + i, j0 + j) = m(i, j);
  }

  Vec row_vec(int i) const {
    return Vec(row_ptr(i), row_ptr(i) + cols_);
  }

  Vec col_vec(int j) const {
    Vec v(rows_);
    for (int i = 0; i < rows_; ++i) v[i] = (*this)(i, j);
    return v;
  }

 private:
  int rows_ = 0, cols_ = 0;
  std::vector<double> a_;
};

// -- elementwise/arithmetic --------------------------------------------------

inline Mat operator+(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("Mat+: shape mismatch");
  Mat c(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c(i, j) = a(i, j) + b(i, j);
  return c;
}

inline Mat operator-(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("Mat-: shape mismatch");
  Mat c(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c(i, j) = a(i, j) - b(i, j);
  return c;
}

inline Mat operator*(double s, const Mat& a) {
  Mat c(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) c(i, j) = s * a(i, j);
  return c;
}

inline Mat operator*(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) throw DimensionError("Mat*: inner dimension mismatch");
  Mat c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row_ptr(k);
      double* crow = c.row_ptr(i);
      for (int j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

inline Vec operator*(const Mat& a, const Vec& x) {
  if (a.cols() != static_cast<int>(x.size())) throw DimensionError("Mat*Vec: shape mismatch");
  Vec y(a.rows(), 0.0);
  for (int i = 0; i < a.rows(); ++i) {
    const double* row = a.row_ptr(i);
    double s = 0.0;
    for (int j = 0; j < a.cols(); ++j) s += row[j] * x[j];
    y[i] = s;
  }
  return y;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Vec operator+(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw DimensionError("Vec+: size mismatch");
  Vec c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] + b[i];
  return c;
}

inline Vec operator-(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw DimensionError("Vec-: size mismatch");
  Vec c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] - b[i];
  return c;
}

inline Vec operator*(double s, const Vec& a) {
  Vec c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = s * a[i];
  return c;
}

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw DimensionError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vec& v) { return std::sqrt(dot(v, v)); }

inline double norm_inf(const Vec& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double frob_norm(const Mat& a) {
  double s = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

inline bool all_finite(const Mat& a) {
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      if (!std::isfinite(a(i, j))) return false;
  return true;
}

inline bool all_finite(const Vec& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// quadratic form x^T A x
inline double quad_form(const Mat& a, const Vec& x) {
  return dot(x, a * x);
}

inline double sym_rel_asymmetry(const Mat& a) {
  double num = 0.0, den = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) {
      num = std::max(num, std::abs(a(i, j) - a(j, i)));
      den = std::max(den, std::abs(a(i, j)));
    }
  return den > 0.0 ? num / den : 0.0;
}

// ---------------------------------------------------------------------------
// LU with partial pivoting
// ---------------------------------------------------------------------------

class LuFactor {
 public:
  static LuFactor compute(Mat a, const Tolerances& tol = default_tols()) {
    if (a.rows() != a.cols()) throw DimensionError("LU: matrix not square");
    const int n = a.rows();
    LuFactor f;
    f.piv_.resize(n);
    const double scale = frob_norm(a);
    const double floor = tol.singular_pivot * (scale > 0.0 ? scale : 1.0);
    for (int k = 0; k < n; ++k) {
      int p = k;
      double best = std::abs(a(k, k));
      for (int i = k + 1; i < n; ++i) {
        const double v = std::abs(a(i, k));
        if (v > best) { best = v; p = i; }
      }
      if (best < floor)
        throw SingularMatrixError("LU: pivot " + std::to_string(k) + " below threshold");
      if (p != k)
        for (int j = 0; j < n; ++j) std::swap(a(k, j), a(p, j));
      f.piv_[k] = p;
      const double inv = 1.0 / a(k, k);
      for (int i = k + 1; i < n; ++i) {
        const double l = a(i, k) * inv;
        a(i, k) = l;
        if (l == 0.0) continue;
        for (int j = k + 1; j < n; ++j) a(i, j) -= l * a(k, j);
      }
    }
    f.lu_ = std::move(a);
    return f;
  }

  int dim() const { return lu_.rows(); }

  void solve_inplace(Vec& b) const {
    const int n = dim();
    if (static_cast<int>(b.size()) != n) throw DimensionError("LU solve: size mismatch");
    // apply the full pivot sequence first; the stored multipliers refer to the
    // fully permuted rows
    for (int k = 0; k < n; ++k)
      if (piv_[k] != k) std::swap(b[k], b[piv_[k]]);
    for (int k = 0; k < n; ++k)
      for (int i = k + 1; i < n; ++i) b[i] -= lu_(i, k) * b[k];
    for (int i = n - 1; i >= 0; --i) {
      for (int j = i + 1; j < n; ++j) b[i] -= lu_(i, j) * b[j];
      b[i] /= lu_(i, i);
    }
  }

  Vec solve(Vec b) const {
    solve_inplace(b);
    return b;
  }

  Mat solve(const Mat& b) const {
    if (b.rows() != dim()) throw DimensionError("LU solve: row mismatch");
    Mat x(b.rows(), b.cols());
    Vec col(b.rows());
    for (int j = 0; j < b.cols(); ++j) {
      for (int i = 0; i < b.rows(); ++i) col[i] = b(i, j);
      solve_inplace(col);
      for (int i = 0; i < b.rows(); ++i) x(i, j) = col[i];
    }
    return x;
  }

 private:
  Mat lu_;
  std::vector<int> piv_;
};

/// Solves A·X = B by LU with partial pivoting.
inline Mat solve_linear(const Mat& a, const Mat& b, const Tolerances& tol = default_tols()) {
  return LuFactor::compute(a, tol).solve(b);
}

inline Vec solve_linear(const Mat& a, const Vec& b, const Tolerances& tol = default_tols()) {
  return LuFactor::compute(a, tol).solve(b);
}

inline Mat inverse(const Mat& a, const Tolerances& tol = default_tols()) {
  return solve_linear(a, Mat::identity(a.rows()), tol);
}

// ---------------------------------------------------------------------------
// Cholesky (lower)
// ---------------------------------------------------------------------------

class CholFactor {
 public:
  static CholFactor compute(const Mat& p, const Tolerances& tol = default_tols()) {
    if (p.rows() != p.cols()) throw DimensionError("cholesky: matrix not square");
    if (sym_rel_asymmetry(p) > tol.cholesky_symmetry)
      throw DimensionError("cholesky: matrix not symmetric within tolerance");
    const int n = p.rows();
    Mat l(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j <= i; ++j) {
        double s = p(i, j);
        for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
        if (i == j) {
          if (s <= 0.0)
            throw NotPositiveDefiniteError("cholesky: nonpositive pivot at " + std::to_string(i));
          l(i, i) = std::sqrt(s);
        } else {
          l(i, j) = s / l(j, j);
        }
      }
    }
    CholFactor f;
    f.l_ = std::move(l);
    return f;
  }

  const Mat& lower() const { return l_; }
  int dim() const { return l_.rows(); }

  // solves L L^T x = b
  void solve_inplace(Vec& b) const {
    const int n = dim();
    for (int i = 0; i < n; ++i) {
      double s = b[i];
      const double* row = l_.row_ptr(i);
      for (int j = 0; j < i; ++j) s -= row[j] * b[j];
      b[i] = s / row[i];
    }
    for (int i = n - 1; i >= 0; --i) {
      double s = b[i];
      for (int j = i + 1; j < n; ++j) s -= l_(j, i) * b[j];
      b[i] = s / l_(i, i);
    }
  }

  Vec solve(Vec b) const {
    solve_inplace(b);
    return b;
  }

 private:
  Mat l_;
};

/// Lower-triangular L with L·L^T = P. Requires symmetric positive definite P.
inline Mat cholesky(const Mat& p, const Tolerances& tol = default_tols()) {
  return CholFactor::compute(p, tol).lower();
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

struct EigResult {
  Vec values;   // ascending
  Mat vectors;  // columns match values
};

/// Jacobi rotations until off-diagonal mass vanishes. Eigenvalues are returned
/// ascending with matching (orthonormal) columns; each column's sign is fixed
/// so its largest-magnitude entry is positive.
inline EigResult sym_eig(const Mat& s_in, const Tolerances& tol = default_tols()) {
  if (s_in.rows() != s_in.cols()) throw DimensionError("sym_eig: matrix not square");
  const int n = s_in.rows();
  Mat a = s_in;
  // symmetrize; callers are expected to pass symmetric input
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double m = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = a(j, i) = m;
    }
  Mat v = Mat::identity(n);
  const double scale = frob_norm(a);
  const double target = tol.eig_offdiag * (scale > 0.0 ? scale : 1.0);

  auto offdiag = [&]() {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) s += 2.0 * a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  int sweep = 0;
  while (offdiag() > target) {
    if (++sweep > tol.eig_max_sweeps)
      throw NoConvergenceError("sym_eig: Jacobi sweeps exhausted");
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) < a(j, j); });

  EigResult r;
  r.values.resize(n);
  r.vectors = Mat(n, n);
  for (int j = 0; j < n; ++j) {
    const int src = order[j];
    r.values[j] = a(src, src);
    int imax = 0;
    double vmax = 0.0;
    for (int i = 0; i < n; ++i) {
      if (std::abs(v(i, src)) > vmax) { vmax = std::abs(v(i, src)); imax = i; }
    }
    const double sgn = v(imax, src) >= 0.0 ? 1.0 : -1.0;
    for (int i = 0; i < n; ++i) r.vectors(i, j) = sgn * v(i, src);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Spectral radius certificate and small helpers
// ---------------------------------------------------------------------------

/// Sufficient certificate for spectral radius < 1 by repeated squaring:
/// if ||M^(2^j)||_F < 1 for some j, every eigenvalue lies inside the unit
/// circle. Returns false when the norms neither contract within the doubling
/// budget nor stay bounded (overflow counts as diverging).
inline bool spectral_radius_below_one(Mat m, int max_doublings = default_tols().spectral_max_doublings,
                                      const Tolerances& tol = default_tols()) {
  if (m.rows() != m.cols()) throw DimensionError("spectral_radius_below_one: not square");
  if (max_doublings < 1) throw DimensionError("spectral_radius_below_one: bad budget");
  for (int j = 0; j <= max_doublings; ++j) {
    const double norm = frob_norm(m);
    if (norm < 1.0) return true;
    if (norm > tol.spectral_overflow) return false;
    if (j == max_doublings) break;
    m = m * m;
  }
  return false;
}

inline Mat mat_pow(const Mat& m, int p) {
  if (m.rows() != m.cols()) throw DimensionError("mat_pow: not square");
  if (p < 0) throw DimensionError("mat_pow: negative power");
  Mat r = Mat::identity(m.rows());
  for (int i = 0; i < p; ++i) r = r * m;
  return r;
}

inline Mat kron(const Mat& a, const Mat& b) {
  Mat k(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) {
      const double aij = a(i, j);
      if (aij == 0.0) continue;
      for (int p = 0; p < b.rows(); ++p)
        for (int q = 0; q < b.cols(); ++q)
          k(i * b.rows() + p, j * b.cols() + q) = aij * b(p, q);
    }
  return k;
}

// row-major flatten; pairs with kron(T^T, T^T) in the Lyapunov solve
inline Vec flatten(const Mat& m) {
  Vec v;
  v.reserve(static_cast<std::size_t>(m.rows()) * m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

inline Mat unflatten(const Vec& v, int rows, int cols) {
  if (static_cast<int>(v.size()) != rows * cols) throw DimensionError("unflatten: size mismatch");
  Mat m(rows, cols);
  std::size_t k = 0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = v[k++];
  return m;
}

}  // namespace ftmpc
