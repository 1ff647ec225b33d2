#include <catch2/catch_amalgamated.hpp>

#include "ftmpc/matrix.hpp"

using namespace ftmpc;

namespace {

// simple deterministic generator for property tests
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
  Mat mat(int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = next();
    return m;
  }
};

const Mat kPaperA = Mat::from_rows({{1.1, 2.0}, {0.0, 0.95}});
const Mat kPaperB = Mat::from_rows({{0.0}, {0.079}});

}  // namespace

TEST_CASE("solve_linear identity and diagonal", "[matrix]") {
  const Mat b = Mat::from_rows({{3.0}, {4.0}});
  const Mat x = solve_linear(Mat::identity(2), b);
  CHECK(x(0, 0) == Catch::Approx(3.0));
  CHECK(x(1, 0) == Catch::Approx(4.0));

  const Mat a = Mat::from_rows({{2.0, 0.0}, {0.0, 4.0}});
  const Mat inv = solve_linear(a, Mat::identity(2));
  CHECK(inv(0, 0) == Catch::Approx(0.5));
  CHECK(inv(1, 1) == Catch::Approx(0.25));
  CHECK(inv(0, 1) == 0.0);
}

TEST_CASE("solve_linear inverts the paper controllability matrix", "[matrix]") {
  // S = [Ab, b] for the studied second-order plant
  const Mat s = Mat::from_rows({{0.158, 0.0}, {0.07505, 0.079}});
  const Mat sinv = solve_linear(s, Mat::identity(2));
  CHECK(sinv(0, 0) == Catch::Approx(6.3291).margin(1e-3));
  CHECK(sinv(0, 1) == Catch::Approx(0.0).margin(1e-12));
  CHECK(sinv(1, 0) == Catch::Approx(-6.0127).margin(1e-3));
  CHECK(sinv(1, 1) == Catch::Approx(12.658).margin(1e-3));
  CHECK(frob_norm(s * sinv - Mat::identity(2)) <= 1e-10);
}

TEST_CASE("solve_linear round trip on random well-conditioned systems", "[matrix]") {
  TestRng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + trial % 5;
    Mat a = rng.mat(n, n);
    for (int i = 0; i < n; ++i) a(i, i) += 3.0;  // diagonally dominant
    const Mat b = rng.mat(n, 3);
    const Mat x = solve_linear(a, b);
    CHECK(frob_norm(a * x - b) <= 1e-10 * (1.0 + frob_norm(b)));
  }
}

TEST_CASE("solve_linear handles row exchanges", "[matrix]") {
  // zero leading pivot forces interchanges on both factorization and solve
  const Mat a = Mat::from_rows({{0.0, 0.198, 0.56474},
                                {0.079, 0.15505, 0.220978},
                                {-0.1, -0.0921, -0.076595}});
  const Mat inv = solve_linear(a, Mat::identity(3));
  CHECK(frob_norm(a * inv - Mat::identity(3)) <= 1e-10);
  TestRng rng(13);
  for (int trial = 0; trial < 40; ++trial) {
    Mat m = rng.mat(4, 4);
    m(trial % 4, trial % 4) = 0.0;  // provoke pivoting
    const Vec b = {1.0, -2.0, 3.0, -4.0};
    Vec x;
    try {
      x = solve_linear(m, b);
    } catch (const SingularMatrixError&) {
      continue;
    }
    CHECK(norm_inf(m * x - b) <= 1e-9 * (1.0 + norm_inf(b)));
  }
}

TEST_CASE("solve_linear rejects singular matrices", "[matrix]") {
  const Mat a = Mat::from_rows({{1.0, 2.0}, {2.0, 4.0}});
  CHECK_THROWS_AS(solve_linear(a, Mat::identity(2)), SingularMatrixError);
}

TEST_CASE("cholesky basic cases", "[matrix]") {
  CHECK(frob_norm(cholesky(Mat::identity(2)) - Mat::identity(2)) <= 1e-14);
  const Mat d = Mat::from_rows({{4.0, 0.0}, {0.0, 9.0}});
  const Mat l = cholesky(d);
  CHECK(l(0, 0) == Catch::Approx(2.0));
  CHECK(l(1, 1) == Catch::Approx(3.0));
}

TEST_CASE("cholesky round trip on the paper terminal weight", "[matrix]") {
  const Mat p = Mat::from_rows({{6.7, 22.2}, {22.2, 106.8}});
  const Mat l = cholesky(p);
  CHECK(frob_norm(l * transpose(l) - p) <= 1e-10 * frob_norm(p));
}

TEST_CASE("cholesky round trip property", "[matrix]") {
  TestRng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + trial % 4;
    const Mat m = rng.mat(n, n);
    Mat p = transpose(m) * m;
    for (int i = 0; i < n; ++i) p(i, i) += 0.1;
    const Mat l = cholesky(p);
    CHECK(frob_norm(l * transpose(l) - p) <= 1e-10 * frob_norm(p));
  }
}

TEST_CASE("cholesky rejects indefinite input", "[matrix]") {
  const Mat a = Mat::from_rows({{1.0, 2.0}, {2.0, 1.0}});  // eigenvalues 3, -1
  CHECK_THROWS_AS(cholesky(a), NotPositiveDefiniteError);
}

TEST_CASE("sym_eig identity and diagonal", "[matrix]") {
  const auto r = sym_eig(Mat::identity(2));
  CHECK(r.values[0] == Catch::Approx(1.0));
  CHECK(r.values[1] == Catch::Approx(1.0));

  const auto d = sym_eig(Mat::from_rows({{5.0, 0.0}, {0.0, 2.0}}));
  CHECK(d.values[0] == Catch::Approx(2.0));  // ascending
  CHECK(d.values[1] == Catch::Approx(5.0));
  CHECK(std::abs(d.vectors(1, 0)) == Catch::Approx(1.0));
  CHECK(std::abs(d.vectors(0, 1)) == Catch::Approx(1.0));
}

TEST_CASE("sym_eig reconstructs the paper terminal weight", "[matrix]") {
  const Mat p = Mat::from_rows({{6.7, 22.2}, {22.2, 106.8}});
  const auto r = sym_eig(p);
  const Mat recon = r.vectors * Mat::diag(r.values) * transpose(r.vectors);
  CHECK(frob_norm(recon - p) <= 1e-9 * frob_norm(p));
}

TEST_CASE("sym_eig orthonormality and ordering property", "[matrix]") {
  TestRng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 5;
    const Mat m = rng.mat(n, n);
    const Mat s = 0.5 * (m + transpose(m));
    const auto r = sym_eig(s);
    CHECK(frob_norm(transpose(r.vectors) * r.vectors - Mat::identity(n)) <= 1e-9);
    for (int i = 1; i < n; ++i) CHECK(r.values[i - 1] <= r.values[i] + 1e-12);
    const Mat recon = r.vectors * Mat::diag(r.values) * transpose(r.vectors);
    CHECK(frob_norm(recon - s) <= 1e-9 * std::max(frob_norm(s), 1.0));
  }
}

TEST_CASE("spectral radius certificate", "[matrix]") {
  CHECK(spectral_radius_below_one(Mat(2, 2)));
  CHECK_FALSE(spectral_radius_below_one(Mat::identity(3)));
  CHECK(spectral_radius_below_one(Mat::from_rows({{0.999, 0.0}, {0.0, 0.5}})));
  // rotation scaled slightly above one diverges
  CHECK_FALSE(spectral_radius_below_one(Mat::from_rows({{0.0, 1.001}, {-1.001, 0.0}})));
  // the paper closed loop A - bK with K = [4.3, 24.7]
  const Mat k = Mat::from_rows({{4.3, 24.7}});
  CHECK(spectral_radius_below_one(kPaperA - kPaperB * k));
}

TEST_CASE("mat_pow basics and paper square", "[matrix]") {
  TestRng rng(5);
  const Mat m = rng.mat(3, 3);
  CHECK(frob_norm(mat_pow(m, 0) - Mat::identity(3)) == 0.0);

  const Mat nil = Mat::from_rows({{0.0, 1.0}, {0.0, 0.0}});
  CHECK(frob_norm(mat_pow(nil, 2)) == 0.0);

  // hand-multiplied oracle for A^2
  const Mat a2 = mat_pow(kPaperA, 2);
  CHECK(a2(0, 0) == Catch::Approx(1.21).epsilon(1e-12));
  CHECK(a2(0, 1) == Catch::Approx(4.1).epsilon(1e-12));
  CHECK(a2(1, 0) == 0.0);
  CHECK(a2(1, 1) == Catch::Approx(0.9025).epsilon(1e-12));
}

TEST_CASE("mat_pow additivity property", "[matrix]") {
  TestRng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const Mat m = 0.8 * rng.mat(3, 3);
    for (int p = 0; p <= 3; ++p)
      for (int q = 0; q <= 3; ++q) {
        const Mat lhs = mat_pow(m, p + q);
        const Mat rhs = mat_pow(m, p) * mat_pow(m, q);
        CHECK(frob_norm(lhs - rhs) <= 1e-9 * std::max(1.0, frob_norm(lhs)));
      }
  }
}

TEST_CASE("kron definition", "[matrix]") {
  TestRng rng(3);
  const Mat m = rng.mat(2, 3);
  CHECK(frob_norm(kron(Mat::identity(1), m) - m) == 0.0);

  const Mat d = Mat::from_rows({{2.0, 0.0}, {0.0, 3.0}});
  const Mat k = kron(d, Mat::identity(2));
  CHECK(k.rows() == 4);
  CHECK(k(0, 0) == 2.0);
  CHECK(k(3, 3) == 3.0);
  CHECK(k(0, 2) == 0.0);

  // element-by-element oracle on a random pair
  const Mat a = rng.mat(2, 2), b = rng.mat(2, 2);
  const Mat ab = kron(a, b);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(ab(i, j) == Catch::Approx(a(i / 2, j / 2) * b(i % 2, j % 2)).margin(1e-15));
}
