#include <doctest.h>

#include <cmath>

#include "ntkmeta/error.hpp"
#include "ntkmeta/linalg.hpp"
#include "oracles.hpp"

using namespace ntkmeta;

TEST_CASE("matmul") {
  const Matrix m = oracle::random_matrix(3, 4, 1);
  CHECK(matmul(Matrix::identity(3), m) == m);
  CHECK(matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{0}, {1}}) == Matrix{{2}, {4}});

  const Matrix a = oracle::random_matrix(5, 7, 2), b = oracle::random_matrix(7, 3, 3);
  CHECK(oracle::max_abs_diff(matmul(a, b).data(), oracle::naive_matmul(a, b).data()) <= 1e-12);
  CHECK_THROWS_AS(matmul(a, a), Error);
}

TEST_CASE("solve_spd") {
  const Matrix b = oracle::random_matrix(4, 2, 4);
  CHECK(solve_spd(Matrix::identity(4), b, 0.0).x == b);
  const Matrix d = solve_spd(Matrix{{2, 0}, {0, 4}}, Matrix{{2}, {8}}, 0.0).x;
  CHECK(d(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(d(1, 0) == doctest::Approx(2.0).epsilon(1e-15));

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix a = oracle::random_spd(8, 10 + seed, 1.0);
    const Matrix rhs = oracle::random_matrix(8, 3, 20 + seed);
    const SpdSolution s = solve_spd(a, rhs, 0.0);
    CHECK(s.escalations == 0);
    CHECK(norm_inf(matmul(a, s.x) - rhs) <= 1e-9);
  }
}

TEST_CASE("solve_spd escalates jitter on singular input and gives up at the cap") {
  // Rank-1 PSD matrix: needs jitter, and succeeds once some is added.
  const Matrix v = oracle::random_matrix(5, 1, 7);
  const Matrix rank1 = matmul(v, transpose(v));
  const SpdSolution s = solve_spd(rank1, oracle::random_matrix(5, 1, 8), 0.0);
  CHECK(s.escalations > 0);
  CHECK(s.jitter > 0.0);

  // Indefinite matrix never factors within the cap.
  const Matrix indefinite{{1, 0}, {0, -1}};
  CHECK_THROWS_AS(solve_spd(indefinite, Matrix{{1}, {1}}, 0.0), KernelSingularError);
  CHECK_THROWS_AS(solve_spd(Matrix{{1, 2}}, Matrix{{1}}, 0.0), Error);
}

TEST_CASE("pade_expm") {
  CHECK(pade_expm(Matrix(3, 3), 1) == Matrix::identity(3));
  CHECK(pade_expm(Matrix(3, 3), 2) == Matrix::identity(3));

  const double p1 = pade_expm(Matrix{{-0.1}}, 1)(0, 0);
  CHECK(p1 == doctest::Approx(0.904762).epsilon(1e-6));
  CHECK(p1 == (1.0 - 0.05) / (1.0 + 0.05));

  for (double a : {-3.0, -0.5, 0.25, 1.5}) {
    const double h = a / 2, q = a * a / 12;
    CHECK(pade_expm(Matrix{{a}}, 1)(0, 0) == (1 + h) / (1 - h));
    CHECK(pade_expm(Matrix{{a}}, 2)(0, 0) == (1 + h + q) / (1 - h + q));
  }

  const Matrix e = expm_scaled(Matrix{{-1, 0}, {0, -2}}, 2);
  CHECK(std::abs(e(0, 0) - std::exp(-1.0)) <= 1e-8);
  CHECK(std::abs(e(1, 1) - std::exp(-2.0)) <= 1e-8);
  CHECK(e(0, 1) == 0.0);

  CHECK_THROWS_AS(pade_expm(Matrix{{2.0}}, 1), Error);
  CHECK_THROWS_AS(pade_expm(Matrix(2, 2), 3), Error);
}

TEST_CASE("expm_oracle") {
  CHECK(expm_oracle(Matrix(2, 2)) == Matrix::identity(2));
  CHECK(std::abs(expm_oracle(Matrix{{3.0}})(0, 0) / std::exp(3.0) - 1.0) <= 1e-10);
  const Matrix nil = expm_oracle(Matrix{{0, 1}, {0, 0}});
  CHECK(oracle::max_abs_diff(nil.data(), Matrix{{1, 1}, {0, 1}}.data()) <= 1e-15);

  for (double a = -100.0; a <= 100.0; a += 12.5)
    CHECK(std::abs(expm_oracle(Matrix{{a}})(0, 0) / std::exp(a) - 1.0) <= 1e-10);

  // Symmetric input against the eigendecomposition oracle.
  const Matrix h = oracle::random_spd(6, 30) * 0.2;
  const Matrix want = oracle::spectral_apply(h * -1.0, [](double l) { return std::exp(l); });
  CHECK(oracle::rel_diff(expm_oracle(h * -1.0), want) <= 1e-10);
}

TEST_CASE("e^{-tH} is a symmetric contraction for PSD H") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Matrix h = oracle::random_spd(10, 40 + seed);
    for (int order : {1, 2}) {
      for (double t : {0.01, 1.0, 100.0}) {
        const Matrix e = expm_scaled(h * -t, order);
        CHECK(max_abs(e - transpose(e)) <= 1e-9);
        CHECK(spectral_radius_sym(symmetrize(e)) <= 1.0 + 1e-9);
      }
    }
  }
}

TEST_CASE("scaled Padé converges to the oracle as the threshold shrinks") {
  const Matrix h = oracle::random_spd(5, 50) * -0.5;
  const Matrix exact = expm_oracle(h);
  const double coarse = oracle::rel_diff(expm_scaled(h, 1, 0.5), exact);
  const double fine = oracle::rel_diff(expm_scaled(h, 1, default_scaling_threshold(1)), exact);
  CHECK(fine < coarse);
  CHECK(fine <= 1e-8);
  CHECK(oracle::rel_diff(expm_scaled(h, 2), exact) <= 1e-8);
}

TEST_CASE("spectral estimates") {
  const Matrix h = oracle::random_spd(7, 60);
  const oracle::Eigen e = oracle::jacobi_eigen(h);
  double top = 0.0;
  for (double l : e.values) top = std::max(top, std::abs(l));
  CHECK(spectral_radius_sym(h) == doctest::Approx(top).epsilon(1e-9));
  CHECK(spectral_norm(Matrix{{3, 0}, {0, -5}}) == doctest::Approx(5.0));
  CHECK(spectral_norm(Matrix(3, 3)) == 0.0);
}
