#include <doctest.h>

#include <cmath>

#include "ntkmeta/ntk.hpp"
#include "oracles.hpp"

using namespace ntkmeta;

namespace {

/// Θ(x1, x2) from finite-difference Jacobians.
Matrix fd_entry(const NetworkSpec& spec, const ParamVector& theta, std::span<const double> a,
                std::span<const double> b) {
  return oracle::naive_matmul(oracle::fd_jacobian(spec, theta, a),
                              transpose(oracle::fd_jacobian(spec, theta, b)));
}

}  // namespace

TEST_CASE("ntk_entry") {
  const NetworkSpec spec = NetworkSpec::mlp(3, {6, 5}, 2);
  const ParamVector theta = init_params(spec, 1);
  const Vector x1 = {0.1, -0.4, 0.8}, x2 = {-0.6, 0.2, 0.3};
  const Matrix k11 = ntk_entry(spec, theta, x1, x1);
  CHECK(k11 == transpose(k11));
  CHECK(k11(0, 0) >= 0.0);
  CHECK(k11(0, 0) * k11(1, 1) - k11(0, 1) * k11(1, 0) >= -1e-12 * k11(0, 0) * k11(1, 1));
  CHECK(ntk_entry(spec, theta, x1, x2) == transpose(ntk_entry(spec, theta, x2, x1)));
  CHECK(oracle::rel_diff(ntk_entry(spec, theta, x1, x2), fd_entry(spec, theta, x1, x2)) <= 1e-6);

  // Linear model f(x) = xW: Θ(x1, x2) = (x1·x2)·I.
  const NetworkSpec lin = NetworkSpec::linear(3, 3);
  const ParamVector w = init_params(lin, 2);
  const Matrix k = ntk_entry(lin, w, x1, x2);
  const double d = dot(x1, x2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(k(i, j) == doctest::Approx(i == j ? d : 0.0));
}

TEST_CASE("gram") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {8, 8}, 1);
  const ParamVector theta = init_params(spec, 3);
  const Matrix x = oracle::uniform_inputs(6, 2, 4);
  const Matrix h = gram(spec, theta, x);
  CHECK(h == transpose(h));
  CHECK(min_eigenvalue_estimate(h) >= -1e-8 * spectral_radius_sym(h));

  double scale = 0.0;
  for (std::size_t i = 0; i < 6; ++i) scale = std::max(scale, h(i, i));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      const Matrix ji = jacobian(spec, theta, x.row(i)), jj = jacobian(spec, theta, x.row(j));
      CHECK(std::abs(h(i, j) - dot(ji.row(0), jj.row(0))) <= 1e-12 * scale);
    }

  const Matrix one = x.row_block(0, 1);
  CHECK(gram(spec, theta, one) == ntk_entry(spec, theta, one.row(0), one.row(0)));

  Matrix dup(2, 2);
  dup(0, 0) = dup(1, 0) = 0.3;
  dup(0, 1) = dup(1, 1) = -0.2;
  const Matrix hd = gram(spec, theta, dup);
  CHECK(std::abs(hd(0, 0) * hd(1, 1) - hd(0, 1) * hd(1, 0)) <= 1e-12);
}

TEST_CASE("full and scalar gram layouts") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {5}, 3);
  const ParamVector theta = init_params(spec, 5);
  const Matrix x = oracle::uniform_inputs(4, 2, 6);
  const Matrix full = gram(spec, theta, x);
  const Matrix scalar = gram_scalar(spec, theta, x);
  REQUIRE(full.rows() == 12);
  REQUIRE(scalar.rows() == 4);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) {
      const Matrix e = ntk_entry(spec, theta, x.row(a), x.row(b));
      double tr = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        tr += e(i, i);
        for (std::size_t j = 0; j < 3; ++j)
          CHECK(full(a * 3 + i, b * 3 + j) == doctest::Approx(e(i, j)).epsilon(1e-12));
      }
      CHECK(scalar(a, b) == doctest::Approx(tr).epsilon(1e-12));
    }
}

TEST_CASE("cross_gram") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {6}, 2);
  const ParamVector theta = init_params(spec, 7);
  const Matrix x = oracle::uniform_inputs(3, 2, 8);
  const Matrix h = gram(spec, theta, x);
  const Matrix c = cross_gram(spec, theta, x.row(1), x);
  REQUIRE(c.rows() == 2);
  REQUIRE(c.cols() == 6);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(c(i, j) == doctest::Approx(h(2 + i, j)).epsilon(1e-12));

  const Vector q = {0.5, 0.5};
  CHECK(oracle::rel_diff(cross_gram(spec, theta, q, x.row_block(2, 1)),
                         ntk_entry(spec, theta, q, x.row(2))) <= 1e-14);
}

TEST_CASE("kernel norm of the functional gradient equals the parameter gradient norm") {
  const std::vector<NetworkSpec> specs = {NetworkSpec::mlp(2, {6}, 1), NetworkSpec::mlp(3, {5, 5}, 3),
                                          NetworkSpec::mlp(1, {4, 4, 4}, 2),
                                          NetworkSpec::conv(6, {2}, 3, {4}, 3)};
  std::uint64_t seed = 10;
  for (const NetworkSpec& spec : specs) {
    for (LossKind kind : {LossKind::squared, LossKind::cross_entropy}) {
      if (kind == LossKind::cross_entropy && spec.output_dim() < 2) continue;
      for (int draw = 0; draw < 3; ++draw) {
        const ParamVector theta = init_params(spec, ++seed);
        Dataset d{oracle::uniform_inputs(5, spec.input_dim(), ++seed), Matrix(5, spec.output_dim())};
        CounterRng rng(++seed);
        for (std::size_t i = 0; i < 5; ++i) d.y(i, rng.next_u64() % spec.output_dim()) = 1.0;
        const Vector g = grad_loss(spec, theta, d, kind);
        const double want = dot(g, g);
        CHECK(std::abs(functional_grad_norm_sq(spec, theta, d, kind) - want) <= 1e-8 * want);
      }
    }
  }
}

TEST_CASE("functional_grad_norm_sq special cases") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {5}, 1);
  const ParamVector theta = init_params(spec, 20);
  Dataset d{oracle::uniform_inputs(1, 2, 21), Matrix{{0.7}}};
  const double r = predict(spec, theta, d.x)(0, 0) - 0.7;
  const double k = ntk_entry(spec, theta, d.x.row(0), d.x.row(0))(0, 0);
  CHECK(functional_grad_norm_sq(spec, theta, d, LossKind::squared) == doctest::Approx(r * r * k).epsilon(1e-12));
  d.y = predict(spec, theta, d.x);
  CHECK(functional_grad_norm_sq(spec, theta, d, LossKind::squared) == 0.0);
}

TEST_CASE("rbf kernel") {
  const Matrix x{{0.0}, {1.0}, {2.0}};
  const Matrix k = rbf_gram(x, 0.5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(k(i, i) == 1.0);
  CHECK(std::abs(k(0, 1) - std::exp(-1.0 / 0.5)) <= 1e-12);
  CHECK(std::abs(k(0, 2) - std::exp(-4.0 / 0.5)) <= 1e-12);
  CHECK(rbf_cross(Matrix{{0.0}}, Matrix{{10.0}}, 1.0)(0, 0) <= 1e-10);
  CHECK(median_bandwidth(x) == 1.0);
  CHECK(median_bandwidth(Matrix(3, 2)) == 1.0);
}
