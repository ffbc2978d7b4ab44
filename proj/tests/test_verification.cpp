#include <doctest.h>

#include <cmath>

#include "ntkmeta/verification.hpp"
#include "oracles.hpp"

using namespace ntkmeta;

namespace {

Dataset regression_data(std::size_t n, std::size_t d, std::uint64_t seed) {
  Dataset ds{oracle::uniform_inputs(n, d, seed), Matrix(n, 1)};
  CounterRng rng(seed + 1);
  for (double& v : ds.y.data()) v = rng.normal();
  return ds;
}

}  // namespace

TEST_CASE("finite_diff_grad on closed-form objectives") {
  const Vector theta = {0.3, -1.2, 4.0, 0.0};
  const Vector g0 = finite_diff_grad([](std::span<const double>) { return 2.5; }, theta, 1e-5);
  for (double v : g0) CHECK(v == 0.0);
  const Vector g = finite_diff_grad(
      [](std::span<const double> p) { return 0.5 * dot(p, p); }, theta, 1e-5);
  CHECK(oracle::max_abs_diff(g, theta) <= 1e-9);
}

TEST_CASE("relative_error") {
  CHECK(relative_error(Vector{1.0, 2.0}, Vector{1.0, 2.0}) == 0.0);
  CHECK(relative_error(Vector{3.0, 0.0}, Vector{0.0, 4.0}) == doctest::Approx(1.25));
}

TEST_CASE("linearized flow at t = 0 is the network output") {
  const NetworkSpec spec = NetworkSpec::mlp(3, {8}, 1);
  const ParamVector theta = init_params(spec, 2);
  const Dataset sup = regression_data(5, 3, 3);
  const Matrix q = oracle::uniform_inputs(4, 3, 4);
  const OdeResult r = linearized_flow(spec, theta, sup, q, 0.0);
  CHECK(r.predictions == predict(spec, theta, q));
}

TEST_CASE("linearized flow with one support point follows the scalar exponential") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {6}, 1);
  const ParamVector theta = init_params(spec, 5);
  const Dataset sup = regression_data(1, 2, 6);
  const Matrix q = oracle::uniform_inputs(3, 2, 7);
  const double t = 0.7;
  const OdeResult r = linearized_flow(spec, theta, sup, q, t);
  // q(t) = f(q) + H(q, x)/H(x, x)·(e^{−tH(x,x)} − 1)(f(x) − y)
  const Matrix jx = oracle::fd_jacobian(spec, theta, sup.x.row(0));
  const double hxx = dot(jx.row(0), jx.row(0));
  const double r0 = predict(spec, theta, sup.x)(0, 0) - sup.y(0, 0);
  const Matrix f = predict(spec, theta, q);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const Matrix jq = oracle::fd_jacobian(spec, theta, q.row(i));
    const double hqx = dot(jq.row(0), jx.row(0));
    const double want = f(i, 0) + hqx / hxx * std::expm1(-t * hxx) * r0;
    CHECK(r.predictions(i, 0) == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("RK4 integration converges under step halving") {
  const NetworkSpec spec = NetworkSpec::mlp(3, {10}, 1);
  const ParamVector theta = init_params(spec, 8);
  const Dataset sup = regression_data(6, 3, 9);
  const Matrix q = oracle::uniform_inputs(5, 3, 10);
  OdeConfig coarse;
  coarse.steps_per_unit = 500;
  OdeConfig fine = coarse;
  fine.steps_per_unit = 1000;
  fine.max_step_stiffness = coarse.max_step_stiffness / 2;
  const OdeResult a = linearized_flow(spec, theta, sup, q, 1.0, coarse);
  const OdeResult b = linearized_flow(spec, theta, sup, q, 1.0, fine);
  CHECK(b.steps >= 2 * a.steps - 1);
  CHECK(oracle::max_abs_diff(a.predictions.data(), b.predictions.data()) <= 1e-6);
  const Matrix o = linearized_flow_oracle(spec, theta, sup, q, 1.0);
  CHECK(oracle::max_abs_diff(o.data(), b.predictions.data()) <= 1e-6);
}

TEST_CASE("learning-rate bound is positive and shrinks with scale") {
  const NetworkSpec spec = NetworkSpec::mlp(3, {10, 10}, 1);
  ParamVector theta = init_params(spec, 1);
  const double b1 = learning_rate_bound(spec, theta);
  for (double& v : theta) v *= 10.0;
  const double b2 = learning_rate_bound(spec, theta);
  CHECK(b1 > 0.0);
  CHECK(b2 < b1);
}

TEST_CASE("sweeps on a reduced grid") {
  SweepConfig c;
  c.depths = {1, 2};
  c.include_conv = false;
  c.draws = 3;
  c.seeds = {0, 1};
  const SweepReport r = theorem_sweeps(c, "abc");
  CHECK(r.summary.k1_identity);
  CHECK(r.summary.max_t0_gap <= 1e-10);
  CHECK(r.summary.total_seeds == 2);
  CHECK(r.summary.monotone_seeds == 2);
  CHECK(r.csv.rfind("sweep_name,seed,arch,depth,alpha,k,time,value,in_regime,pass,config_hash\n", 0) == 0);
}
