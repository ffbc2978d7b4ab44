#include <doctest.h>

#include <cmath>

#include "ntkmeta/error.hpp"
#include "ntkmeta/meta.hpp"
#include "ntkmeta/ntk.hpp"
#include "ntkmeta/tasks.hpp"
#include "ntkmeta/verification.hpp"
#include "oracles.hpp"

using namespace ntkmeta;

namespace {

Task regression_task(const NetworkSpec& spec, std::size_t n, std::size_t nq, std::uint64_t seed) {
  Task t;
  t.support = {oracle::uniform_inputs(n, spec.input_dim(), seed), oracle::random_matrix(n, spec.output_dim(), seed + 1)};
  t.query = {oracle::uniform_inputs(nq, spec.input_dim(), seed + 2),
             oracle::random_matrix(nq, spec.output_dim(), seed + 3)};
  return t;
}

std::vector<Task> regression_tasks(const NetworkSpec& spec, std::size_t count, std::uint64_t seed) {
  std::vector<Task> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(regression_task(spec, 4, 3, seed + 10 * i));
  return out;
}

/// f + H(x,X)·H⁻¹·(e^{−(t/n)H} − I)·(f(X) − Y) through an eigendecomposition of H.
Matrix eigen_closed_form(const NetworkSpec& spec, const ParamVector& theta, const Dataset& s,
                         const Matrix& q, double t) {
  const std::size_t n = s.size();
  const Matrix h = gram(spec, theta, s.x);
  const Matrix m = oracle::spectral_apply(
      h, [&](double l) { return (std::exp(-t * l / static_cast<double>(n)) - 1.0) / l; });
  const Matrix v = oracle::naive_matmul(m, predict(spec, theta, s.x) - s.y);
  Matrix out = predict(spec, theta, q);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const Matrix c = cross_gram(spec, theta, q.row(i), s.x);
    out(i, 0) += oracle::naive_matmul(c, v)(0, 0);
  }
  return out;
}

}  // namespace

TEST_CASE("adapt time") {
  CHECK(AdaptTime::parse("inf").is_infinite());
  CHECK(AdaptTime::parse("2.5").value() == 2.5);
  CHECK(AdaptTime::parse(AdaptTime::finite(0.1).to_string()) == AdaptTime::finite(0.1));
  CHECK_THROWS_AS(AdaptTime::finite(-1.0), Error);
  CHECK_THROWS_AS(AdaptTime::parse("soon"), Error);
  CHECK_THROWS_AS(AdaptTime::infinite().value(), Error);
}

TEST_CASE("meta config validation names the field") {
  MetaConfig c;
  c.meta_batch = 0;
  try {
    c.validate("meta");
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config);
    CHECK(e.field() == "meta.meta_batch");
  }
  MetaConfig p;
  p.pade_order = 3;
  CHECK_THROWS_AS(p.validate(), Error);
}

TEST_CASE("fast-adaptation objective") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {6, 6}, 1);
  const ParamVector theta = init_params(spec, 1);
  const std::vector<Task> tasks = regression_tasks(spec, 3, 2);

  double plain = 0.0, reg = 0.0;
  for (const Task& t : tasks) {
    const Vector g = grad_loss(spec, theta, t.support, LossKind::squared);
    plain += loss(spec, theta, t.support, LossKind::squared) / 3.0;
    reg += dot(g, g) / 3.0;
  }
  CHECK(meta_rkhs_1_objective(spec, theta, tasks, 0.0) == doctest::Approx(plain).epsilon(1e-14));
  const double alpha = 0.05;
  CHECK(std::abs(meta_rkhs_1_objective(spec, theta, tasks, alpha) - (plain - alpha * reg)) <=
        1e-8 * std::abs(plain - alpha * reg));

  std::vector<Task> fit = tasks;
  for (Task& t : fit) t.support.y = predict(spec, theta, t.support.x);
  CHECK(meta_rkhs_1_objective(spec, theta, fit, alpha) == 0.0);
}

TEST_CASE("fast-adaptation gradient") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {6, 6}, 1);
  const ParamVector theta = init_params(spec, 3);
  const std::vector<Task> tasks = regression_tasks(spec, 3, 4);
  const double alpha = 0.02;

  Vector mean(theta.size(), 0.0);
  for (const Task& t : tasks) axpy(1.0 / 3.0, grad_loss(spec, theta, t.support, LossKind::squared), mean);
  CHECK(relative_error(meta_rkhs_1_grad(spec, theta, tasks, 0.0, 1e-5), mean) <= 1e-14);

  for (bool split : {false, true}) {
    const Vector g = meta_rkhs_1_grad(spec, theta, tasks, alpha, 1e-5, LossKind::squared, split);
    const Vector fd = finite_diff_grad(
        [&](std::span<const double> p) {
          return meta_rkhs_1_objective(spec, p, tasks, alpha, LossKind::squared, split);
        },
        theta, 1e-6);
    CHECK(relative_error(g, fd) <= 1e-4);
  }
}

TEST_CASE("fast-adaptation gradient on a linear model is exact") {
  const NetworkSpec lin = NetworkSpec::linear(3, 1);
  const ParamVector w = {0.4, -0.2, 1.1};
  std::vector<Task> tasks = {regression_task(lin, 5, 2, 7)};
  const Dataset& d = tasks[0].support;
  const double alpha = 0.1;
  // ∇L = Xᵀr/n, Hessian XᵀX/n.
  const Matrix x = d.x;
  const Matrix r = predict(lin, w, x) - d.y;
  Vector g(3, 0.0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) g[j] += x(i, j) * r(i, 0) / 5.0;
  const Matrix hess = oracle::naive_matmul(transpose(x), x) * (1.0 / 5.0);
  Vector want = g;
  const Vector hg = matvec(hess, g);
  axpy(-2.0 * alpha, hg, want);
  CHECK(relative_error(meta_rkhs_1_grad(lin, w, tasks, alpha, 1e-5), want) <= 1e-8);
  CHECK(relative_error(hvp(lin, w, d, LossKind::squared, g, 1e-5), hg) <= 1e-8);
}

TEST_CASE("closed-form adaptation") {
  const NetworkSpec spec = NetworkSpec::mlp(3, {16, 16}, 1);
  const ParamVector theta = init_params(spec, 11);
  const Dataset support{oracle::uniform_inputs(5, 3, 12), oracle::random_matrix(5, 1, 13)};
  const Matrix q = oracle::uniform_inputs(10, 3, 14);

  const auto p0 = adapt_closed_form(spec, theta, support, AdaptTime::finite(0.0), 2);
  CHECK(p0.predict(q) == predict(spec, theta, q));

  const auto pinf = adapt_closed_form(spec, theta, support, AdaptTime::infinite(), 2);
  REQUIRE(pinf.escalations() == 0);
  CHECK(oracle::max_abs_diff(pinf.predict(support.x).data(), support.y.data()) <= 1e-6);

  for (double t : {0.5, 1.0, 5.0}) {
    const Matrix closed = adapt_closed_form(spec, theta, support, AdaptTime::finite(t), 2).predict(q);
    CHECK(oracle::rel_diff(closed, linearized_flow_oracle(spec, theta, support, q, t)) <= 1e-4);
    CHECK(oracle::rel_diff(closed, eigen_closed_form(spec, theta, support, q, t)) <= 1e-7);
  }

  // Large finite t approaches the infinite-time limit.
  const Matrix big = adapt_closed_form(spec, theta, support, AdaptTime::finite(1e7), 2).predict(q);
  CHECK(oracle::rel_diff(big, pinf.predict(q)) <= 1e-5);
}

TEST_CASE("closed-form adaptation with vector outputs and rbf kernels") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {12}, 3);
  const ParamVector theta = init_params(spec, 21);
  const Dataset support{oracle::uniform_inputs(4, 2, 22), oracle::random_matrix(4, 3, 23)};
  const Matrix q = oracle::uniform_inputs(6, 2, 24);
  for (KernelKind kind : {KernelKind::ntk, KernelKind::ntk_scalar, KernelKind::rbf}) {
    const KernelSpec k{kind, 0.0};
    const auto inf = adapt_closed_form(spec, theta, support, AdaptTime::infinite(), 2, k);
    CHECK(oracle::max_abs_diff(inf.predict(support.x).data(), support.y.data()) <= 1e-6);
    const Matrix closed = adapt_closed_form(spec, theta, support, AdaptTime::finite(1.0), 2, k).predict(q);
    CHECK(oracle::rel_diff(closed, linearized_flow_oracle(spec, theta, support, q, 1.0, {}, k)) <= 1e-4);
  }
}

TEST_CASE("kernel-regression objective") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {8, 8}, 1);
  const ParamVector theta = init_params(spec, 31);
  std::vector<Task> tasks = regression_tasks(spec, 2, 32);
  MetaConfig c;
  c.adapt_time = AdaptTime::finite(0.0);
  double plain = 0.0;
  Vector qgrad(theta.size(), 0.0);
  for (const Task& t : tasks) {
    plain += loss(spec, theta, t.query, LossKind::squared) / 2.0;
    axpy(0.5, grad_loss(spec, theta, t.query, LossKind::squared), qgrad);
  }
  CHECK(meta_rkhs_2_objective(spec, theta, tasks, c) == doctest::Approx(plain).epsilon(1e-14));
  CHECK(relative_error(meta_rkhs_2_grad(spec, theta, tasks, c), qgrad) <= 1e-12);

  std::vector<Task> same = tasks;
  for (Task& t : same) t.query = t.support;
  c.adapt_time = AdaptTime::infinite();
  CHECK(meta_rkhs_2_objective(spec, theta, same, c) <= 1e-12);
}

TEST_CASE("kernel-regression gradients") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {8, 8}, 1);
  const ParamVector theta = init_params(spec, 41);
  const std::vector<Task> tasks = regression_tasks(spec, 2, 42);
  for (AdaptTime t : {AdaptTime::finite(0.5), AdaptTime::infinite()}) {
    MetaConfig c;
    c.adapt_time = t;
    const Vector frozen = meta_rkhs_2_grad(spec, theta, tasks, c);
    const Vector fd_frozen = finite_diff_grad(
        [&](std::span<const double> p) {
          return meta_rkhs_2_objective(spec, p, tasks, c, std::span<const double>(theta));
        },
        theta, 1e-6);
    CHECK(relative_error(frozen, fd_frozen) <= 1e-5);

    c.stop_gradient_kernel = false;
    const Vector full = meta_rkhs_2_grad(spec, theta, tasks, c);
    const Vector fd_full = finite_diff_grad(
        [&](std::span<const double> p) { return meta_rkhs_2_objective(spec, p, tasks, c); }, theta, 1e-6);
    CHECK(relative_error(full, fd_full) <= 1e-4);
    MESSAGE("frozen vs full finite differences: " << relative_error(frozen, fd_full));
  }
}

TEST_CASE("label encoding") {
  const Matrix e = encode_labels({0}, 2);
  CHECK(e == Matrix{{0.5, -0.5}});
  for (std::size_t c = 2; c <= 10; ++c) {
    std::vector<int> labels;
    for (std::size_t i = 0; i < 3 * c; ++i) labels.push_back(static_cast<int>((i * 7) % c));
    const Matrix enc = encode_labels(labels, c);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      double s = 0.0;
      for (double v : enc.row(i)) s += v;
      CHECK(std::abs(s) <= 1e-15);
    }
    CHECK(decode_labels(enc) == labels);
  }
  CHECK_THROWS_AS(encode_labels({2}, 2), Error);
}

TEST_CASE("maml family") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {6, 6}, 1);
  const ParamVector theta = init_params(spec, 51);
  const std::vector<Task> tasks = regression_tasks(spec, 2, 52);

  Vector qgrad(theta.size(), 0.0);
  for (const Task& t : tasks) axpy(0.5, grad_loss(spec, theta, t.query, LossKind::squared), qgrad);
  CHECK(relative_error(maml_meta_grad(spec, theta, tasks, 0.0, 3, 1e-5), qgrad) <= 1e-14);

  const double lr = 0.01;
  const int k = 3;
  const Vector g = maml_meta_grad(spec, theta, tasks, lr, k, 1e-5);
  const Vector fd = finite_diff_grad(
      [&](std::span<const double> p) {
        double v = 0.0;
        for (const Task& t : tasks)
          v += loss(spec, adapt_gradient(spec, p, t.support, lr, k, LossKind::squared), t.query,
                    LossKind::squared) / 2.0;
        return v;
      },
      theta, 1e-6);
  CHECK(relative_error(g, fd) <= 1e-4);

  Vector disp(theta.size(), 0.0);
  for (const Task& t : tasks) {
    const ParamVector phi = adapt_gradient(spec, theta, t.support, lr, k, LossKind::squared);
    for (std::size_t i = 0; i < theta.size(); ++i) disp[i] += 0.5 * (theta[i] - phi[i]);
  }
  CHECK(relative_error(maml_meta_grad(spec, theta, tasks, lr, k, 1e-5, MamlVariant::reptile), disp) <= 1e-14);
}

TEST_CASE("maml on a linear model") {
  const NetworkSpec lin = NetworkSpec::linear(3, 1);
  const ParamVector w = {0.3, 0.8, -0.5};
  std::vector<Task> tasks = {regression_task(lin, 4, 3, 61)};
  const double lr = 0.1;
  const Matrix& xs = tasks[0].support.x;
  const ParamVector phi = adapt_gradient(lin, w, tasks[0].support, lr, 1, LossKind::squared);
  const Vector gq = grad_loss(lin, phi, tasks[0].query, LossKind::squared);
  Matrix jac = Matrix::identity(3) - oracle::naive_matmul(transpose(xs), xs) * (lr / 4.0);
  const Vector want = matvec(jac, gq);
  CHECK(relative_error(maml_meta_grad(lin, w, tasks, lr, 1, 1e-5), want) <= 1e-6);

  // Zero support inputs: no curvature, so MAML and FOMAML agree.
  tasks[0].support.x = Matrix(4, 3);
  CHECK(relative_error(maml_meta_grad(lin, w, tasks, lr, 2, 1e-5),
                       maml_meta_grad(lin, w, tasks, lr, 2, 1e-5, MamlVariant::fomaml)) <= 1e-12);
}

TEST_CASE("taylor gap") {
  const NetworkSpec spec = NetworkSpec::mlp(2, {6, 6}, 1);
  const ParamVector theta = init_params(spec, 71);
  const std::vector<Task> tasks = regression_tasks(spec, 2, 72);
  CHECK(taylor_gap(spec, theta, tasks, 0.01, 1) <= 1e-8);
  CHECK(taylor_gap(spec, theta, tasks, 0.01, 3) > 0.0);

  std::vector<Task> still = tasks;
  for (Task& t : still) t.support.y = Matrix(t.support.size(), 1);
  CHECK(taylor_gap(spec, ParamVector(spec.param_count(), 0.0), still, 0.01, 3) == 0.0);
}
