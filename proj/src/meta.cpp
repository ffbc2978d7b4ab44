#include "ntkmeta/meta.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ntkmeta/csv.hpp"
#include "ntkmeta/error.hpp"
#include "ntkmeta/parallel.hpp"

namespace ntkmeta {

namespace {

void require_tasks(const std::vector<Task>& tasks, bool need_query) {
  if (tasks.empty()) throw Error(ErrorCode::invalid_argument, "meta-batch is empty");
  for (const Task& t : tasks) {
    if (t.support.size() == 0) throw Error(ErrorCode::invalid_argument, "task support set is empty");
    if (need_query && t.query.size() == 0)
      throw Error(ErrorCode::invalid_argument, "task query set is empty");
  }
}

ObjectiveAndGrad mean_over_tasks(std::vector<ObjectiveAndGrad> parts) {
  ObjectiveAndGrad out;
  const double inv = 1.0 / static_cast<double>(parts.size());
  out.grad.assign(parts.front().grad.size(), 0.0);
  for (const auto& p : parts) {
    out.value += p.value;
    axpy(1.0, p.grad, out.grad);
  }
  out.value *= inv;
  for (double& g : out.grad) g *= inv;
  return out;
}

double fd_step(std::span<const double> theta, double rel) { return rel * (1.0 + norm_inf(theta)); }

Vector shifted(std::span<const double> theta, std::span<const double> dir, double h) {
  Vector out(theta.begin(), theta.end());
  axpy(h, dir, out);
  return out;
}

/// Gradient-of-loss at θ on data, discarding the value.
Vector task_grad(const NetworkSpec& spec, std::span<const double> theta, const Dataset& d,
                 LossKind loss) {
  return grad_loss(spec, theta, d, loss);
}

}  // namespace

// ---------------------------------------------------------------------------

AdaptTime AdaptTime::finite(double t) {
  if (!(t >= 0.0) || !std::isfinite(t)) {
    throw Error(ErrorCode::invalid_argument, "adaptation time must be finite and >= 0");
  }
  return AdaptTime(false, t);
}

double AdaptTime::value() const {
  if (infinite_) throw Error(ErrorCode::invalid_argument, "infinite adaptation time has no value");
  return t_;
}

std::string AdaptTime::to_string() const {
  if (infinite_) return "inf";
  return format_double(t_);
}

AdaptTime AdaptTime::parse(std::string_view text) {
  if (text == "inf" || text == "infinity" || text == "Infinity") return infinite();
  try {
    std::size_t used = 0;
    const double t = std::stod(std::string(text), &used);
    if (used != text.size()) throw std::invalid_argument("trailing");
    return finite(t);
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::config, "cannot parse adaptation time '" + std::string(text) + "'");
  }
}

void MetaConfig::validate(std::string_view prefix) const {
  auto fail = [&](const char* field, const std::string& msg) {
    throw Error(ErrorCode::config, msg, std::string(prefix) + "." + field);
  };
  if (!(inner_lr > 0.0)) fail("inner_lr", "inner_lr must be > 0");
  if (inner_steps < 1) fail("inner_steps", "inner_steps must be >= 1");
  if (pade_order != 1 && pade_order != 2) fail("pade_order", "pade_order must be 1 or 2");
  if (!(meta_lr > 0.0)) fail("meta_lr", "meta_lr must be > 0");
  if (meta_batch < 1) fail("meta_batch", "meta_batch must be >= 1");
  if (!(hvp_step > 0.0)) fail("hvp_step", "hvp_step must be > 0");
  if (!(kernel_jitter >= 0.0)) fail("kernel_jitter", "kernel_jitter must be >= 0");
  if (kernel.kind == KernelKind::rbf && kernel.rbf_bandwidth < 0.0)
    fail("rbf_bandwidth", "rbf_bandwidth must be >= 0");
}

// ---------------------------------------------------------------------------
// Meta-RKHS-I

Vector hvp(const NetworkSpec& spec, std::span<const double> theta, const Dataset& data,
           LossKind loss, std::span<const double> v, double hvp_step) {
  const double nv = norm2(v);
  if (nv == 0.0) return Vector(theta.size(), 0.0);
  Vector dir(v.begin(), v.end());
  for (double& d : dir) d /= nv;
  const double h = fd_step(theta, hvp_step);
  const Vector gp = task_grad(spec, shifted(theta, dir, h), data, loss);
  const Vector gm = task_grad(spec, shifted(theta, dir, -h), data, loss);
  Vector out(theta.size());
  const double scale = nv / (2.0 * h);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp[i] - gm[i]) * scale;
  return out;
}

double meta_rkhs_1_objective(const NetworkSpec& spec, std::span<const double> theta,
                             const std::vector<Task>& tasks, double alpha, LossKind loss,
                             bool split) {
  require_tasks(tasks, split);
  double total = 0.0;
  for (const Task& t : tasks) {
    if (!split) {
      total += ntkmeta::loss(spec, theta, t.support, loss) -
               alpha * functional_grad_norm_sq(spec, theta, t.support, loss);
      continue;
    }
    // Cross term g_sᵀ H(X_s, X_q) g_q through kernel entries.
    const Matrix fs = predict(spec, theta, t.support.x);
    const Matrix fq = predict(spec, theta, t.query.x);
    const Matrix gs = loss_output_grad(fs, t.support.y, loss);
    const Matrix gq = loss_output_grad(fq, t.query.y, loss);
    const Matrix cross = gram_from_jacobians(batch_jacobians(spec, theta, t.support.x),
                                             batch_jacobians(spec, theta, t.query.x), false);
    total += loss_value(fq, t.query.y, loss) - alpha * dot(gs.data(), matvec(cross, gq.data()));
  }
  return total / static_cast<double>(tasks.size());
}

ObjectiveAndGrad meta_rkhs_1_step(const NetworkSpec& spec, std::span<const double> theta,
                                  const std::vector<Task>& tasks, double alpha, double hvp_step,
                                  LossKind loss, bool split, std::size_t workers) {
  require_tasks(tasks, split);
  auto parts = parallel_map(tasks.size(), workers, [&](std::size_t m) {
    const Task& t = tasks[m];
    ObjectiveAndGrad r;
    if (!split) {
      auto [value, g] = loss_and_grad(spec, theta, t.support, loss);
      const Vector hg = hvp(spec, theta, t.support, loss, g, hvp_step);
      r.value = value - alpha * dot(g, g);
      r.grad = g;
      axpy(-2.0 * alpha, hg, r.grad);
      return r;
    }
    auto [value, gq] = loss_and_grad(spec, theta, t.query, loss);
    const Vector gs = task_grad(spec, theta, t.support, loss);
    r.value = value - alpha * dot(gs, gq);
    r.grad = gq;
    axpy(-alpha, hvp(spec, theta, t.support, loss, gq, hvp_step), r.grad);
    axpy(-alpha, hvp(spec, theta, t.query, loss, gs, hvp_step), r.grad);
    return r;
  });
  return mean_over_tasks(std::move(parts));
}

Vector meta_rkhs_1_grad(const NetworkSpec& spec, std::span<const double> theta,
                        const std::vector<Task>& tasks, double alpha, double hvp_step,
                        LossKind loss, bool split, std::size_t workers) {
  return meta_rkhs_1_step(spec, theta, tasks, alpha, hvp_step, loss, split, workers).grad;
}

// ---------------------------------------------------------------------------
// Meta-RKHS-II

AdaptedPredictor AdaptedPredictor::fit(const NetworkSpec& spec, std::span<const double> theta,
                                       const Dataset& support, const Options& options,
                                       std::optional<std::span<const double>> kernel_theta) {
  if (support.size() == 0) throw Error(ErrorCode::invalid_argument, "support set is empty");
  if (options.pade_order != 1 && options.pade_order != 2) {
    throw Error(ErrorCode::invalid_argument, "pade_order must be 1 or 2");
  }
  AdaptedPredictor p;
  p.spec_ = spec;
  p.theta_.assign(theta.begin(), theta.end());
  if (kernel_theta) {
    p.kernel_theta_.assign(kernel_theta->begin(), kernel_theta->end());
  } else {
    p.kernel_theta_ = p.theta_;
  }
  p.options_ = options;
  p.kind_ = resolve_kernel(options.kernel.kind, spec.output_dim());
  p.support_ = support;

  const std::size_t n = support.size();
  const std::size_t dy = spec.output_dim();
  if (p.kind_ == KernelKind::rbf) {
    p.bandwidth_ = options.kernel.rbf_bandwidth > 0.0 ? options.kernel.rbf_bandwidth
                                                      : median_bandwidth(support.x);
    p.kernel_ = rbf_gram(support.x, p.bandwidth_);
  } else {
    p.support_jacobians_ = batch_jacobians(spec, p.kernel_theta_, support.x);
    p.kernel_ = symmetrize(gram_from_jacobians(p.support_jacobians_, p.support_jacobians_,
                                               p.kind_ == KernelKind::ntk_scalar));
  }

  double mean_diag = 0.0;
  for (std::size_t i = 0; i < p.kernel_.rows(); ++i) mean_diag += std::abs(p.kernel_(i, i));
  mean_diag /= static_cast<double>(p.kernel_.rows());
  p.factor_ = factor_spd(p.kernel_, options.jitter_rel * mean_diag);
  p.jitter_ = p.factor_.jitter;
  p.escalations_ = p.factor_.escalations;

  const Matrix f = ntkmeta::predict(spec, p.theta_, support.x);
  Matrix residual = f - support.y;  // f_θ(X) − Y, n × d_y
  if (p.kind_ == KernelKind::ntk) residual = Matrix(n * dy, 1, residual.values());

  if (options.time.is_infinite()) {
    p.coeffs_ = p.factor_.chol.solve(residual * -1.0);
  } else {
    const double scaled = options.time.value() / static_cast<double>(n);
    p.transition_ = expm_scaled(p.kernel_ * -scaled, options.pade_order) -
                    Matrix::identity(p.kernel_.rows());
    p.coeffs_ = p.factor_.chol.solve(matmul(p.transition_, residual));
  }
  if (!all_finite(p.coeffs_.data())) {
    throw Error(ErrorCode::kernel_singular, "closed-form coefficients are not finite");
  }
  return p;
}

Matrix AdaptedPredictor::cross_block(std::span<const double> x) const {
  if (kind_ == KernelKind::rbf) {
    return rbf_cross(Matrix::row_vector(x), support_.x, bandwidth_);
  }
  const Matrix jx = jacobian(spec_, kernel_theta_, x);
  return gram_from_jacobians({jx}, support_jacobians_, kind_ == KernelKind::ntk_scalar);
}

Matrix AdaptedPredictor::predict(const Matrix& x) const {
  Matrix out = ntkmeta::predict(spec_, theta_, x);
  for (std::size_t q = 0; q < x.rows(); ++q) {
    const Matrix delta = matmul(cross_block(x.row(q)), coeffs_);
    axpy(1.0, delta.data(), out.row(q));
  }
  return out;
}

Matrix AdaptedPredictor::coefficient_adjoint(const Matrix& g) const {
  const Matrix solved = factor_.chol.solve(g);
  if (options_.time.is_infinite()) return solved * -1.0;
  return matmul(transpose(transition_), solved);
}

AdaptedPredictor::QueryPass AdaptedPredictor::query_pass(const Dataset& query) const {
  const std::size_t dy = spec_.output_dim();
  const std::size_t n = support_.size();
  const bool scalar_layout = kind_ != KernelKind::ntk;
  ForwardResult fq = forward(spec_, theta_, query.x);
  Matrix pred = fq.outputs;
  QueryPass qp;
  std::vector<Matrix> blocks;
  blocks.reserve(query.size());
  for (std::size_t q = 0; q < query.size(); ++q) {
    if (kind_ == KernelKind::rbf) {
      blocks.push_back(cross_block(query.x.row(q)));
    } else {
      qp.query_jacobians.push_back(jacobian(spec_, kernel_theta_, query.x.row(q)));
      blocks.push_back(gram_from_jacobians({qp.query_jacobians.back()}, support_jacobians_,
                                           kind_ == KernelKind::ntk_scalar));
    }
    const Matrix delta = matmul(blocks.back(), coeffs_);
    axpy(1.0, delta.data(), pred.row(q));
  }
  qp.frozen.value = loss_value(pred, query.y, LossKind::squared);
  qp.cot = loss_output_grad(pred, query.y, LossKind::squared);

  // Cotangent on the coefficient matrix: Σ_q blockᵀ · cot_q (in block output shape).
  qp.coeff_cot = Matrix(coeffs_.rows(), coeffs_.cols());
  for (std::size_t q = 0; q < query.size(); ++q) {
    const Matrix c = scalar_layout ? Matrix::row_vector(qp.cot.row(q))
                                   : Matrix::column(qp.cot.row(q));
    qp.coeff_cot += matmul(transpose(blocks[q]), c);
  }
  const Matrix gf_flat = coefficient_adjoint(qp.coeff_cot);
  const Matrix gf(n, dy, gf_flat.values());

  const ForwardResult fs = forward(spec_, theta_, support_.x);
  qp.frozen.grad = param_vjp(spec_, theta_, fq.trace, qp.cot);
  axpy(1.0, param_vjp(spec_, theta_, fs.trace, gf), qp.frozen.grad);
  return qp;
}

ObjectiveAndGrad AdaptedPredictor::frozen_kernel_query_grad(const Dataset& query) const {
  return query_pass(query).frozen;
}

ObjectiveAndGrad AdaptedPredictor::full_query_grad(const Dataset& query) const {
  QueryPass qp = query_pass(query);
  if (kind_ == KernelKind::rbf) return std::move(qp.frozen);

  const std::size_t dy = spec_.output_dim();
  const std::size_t n = support_.size();
  const std::size_t p = spec_.param_count();
  const bool scalar = kind_ == KernelKind::ntk_scalar;
  const std::size_t dim = kernel_.rows();

  // ∂O/∂H for the support Gram matrix.
  const Matrix z = factor_.chol.solve(qp.coeff_cot);
  Matrix g_h = matmul(z, transpose(coeffs_)) * -1.0;
  if (!options_.time.is_infinite()) {
    const double s = options_.time.value() / static_cast<double>(n);
    Matrix residual = ntkmeta::predict(spec_, theta_, support_.x) - support_.y;
    if (!scalar) residual = Matrix(n * dy, 1, residual.values());
    // Adjoint of the exponential: the upper-right block of exp([[A, W], [0, A]])
    // is the Fréchet derivative L(A, W), self-adjoint here because A is symmetric.
    const Matrix w = matmul(z, transpose(residual));
    Matrix block(2 * dim, 2 * dim);
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        const double a = -s * kernel_(i, j);
        block(i, j) = a;
        block(dim + i, dim + j) = a;
        block(i, dim + j) = w(i, j);
      }
    }
    const Matrix e = expm_scaled(block, options_.pade_order);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) g_h(i, j) -= s * e(i, dim + j);
  }

  // Jacobian row of kernel unit u: (point, output) for the full kernel;
  // scalar kernels pair every output row of a point with the same output row.
  auto support_row = [&](std::size_t unit, std::size_t out) {
    return scalar ? support_jacobians_[unit].row(out)
                  : support_jacobians_[unit / dy].row(unit % dy);
  };

  // Direction w for each (support point, output) and (query point, output);
  // the parameter gradient is Σ ∇_θ(J_a(x)·w).
  std::vector<Vector> ws(n * dy, Vector(p, 0.0));
  std::vector<Vector> wq(query.size() * dy, Vector(p, 0.0));
  auto support_dir = [&](std::size_t unit, std::size_t out) -> Vector& {
    return scalar ? ws[unit * dy + out] : ws[unit];
  };
  for (std::size_t u = 0; u < dim; ++u) {
    for (std::size_t v = 0; v < dim; ++v) {
      const double c = g_h(u, v) + g_h(v, u);
      if (c == 0.0) continue;
      if (scalar) {
        for (std::size_t a = 0; a < dy; ++a) axpy(c, support_row(v, a), support_dir(u, a));
      } else {
        axpy(c, support_row(v, 0), support_dir(u, 0));
      }
    }
  }
  for (std::size_t q = 0; q < query.size(); ++q) {
    // ∂O/∂block_q = c_q·Vᵀ in block shape (1 × n scalar, d_y × n·d_y full).
    const Matrix c = scalar ? Matrix::row_vector(qp.cot.row(q)) : Matrix::column(qp.cot.row(q));
    const Matrix g_k = matmul(c, transpose(coeffs_));
    const Matrix& jq = qp.query_jacobians[q];
    for (std::size_t r = 0; r < g_k.rows(); ++r) {
      for (std::size_t u = 0; u < dim; ++u) {
        const double gk = g_k(r, u);
        if (gk == 0.0) continue;
        if (scalar) {
          for (std::size_t a = 0; a < dy; ++a) {
            axpy(gk, support_row(u, a), wq[q * dy + a]);
            axpy(gk, jq.row(a), support_dir(u, a));
          }
        } else {
          axpy(gk, support_row(u, 0), wq[q * dy + r]);
          axpy(gk, jq.row(r), support_dir(u, 0));
        }
      }
    }
  }

  const double h = fd_step(kernel_theta_, options_.hvp_step);
  auto add_hvp = [&](std::span<const double> x, std::size_t out, const Vector& w) {
    const double nw = norm2(w);
    if (nw == 0.0) return;
    Vector dir = w;
    for (double& d : dir) d /= nw;
    const Matrix xr = Matrix::row_vector(x);
    Matrix unit(1, dy);
    unit(0, out) = 1.0;
    const Vector tp = shifted(kernel_theta_, dir, h);
    const Vector tm = shifted(kernel_theta_, dir, -h);
    const Vector gp = param_vjp(spec_, tp, forward(spec_, tp, xr).trace, unit);
    const Vector gm = param_vjp(spec_, tm, forward(spec_, tm, xr).trace, unit);
    const double scale = nw / (2.0 * h);
    for (std::size_t i = 0; i < p; ++i) qp.frozen.grad[i] += (gp[i] - gm[i]) * scale;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < dy; ++a) add_hvp(support_.x.row(i), a, ws[i * dy + a]);
  for (std::size_t q = 0; q < query.size(); ++q)
    for (std::size_t a = 0; a < dy; ++a) add_hvp(query.x.row(q), a, wq[q * dy + a]);
  return std::move(qp.frozen);
}

Vector AdaptedPredictor::input_vjp(std::span<const double> x, std::span<const double> cotangent,
                                   bool freeze_kernel) const {
  const std::size_t dy = spec_.output_dim();
  const std::size_t n = support_.size();
  if (cotangent.size() != dy) {
    throw Error(ErrorCode::dimension_mismatch, "input_vjp: cotangent length must equal d_y");
  }
  const Matrix xr = Matrix::row_vector(x);
  const Matrix cot = Matrix::row_vector(cotangent);
  const ForwardResult fr = forward(spec_, theta_, xr);
  Vector grad = ntkmeta::input_vjp(spec_, theta_, fr.trace, cot).values();
  if (freeze_kernel) return grad;

  if (kind_ == KernelKind::rbf) {
    // Σ_i w_i k(x, x_i) with w = V c; ∂k/∂x = −k (x − x_i) / bw².
    const Vector w = matvec(coeffs_, cotangent);
    const Matrix k = rbf_cross(xr, support_.x, bandwidth_);
    const double inv_bw2 = 1.0 / (bandwidth_ * bandwidth_);
    for (std::size_t i = 0; i < n; ++i) {
      const double s = -w[i] * k(0, i) * inv_bw2;
      for (std::size_t d = 0; d < x.size(); ++d) grad[d] += s * (x[d] - support_.x(i, d));
    }
    return grad;
  }

  // The kernel term is Σ_j J_j(x)·U_j for parameter-space directions U_j. Its
  // input gradient is the derivative of ∇_x f along U_j, taken by central
  // differences of exact reverse-mode input gradients.
  const double h = fd_step(kernel_theta_, options_.hvp_step);
  auto directional = [&](const Vector& u, const Matrix& out_cot) {
    const double nu = norm2(u);
    if (nu == 0.0) return;
    Vector dir = u;
    for (double& d : dir) d /= nu;
    const Vector tp = shifted(kernel_theta_, dir, h);
    const Vector tm = shifted(kernel_theta_, dir, -h);
    const Matrix gp = ntkmeta::input_vjp(spec_, tp, forward(spec_, tp, xr).trace, out_cot);
    const Matrix gm = ntkmeta::input_vjp(spec_, tm, forward(spec_, tm, xr).trace, out_cot);
    const double scale = nu / (2.0 * h);
    for (std::size_t d = 0; d < grad.size(); ++d) grad[d] += (gp.data()[d] - gm.data()[d]) * scale;
  };

  const std::size_t p = spec_.param_count();
  if (kind_ == KernelKind::ntk_scalar) {
    const Vector w = matvec(coeffs_, cotangent);
    for (std::size_t j = 0; j < dy; ++j) {
      Vector u(p, 0.0);
      for (std::size_t i = 0; i < n; ++i) axpy(w[i], support_jacobians_[i].row(j), u);
      Matrix unit(1, dy);
      unit(0, j) = 1.0;
      directional(u, unit);
    }
  } else {
    Vector u(p, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dy; ++c) axpy(coeffs_(i * dy + c, 0), support_jacobians_[i].row(c), u);
    directional(u, cot);
  }
  return grad;
}

Dataset kernel_targets(const Dataset& data, const std::vector<int>& labels, std::size_t classes) {
  if (classes == 0) return data;
  return Dataset{data.x, encode_labels(labels, classes)};
}

Task with_kernel_targets(const Task& task) {
  if (!task.is_classification()) return task;
  Task out = task;
  out.support = kernel_targets(task.support, task.support_labels, task.num_classes);
  out.query = kernel_targets(task.query, task.query_labels, task.num_classes);
  return out;
}

AdaptedPredictor::Options adapt_options(const MetaConfig& config) {
  AdaptedPredictor::Options o;
  o.time = config.adapt_time;
  o.pade_order = config.pade_order;
  o.kernel = config.kernel;
  o.jitter_rel = config.kernel_jitter;
  o.hvp_step = config.hvp_step;
  return o;
}

AdaptedPredictor adapt_closed_form(const NetworkSpec& spec, std::span<const double> theta,
                                   const Dataset& support, AdaptTime t, int pade_order,
                                   KernelSpec kernel, double jitter_rel) {
  AdaptedPredictor::Options o;
  o.time = t;
  o.pade_order = pade_order;
  o.kernel = kernel;
  o.jitter_rel = jitter_rel;
  return AdaptedPredictor::fit(spec, theta, support, o);
}

double meta_rkhs_2_objective(const NetworkSpec& spec, std::span<const double> theta,
                             const std::vector<Task>& tasks, const MetaConfig& config,
                             std::optional<std::span<const double>> kernel_theta) {
  require_tasks(tasks, true);
  const auto options = adapt_options(config);
  double total = 0.0;
  for (const Task& raw : tasks) {
    const Task t = with_kernel_targets(raw);
    const auto p = AdaptedPredictor::fit(spec, theta, t.support, options, kernel_theta);
    total += loss_value(p.predict(t.query.x), t.query.y, LossKind::squared);
  }
  return total / static_cast<double>(tasks.size());
}

ObjectiveAndGrad meta_rkhs_2_step(const NetworkSpec& spec, std::span<const double> theta,
                                  const std::vector<Task>& tasks, const MetaConfig& config,
                                  std::size_t workers) {
  require_tasks(tasks, true);
  const auto options = adapt_options(config);
  auto parts = parallel_map(tasks.size(), workers, [&](std::size_t m) {
    const Task t = with_kernel_targets(tasks[m]);
    const auto p = AdaptedPredictor::fit(spec, theta, t.support, options);
    return config.stop_gradient_kernel ? p.frozen_kernel_query_grad(t.query)
                                       : p.full_query_grad(t.query);
  });
  return mean_over_tasks(std::move(parts));
}

Vector meta_rkhs_2_grad(const NetworkSpec& spec, std::span<const double> theta,
                        const std::vector<Task>& tasks, const MetaConfig& config,
                        std::size_t workers) {
  return meta_rkhs_2_step(spec, theta, tasks, config, workers).grad;
}

// ---------------------------------------------------------------------------

Matrix encode_labels(const std::vector<int>& labels, std::size_t num_classes) {
  if (num_classes < 2) throw Error(ErrorCode::invalid_argument, "encoding needs >= 2 classes");
  const double c = static_cast<double>(num_classes);
  Matrix out(labels.size(), num_classes, -1.0 / c);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw Error(ErrorCode::invalid_argument, "label " + std::to_string(labels[i]) +
                                                   " out of range for " +
                                                   std::to_string(num_classes) + " classes");
    }
    out(i, static_cast<std::size_t>(labels[i])) = (c - 1.0) / c;
  }
  return out;
}

std::vector<int> decode_labels(const Matrix& encoded) {
  std::vector<int> out(encoded.rows());
  for (std::size_t i = 0; i < encoded.rows(); ++i) {
    const auto r = encoded.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// MAML family

ParamVector adapt_gradient(const NetworkSpec& spec, std::span<const double> theta,
                           const Dataset& data, double lr, int steps, LossKind loss) {
  ParamVector phi(theta.begin(), theta.end());
  for (int s = 0; s < steps; ++s) axpy(-lr, grad_loss(spec, phi, data, loss), phi);
  return phi;
}

ObjectiveAndGrad maml_step(const NetworkSpec& spec, std::span<const double> theta,
                           const std::vector<Task>& tasks, double alpha, int k, double hvp_step,
                           MamlVariant variant, LossKind loss, std::size_t workers) {
  require_tasks(tasks, variant != MamlVariant::reptile);
  if (k < 0) throw Error(ErrorCode::invalid_argument, "inner steps must be >= 0");
  auto parts = parallel_map(tasks.size(), workers, [&](std::size_t m) {
    const Task& t = tasks[m];
    std::vector<ParamVector> path;
    ParamVector phi(theta.begin(), theta.end());
    double first_loss = 0.0;
    for (int i = 0; i < k; ++i) {
      auto [value, g] = loss_and_grad(spec, phi, t.support, loss);
      if (i == 0) first_loss = value;
      if (variant == MamlVariant::maml) path.push_back(phi);
      axpy(-alpha, g, phi);
    }
    ObjectiveAndGrad r;
    if (variant == MamlVariant::reptile) {
      r.value = k > 0 ? first_loss : ntkmeta::loss(spec, phi, t.support, loss);
      r.grad.assign(theta.begin(), theta.end());
      axpy(-1.0, phi, r.grad);
      return r;
    }
    auto [value, g] = loss_and_grad(spec, phi, t.query, loss);
    r.value = value;
    if (variant == MamlVariant::maml) {
      for (std::size_t i = path.size(); i-- > 0;)
        axpy(-alpha, hvp(spec, path[i], t.support, loss, g, hvp_step), g);
    }
    r.grad = std::move(g);
    return r;
  });
  return mean_over_tasks(std::move(parts));
}

Vector maml_meta_grad(const NetworkSpec& spec, std::span<const double> theta,
                      const std::vector<Task>& tasks, double alpha, int k, double hvp_step,
                      MamlVariant variant, LossKind loss, std::size_t workers) {
  return maml_step(spec, theta, tasks, alpha, k, hvp_step, variant, loss, workers).grad;
}

// ---------------------------------------------------------------------------

double taylor_mk(const NetworkSpec& spec, std::span<const double> theta,
                 const std::vector<Task>& tasks, double alpha, int k, LossKind loss) {
  require_tasks(tasks, false);
  if (k < 1) throw Error(ErrorCode::invalid_argument, "taylor_mk: k must be >= 1");
  double total = 0.0;
  for (const Task& t : tasks) {
    auto [l0, g0] = loss_and_grad(spec, theta, t.support, loss);
    double beta_sum = alpha * dot(g0, g0);
    ParamVector phi(theta.begin(), theta.end());
    axpy(-alpha, g0, phi);
    for (int i = 1; i < k; ++i) {
      const Vector gi = grad_loss(spec, phi, t.support, loss);
      beta_sum += alpha * dot(gi, g0);
      axpy(-alpha, gi, phi);
    }
    total += l0 - beta_sum;
  }
  return total / static_cast<double>(tasks.size());
}

double taylor_gap(const NetworkSpec& spec, std::span<const double> theta,
                  const std::vector<Task>& tasks, double alpha, int k, LossKind loss) {
  return std::abs(taylor_mk(spec, theta, tasks, alpha, k, loss) -
                  meta_rkhs_1_objective(spec, theta, tasks, k * alpha, loss));
}

}  // namespace ntkmeta
