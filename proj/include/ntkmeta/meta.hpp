#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "ntkmeta/linalg.hpp"
#include "ntkmeta/network.hpp"
#include "ntkmeta/ntk.hpp"
#include "ntkmeta/tasks.hpp"

namespace ntkmeta {

/// Adaptation time: a finite t ≥ 0 or the distinct infinite-time limit.
class AdaptTime {
 public:
  static AdaptTime finite(double t);
  static AdaptTime infinite() { return AdaptTime(true, 0.0); }

  bool is_infinite() const noexcept { return infinite_; }
  /// Finite value; throws for the infinite sentinel.
  double value() const;
  std::string to_string() const;
  static AdaptTime parse(std::string_view text);

  friend bool operator==(const AdaptTime&, const AdaptTime&) = default;

 private:
  AdaptTime(bool inf, double t) : infinite_(inf), t_(t) {}
  bool infinite_ = false;
  double t_ = 0.0;
};

struct MetaConfig {
  double inner_lr = 0.01;
  int inner_steps = 1;
  AdaptTime adapt_time = AdaptTime::finite(1.0);
  int pade_order = 2;
  double meta_lr = 1e-3;
  int meta_batch = 16;
  LossKind loss = LossKind::squared;
  /// Relative step for finite-difference Hessian-vector products.
  double hvp_step = 1e-5;
  /// Kernel jitter relative to the mean diagonal of H.
  double kernel_jitter = 1e-8;
  bool stop_gradient_kernel = true;
  /// Meta-RKHS-I on a support/query split instead of one batch per task.
  bool rkhs1_split = false;
  KernelSpec kernel;

  /// Throws Error(config) naming the offending field under `prefix`.
  void validate(std::string_view prefix = "meta") const;
};

struct ObjectiveAndGrad {
  double value = 0.0;
  Vector grad;
};

// ---------------------------------------------------------------------------
// Meta-RKHS-I: fast-adaptation regularized objective.

/// Mean over tasks of L(f_θ, D_m) − α‖∇_f L‖²_H on each task's support batch.
/// With `split`, the regularizer becomes the support/query cross term.
double meta_rkhs_1_objective(const NetworkSpec& spec, std::span<const double> theta,
                             const std::vector<Task>& tasks, double alpha,
                             LossKind loss = LossKind::squared, bool split = false);

/// ∇L − 2α·∇²L·∇L with the Hessian-vector product taken by central
/// differences of exact gradients.
Vector meta_rkhs_1_grad(const NetworkSpec& spec, std::span<const double> theta,
                        const std::vector<Task>& tasks, double alpha, double hvp_step,
                        LossKind loss = LossKind::squared, bool split = false,
                        std::size_t workers = 1);

/// Objective value (computed from the same gradients) and meta-gradient.
ObjectiveAndGrad meta_rkhs_1_step(const NetworkSpec& spec, std::span<const double> theta,
                                  const std::vector<Task>& tasks, double alpha, double hvp_step,
                                  LossKind loss = LossKind::squared, bool split = false,
                                  std::size_t workers = 1);

/// ∇²L(θ)·v on `data`, by central differences of grad_loss along v/‖v‖.
Vector hvp(const NetworkSpec& spec, std::span<const double> theta, const Dataset& data,
           LossKind loss, std::span<const double> v, double hvp_step);

// ---------------------------------------------------------------------------
// Meta-RKHS-II: closed-form NTK adaptation.

/// f^t(x) = f_θ(x) + H(x, X)·v with v precomputed from the support set:
///   finite t:  v = H⁻¹(e^{−(t/n)H} − I)(f_θ(X) − Y)
///   t = ∞:     v = H⁻¹(Y − f_θ(X))
/// Time is measured in units of the 1/(2n)-loss gradient flow. The kernel may
/// be evaluated at different parameters than the function (frozen-kernel checks).
class AdaptedPredictor {
 public:
  struct Options {
    AdaptTime time = AdaptTime::finite(1.0);
    int pade_order = 2;
    KernelSpec kernel;
    double jitter_rel = 1e-8;
    double hvp_step = 1e-5;
  };

  static AdaptedPredictor fit(const NetworkSpec& spec, std::span<const double> theta,
                              const Dataset& support, const Options& options,
                              std::optional<std::span<const double>> kernel_theta = std::nullopt);

  Matrix predict(const Matrix& x) const;

  /// ∇_x of cotangentᵀ·f^t(x) for one input. `freeze_kernel` drops the
  /// ∂H(x, X)/∂x term.
  Vector input_vjp(std::span<const double> x, std::span<const double> cotangent,
                   bool freeze_kernel = false) const;

  /// Meta-gradient contribution of one task's query loss with every kernel
  /// quantity held constant. Returns the loss value as well.
  ObjectiveAndGrad frozen_kernel_query_grad(const Dataset& query) const;

  /// Frozen-kernel gradient plus the terms through H(X, X), H(x, X) and
  /// e^{−(t/n)H}. Kernel adjoints map back to parameters as Hessian-vector
  /// products of f, taken by central differences of exact gradients.
  ObjectiveAndGrad full_query_grad(const Dataset& query) const;

  /// Kernel-row block of one query: 1 × n (scalar kernels) or d_y × n·d_y.
  Matrix cross_block(std::span<const double> x) const;

  const Matrix& kernel_matrix() const noexcept { return kernel_; }
  const Matrix& coefficients() const noexcept { return coeffs_; }
  double jitter() const noexcept { return jitter_; }
  int escalations() const noexcept { return escalations_; }
  KernelKind kernel_kind() const noexcept { return kind_; }
  AdaptTime time() const noexcept { return options_.time; }

 private:
  AdaptedPredictor() = default;
  /// Aᵀ·g where v = A·(f_θ(X) − Y).
  Matrix coefficient_adjoint(const Matrix& g) const;
  /// Query cotangents (rows of ∂O/∂f^t) and the matching coefficient cotangent.
  struct QueryPass {
    ObjectiveAndGrad frozen;
    Matrix cot;
    std::vector<Matrix> query_jacobians;
    Matrix coeff_cot;
  };
  QueryPass query_pass(const Dataset& query) const;

  NetworkSpec spec_;
  ParamVector theta_;
  ParamVector kernel_theta_;
  Options options_;
  KernelKind kind_ = KernelKind::ntk;
  Dataset support_;
  std::vector<Matrix> support_jacobians_;
  double bandwidth_ = 1.0;
  Matrix kernel_;
  SpdFactor factor_;
  Matrix transition_;  // e^{−(t/n)H} − I for finite t
  Matrix coeffs_;
  double jitter_ = 0.0;
  int escalations_ = 0;
};

/// Support/query targets the closed form regresses on: the centered label
/// encoding for classification tasks, y otherwise.
Dataset kernel_targets(const Dataset& data, const std::vector<int>& labels, std::size_t classes);
Task with_kernel_targets(const Task& task);

AdaptedPredictor::Options adapt_options(const MetaConfig& config);

AdaptedPredictor adapt_closed_form(const NetworkSpec& spec, std::span<const double> theta,
                                   const Dataset& support, AdaptTime t, int pade_order,
                                   KernelSpec kernel = {}, double jitter_rel = 1e-8);

/// Mean query squared loss of the closed-form adapted predictor.
double meta_rkhs_2_objective(const NetworkSpec& spec, std::span<const double> theta,
                             const std::vector<Task>& tasks, const MetaConfig& config,
                             std::optional<std::span<const double>> kernel_theta = std::nullopt);

/// Frozen-kernel meta-gradient (stop_gradient_kernel = true), or the gradient
/// through the kernel as well when it is false.
Vector meta_rkhs_2_grad(const NetworkSpec& spec, std::span<const double> theta,
                        const std::vector<Task>& tasks, const MetaConfig& config,
                        std::size_t workers = 1);
ObjectiveAndGrad meta_rkhs_2_step(const NetworkSpec& spec, std::span<const double> theta,
                                  const std::vector<Task>& tasks, const MetaConfig& config,
                                  std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Classification encoding.

/// (C−1)/C at the true class, −1/C elsewhere.
Matrix encode_labels(const std::vector<int>& labels, std::size_t num_classes);
/// Row-wise argmax (lowest index on ties).
std::vector<int> decode_labels(const Matrix& encoded);

// ---------------------------------------------------------------------------
// MAML family.

enum class MamlVariant { maml, fomaml, reptile };

/// k gradient steps of size lr on `data`.
ParamVector adapt_gradient(const NetworkSpec& spec, std::span<const double> theta,
                           const Dataset& data, double lr, int steps, LossKind loss);

/// MAML: chain rule through k inner steps with finite-difference HVPs.
/// FOMAML: query gradient at the adapted parameters.
/// Reptile: displacement θ − φ after k support steps.
Vector maml_meta_grad(const NetworkSpec& spec, std::span<const double> theta,
                      const std::vector<Task>& tasks, double alpha, int k, double hvp_step,
                      MamlVariant variant = MamlVariant::maml, LossKind loss = LossKind::squared,
                      std::size_t workers = 1);
ObjectiveAndGrad maml_step(const NetworkSpec& spec, std::span<const double> theta,
                           const std::vector<Task>& tasks, double alpha, int k, double hvp_step,
                           MamlVariant variant, LossKind loss = LossKind::squared,
                           std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Taylor-expansion quantities.

/// M_k along the explicit k-step inner trajectory on each task's support batch.
double taylor_mk(const NetworkSpec& spec, std::span<const double> theta,
                 const std::vector<Task>& tasks, double alpha, int k,
                 LossKind loss = LossKind::squared);

/// |M_k − meta_rkhs_1_objective(θ, kα)|.
double taylor_gap(const NetworkSpec& spec, std::span<const double> theta,
                  const std::vector<Task>& tasks, double alpha, int k,
                  LossKind loss = LossKind::squared);

}  // namespace ntkmeta
