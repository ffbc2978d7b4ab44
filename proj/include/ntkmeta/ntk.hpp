#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "ntkmeta/linalg.hpp"
#include "ntkmeta/network.hpp"

namespace ntkmeta {

/// Which kernel backs a closed-form adaptation.
///   ntk         full d_y × d_y matrix-valued NTK, sample-major blocks
///   ntk_scalar  Σ_j ∂f_j(x1)/∂θ · ∂f_j(x2)/∂θ, one entry per sample pair
///   rbf         Gaussian kernel on raw inputs
///   automatic   ntk when d_y = 1, ntk_scalar otherwise
enum class KernelKind { automatic, ntk, ntk_scalar, rbf };

std::string_view to_string(KernelKind kind);
KernelKind kernel_kind_from_string(std::string_view name);

struct KernelSpec {
  KernelKind kind = KernelKind::automatic;
  /// RBF bandwidth; 0 selects the median pairwise distance of the support set.
  double rbf_bandwidth = 0.0;
};

/// Resolves `automatic` against the network output dimension.
KernelKind resolve_kernel(KernelKind kind, std::size_t output_dim);

/// Θ(x1, x2) = J(x1) J(x2)ᵀ, shape d_y × d_y.
Matrix ntk_entry(const NetworkSpec& spec, std::span<const double> theta, std::span<const double> x1,
                 std::span<const double> x2);

/// Kernel matrix between two Jacobian sets. Full mode gives (|a|·d_y) × (|b|·d_y)
/// sample-major blocks; scalar mode gives |a| × |b| traces of the blocks.
Matrix gram_from_jacobians(const std::vector<Matrix>& a, const std::vector<Matrix>& b, bool scalar);

/// H(X, X) for the full matrix-valued NTK, exactly symmetric.
Matrix gram(const NetworkSpec& spec, std::span<const double> theta, const Matrix& x);
/// H(X, X) for the output-summed scalar NTK, exactly symmetric.
Matrix gram_scalar(const NetworkSpec& spec, std::span<const double> theta, const Matrix& x);
/// H(x, X): d_y × (n·d_y).
Matrix cross_gram(const NetworkSpec& spec, std::span<const double> theta, std::span<const double> x,
                  const Matrix& support);

/// ‖∇_f L‖²_H evaluated only through kernel entries:
/// Σ_{i,j} g_iᵀ Θ(x_i, x_j) g_j with g_i = ∂L/∂f(x_i).
double functional_grad_norm_sq(const NetworkSpec& spec, std::span<const double> theta,
                               const Dataset& data, LossKind kind);

/// k(x1, x2) = exp(−‖x1 − x2‖² / (2·bandwidth²)).
Matrix rbf_gram(const Matrix& x, double bandwidth);
Matrix rbf_cross(const Matrix& a, const Matrix& b, double bandwidth);
/// Median pairwise Euclidean distance; 1 when every pair coincides.
double median_bandwidth(const Matrix& x);

/// Smallest eigenvalue estimate of a symmetric matrix via power iteration on
/// shift·I − a.
double min_eigenvalue_estimate(const Matrix& a, int iterations = 500);

}  // namespace ntkmeta
