#include "ntkmeta/ntk.hpp"

#include <algorithm>
#include <cmath>

#include "ntkmeta/error.hpp"

namespace ntkmeta {

std::string_view to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::automatic: return "auto";
    case KernelKind::ntk: return "ntk";
    case KernelKind::ntk_scalar: return "ntk-scalar";
    case KernelKind::rbf: return "rbf";
  }
  return "auto";
}

KernelKind kernel_kind_from_string(std::string_view name) {
  if (name == "auto") return KernelKind::automatic;
  if (name == "ntk") return KernelKind::ntk;
  if (name == "ntk-scalar") return KernelKind::ntk_scalar;
  if (name == "rbf") return KernelKind::rbf;
  throw Error(ErrorCode::invalid_argument, "unknown kernel '" + std::string(name) + "'");
}

KernelKind resolve_kernel(KernelKind kind, std::size_t output_dim) {
  if (kind != KernelKind::automatic) return kind;
  return output_dim == 1 ? KernelKind::ntk : KernelKind::ntk_scalar;
}

Matrix ntk_entry(const NetworkSpec& spec, std::span<const double> theta, std::span<const double> x1,
                 std::span<const double> x2) {
  const Matrix j1 = jacobian(spec, theta, x1);
  const Matrix j2 = jacobian(spec, theta, x2);
  return matmul(j1, transpose(j2));
}

Matrix gram_from_jacobians(const std::vector<Matrix>& a, const std::vector<Matrix>& b,
                           bool scalar) {
  if (a.empty() || b.empty()) return Matrix();
  const std::size_t dy = a.front().rows();
  const std::size_t block = scalar ? 1 : dy;
  Matrix k(a.size() * block, b.size() * block);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (scalar) {
        k(i, j) = dot(a[i].data(), b[j].data());
        continue;
      }
      for (std::size_t r = 0; r < dy; ++r)
        for (std::size_t c = 0; c < dy; ++c) k(i * dy + r, j * dy + c) = dot(a[i].row(r), b[j].row(c));
    }
  }
  return k;
}

Matrix gram(const NetworkSpec& spec, std::span<const double> theta, const Matrix& x) {
  const auto jac = batch_jacobians(spec, theta, x);
  return symmetrize(gram_from_jacobians(jac, jac, false));
}

Matrix gram_scalar(const NetworkSpec& spec, std::span<const double> theta, const Matrix& x) {
  const auto jac = batch_jacobians(spec, theta, x);
  return symmetrize(gram_from_jacobians(jac, jac, true));
}

Matrix cross_gram(const NetworkSpec& spec, std::span<const double> theta, std::span<const double> x,
                  const Matrix& support) {
  return gram_from_jacobians({jacobian(spec, theta, x)}, batch_jacobians(spec, theta, support),
                             false);
}

double functional_grad_norm_sq(const NetworkSpec& spec, std::span<const double> theta,
                               const Dataset& data, LossKind kind) {
  const Matrix outputs = predict(spec, theta, data.x);
  const Matrix g = loss_output_grad(outputs, data.y, kind);
  const Matrix h = gram(spec, theta, data.x);
  // g flattened sample-major matches the block order of h.
  const Vector hg = matvec(h, g.data());
  return dot(g.data(), hg);
}

Matrix rbf_cross(const Matrix& a, const Matrix& b, double bandwidth) {
  if (!(bandwidth > 0.0)) throw Error(ErrorCode::invalid_argument, "rbf bandwidth must be > 0");
  if (a.cols() != b.cols()) {
    throw Error(ErrorCode::dimension_mismatch,
                "rbf: shapes " + a.shape_string() + " and " + b.shape_string());
  }
  const double denom = 2.0 * bandwidth * bandwidth;
  Matrix k(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        const double d = a(i, c) - b(j, c);
        d2 += d * d;
      }
      k(i, j) = std::exp(-d2 / denom);
    }
  }
  return k;
}

Matrix rbf_gram(const Matrix& x, double bandwidth) {
  return symmetrize(rbf_cross(x, x, bandwidth));
}

double median_bandwidth(const Matrix& x) {
  std::vector<double> d;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = i + 1; j < x.rows(); ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double diff = x(i, c) - x(j, c);
        d2 += diff * diff;
      }
      d.push_back(std::sqrt(d2));
    }
  }
  if (d.empty()) return 1.0;
  std::sort(d.begin(), d.end());
  const std::size_t m = d.size() / 2;
  const double med = d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
  return med > 0.0 ? med : 1.0;
}

double min_eigenvalue_estimate(const Matrix& a, int iterations) {
  const double shift = norm_inf(a);
  Matrix b = Matrix::identity(a.rows()) * shift - a;
  // Largest eigenvalue of the PSD shift·I − a is shift − λ_min(a).
  const std::size_t n = b.rows();
  if (n == 0) return 0.0;
  Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 5);
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const double nv = norm2(v);
    if (nv == 0.0) break;
    for (double& x : v) x /= nv;
    Vector w = matvec(b, v);
    lambda = dot(v, w);
    v = std::move(w);
  }
  return shift - lambda;
}

}  // namespace ntkmeta
