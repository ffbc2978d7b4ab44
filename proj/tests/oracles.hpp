// Reference implementations used only by the tests. Each one is written
// independently of the library routine it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ntkmeta/linalg.hpp"
#include "ntkmeta/network.hpp"
#include "ntkmeta/rng.hpp"

namespace oracle {

using ntkmeta::Matrix;
using ntkmeta::Vector;

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  ntkmeta::CounterRng rng(seed);
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double acc = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(acc);
    }
  return c;
}

/// Random SPD matrix G Gᵀ + shift·I.
inline Matrix random_spd(std::size_t n, std::uint64_t seed, double shift = 0.0) {
  const Matrix g = random_matrix(n, n, seed);
  Matrix h = naive_matmul(g, ntkmeta::transpose(g));
  for (std::size_t i = 0; i < n; ++i) h(i, i) += shift;
  return h;
}

struct Eigen {
  Vector values;
  Matrix vectors;  // columns
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
inline Eigen jacobi_eigen(Matrix a) {
  const std::size_t n = a.rows();
  Matrix v = Matrix::identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  Eigen e;
  e.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) e.values[i] = a(i, i);
  e.vectors = v;
  return e;
}

/// V·diag(fn(λ))·Vᵀ for symmetric input.
template <class Fn>
Matrix spectral_apply(const Matrix& h, Fn&& fn) {
  const Eigen e = jacobi_eigen(h);
  const std::size_t n = h.rows();
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += e.vectors(i, k) * fn(e.values[k]) * e.vectors(j, k);
      out(i, j) = acc;
    }
  return out;
}

/// Jacobian of the network output at x by central differences in θ.
inline Matrix fd_jacobian(const ntkmeta::NetworkSpec& spec, const Vector& theta,
                          std::span<const double> x, double h = 1e-6) {
  const Matrix xr = Matrix::row_vector(x);
  Matrix jac(spec.output_dim(), theta.size());
  Vector p = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    p[i] = theta[i] + h;
    const Matrix fp = ntkmeta::predict(spec, p, xr);
    p[i] = theta[i] - h;
    const Matrix fm = ntkmeta::predict(spec, p, xr);
    p[i] = theta[i];
    for (std::size_t j = 0; j < spec.output_dim(); ++j) jac(j, i) = (fp(0, j) - fm(0, j)) / (2 * h);
  }
  return jac;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double rel_diff(const Matrix& a, const Matrix& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
    den += b.data()[i] * b.data()[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

/// Inputs uniform on [lo, hi]^d.
inline Matrix uniform_inputs(std::size_t n, std::size_t d, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
  ntkmeta::CounterRng rng(seed);
  Matrix x(n, d);
  for (double& v : x.data()) v = rng.uniform(lo, hi);
  return x;
}

}  // namespace oracle
